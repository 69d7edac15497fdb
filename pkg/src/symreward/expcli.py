"""Experiment configuration, runner, artifact export, and the command line.

A run is described by one flat config (JSON on disk, dataclass in memory),
executed by the generation orchestrator, and leaves a self-describing
directory behind: the exact config snapshot, a learning-curve CSV with one
row per generation, a per-update losses CSV, champion checkpoints, a
resumable state pickle, and optional reward-tree exports (serialized prefix
form plus unrolled pseudocode with environment feature names).

The three modes differ only in population composition: "lisr" splits the
population between neuroevolution actors and reward-tree learners,
"ea-only" gives every slot to actors, "sr-only" gives every slot to
learners. Logging and evaluation are identical across modes so curves are
directly comparable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import pickle
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envlab, evolution, neuronet, symtree
from .learners import RewardSanitizer
from .neuronet import MutationParams
from .replay import CyclicBuffer

log = logging.getLogger(__name__)

MODES = ("lisr", "ea-only", "sr-only")

CURVE_COLUMNS = (
    "generation", "frames", "champion_fitness",
    "ea_fitness_mean", "ea_fitness_max",
    "sr_fitness_mean", "sr_fitness_max",
    "mean_intrinsic_reward",
)

LOSS_COLUMNS = (
    "generation", "learner", "update",
    "mean_reward", "critic_loss_1", "critic_loss_2", "actor_objective",
    "skipped",
)

CONTINUOUS_LR_GRID = (1e-3, 1e-4, 3e-5)
CONTINUOUS_BATCH_GRID = (256, 1024)
DISCRETE_LR_GRID = (1e-3, 1e-4)
DISCRETE_BATCH_GRID = (64, 256)


@dataclass
class ExperimentConfig:
    """Everything a run needs; every field has a usable default.

    Round-trips losslessly through JSON (floats are written in shortest
    round-trip form), and from_dict rejects unknown fields so snapshots
    and hand-written files fail loudly on typos.
    """

    env: str = "sparse_gridworld"
    env_params: dict = field(default_factory=dict)
    mode: str = "lisr"
    population: int = 50
    sr_fraction: float = 0.5
    elite_frac: float = 0.07
    mut_prob: float = 0.9
    mut_frac: float = 0.1
    mut_strength: float = 0.1
    supermut_prob: float = 0.05
    reset_prob: float = 0.05
    tree_max_depth: int = 3
    p_operator: float = 0.7
    p_feature: float = 0.9
    feature_layout: str = "sas"
    gamma: float = 0.99
    tau: float = 1e-3
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    batch_size: int = 256
    exploration_steps: int = 5000
    buffer_capacity: int = 1_000_000
    heads: int = 2
    hidden: list = field(default_factory=lambda: [256, 256])
    explore_sigma: float = 0.1
    epsilon: float = 0.1
    clamp_bound: float = 10.0
    episodes_averaged: int = 1
    tournament_size: int = 3
    updates_per_generation: int | None = None
    max_updates_per_generation: int = 64
    generations: int = 50
    frames: int | None = None
    seed: int = 0
    out_dir: str = "runs/run"
    single_threaded: bool = True
    max_workers: int = 8
    checkpoint_every: int = 10
    export_trees: bool = False

    def validate(self):
        """Raise ValueError naming the first offending field."""
        def bad(name, why):
            raise ValueError(f"config field '{name}': {why} (got {getattr(self, name)!r})")

        if self.env not in envlab.ENV_BUILDERS:
            bad("env", f"must be one of {sorted(envlab.ENV_BUILDERS)}")
        if not isinstance(self.env_params, dict):
            bad("env_params", "must be a mapping of constructor arguments")
        if self.mode not in MODES:
            bad("mode", f"must be one of {list(MODES)}")
        if self.population < 1:
            bad("population", "must be at least 1")
        for name in ("sr_fraction", "mut_prob", "mut_frac", "supermut_prob",
                     "reset_prob", "p_operator", "p_feature", "epsilon"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                bad(name, "must be a probability in [0, 1]")
        if not 0.0 < self.elite_frac <= 1.0:
            bad("elite_frac", "must be in (0, 1]")
        if self.mut_strength < 0.0:
            bad("mut_strength", "must be >= 0")
        if self.tree_max_depth < 1:
            bad("tree_max_depth", "must be at least 1")
        if self.feature_layout not in ("sa", "sas"):
            bad("feature_layout", "must be 'sa' or 'sas'")
        if not 0.0 <= self.gamma <= 1.0:
            bad("gamma", "must be in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            bad("tau", "must be in (0, 1]")
        for name in ("actor_lr", "critic_lr"):
            if getattr(self, name) <= 0.0:
                bad(name, "must be positive")
        for name in ("batch_size", "buffer_capacity", "heads",
                     "episodes_averaged", "tournament_size",
                     "max_updates_per_generation", "checkpoint_every",
                     "max_workers"):
            if getattr(self, name) < 1:
                bad(name, "must be at least 1")
        if self.exploration_steps < 0:
            bad("exploration_steps", "must be >= 0")
        if self.updates_per_generation is not None and self.updates_per_generation < 1:
            bad("updates_per_generation",
                "must be a positive update count, or null for data-proportional")
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            bad("hidden", "must be a non-empty list of positive layer widths")
        if self.explore_sigma < 0.0:
            bad("explore_sigma", "must be >= 0")
        if not (math.isfinite(self.clamp_bound) and self.clamp_bound > 0):
            bad("clamp_bound", "must be finite and positive")
        if self.generations < 0:
            bad("generations", "must be >= 0")
        if self.frames is not None and self.frames < 1:
            bad("frames", "must be a positive frame budget, or null for no cap")
        if not 0 <= self.seed < 2 ** 64:
            bad("seed", "must fit in an unsigned 64-bit integer")
        if not self.out_dir:
            bad("out_dir", "must be a non-empty path")
        return self

    def resolved_ks(self):
        """(k_ea, k_sr) after applying the mode split to the population."""
        if self.mode == "ea-only":
            return self.population, 0
        if self.mode == "sr-only":
            return 0, self.population
        k_sr = int(round(self.population * self.sr_fraction))
        return self.population - k_sr, k_sr

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**data)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class RunArtifacts:
    """Paths produced by one run, plus its in-memory generation records."""

    run_dir: Path
    curve_csv: Path
    losses_csv: Path
    config_snapshot: Path
    champion_checkpoint: Path | None
    champion_genomes: Path | None
    resume_checkpoint: Path | None
    trees_dir: Path | None
    records: list
    counters: dict


class EnvFactory:
    """Picklable environment builder bound to a name and its parameters."""

    def __init__(self, name, params=None):
        self.name = name
        self.params = dict(params or {})

    def __call__(self):
        return envlab.make_env(self.name, **self.params)


def build_orchestrator(config):
    """Wire buffer, population, and orchestrator from a validated config."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    factory = EnvFactory(config.env, config.env_params)
    spec = factory().spec
    discrete = isinstance(spec.actions, envlab.DiscreteActions)
    k_ea, k_sr = config.resolved_ks()
    population = evolution.build_population(
        spec, rng, k_ea, k_sr,
        elite_frac=config.elite_frac,
        hidden=tuple(int(h) for h in config.hidden),
        tree_max_depth=config.tree_max_depth,
        feature_layout=config.feature_layout,
        p_operator=config.p_operator,
        p_feature=config.p_feature,
        gamma=config.gamma,
        tau=config.tau,
        explore_sigma=config.explore_sigma,
        epsilon=config.epsilon,
        heads=config.heads,
        sanitizer=RewardSanitizer(clamp_bound=config.clamp_bound),
    )
    buffer = CyclicBuffer(
        config.buffer_capacity, spec.observation_dim,
        action_dim=None if discrete else spec.actions.dim)
    mutation = MutationParams(
        mut_prob=config.mut_prob, mut_frac=config.mut_frac,
        mut_strength=config.mut_strength,
        supermut_prob=config.supermut_prob, reset_prob=config.reset_prob)
    return evolution.Orchestrator(
        factory, population, buffer, rng,
        batch_size=config.batch_size,
        actor_lr=config.actor_lr,
        critic_lr=config.critic_lr,
        episodes_averaged=config.episodes_averaged,
        exploration_steps=config.exploration_steps,
        mutation=mutation,
        mut_prob=config.mut_prob,
        tournament_size=config.tournament_size,
        tree_max_depth=config.tree_max_depth,
        updates_per_generation=config.updates_per_generation,
        max_updates_per_generation=config.max_updates_per_generation,
        single_threaded=config.single_threaded,
        max_workers=config.max_workers,
    )


def _fmt(value):
    # shortest round-trip decimal form; None and NaN both print as "nan"
    if value is None:
        return "nan"
    return repr(float(value))


def _curve_row(record):
    ea, sr = record.ea_fitness, record.sr_fitness
    return [
        record.generation,
        record.total_frames,
        _fmt(record.champion_fitness),
        _fmt(sum(ea) / len(ea) if ea else None),
        _fmt(max(ea) if ea else None),
        _fmt(sum(sr) / len(sr) if sr else None),
        _fmt(max(sr) if sr else None),
        _fmt(record.mean_intrinsic_reward),
    ]


def _loss_row(row):
    if "head_losses" in row:
        losses = row["head_losses"]
        first = losses[0] if len(losses) > 0 else math.nan
        second = losses[1] if len(losses) > 1 else math.nan
        objective = math.nan
    else:
        first = row["critic_loss_1"]
        second = row["critic_loss_2"]
        objective = row["actor_objective"]
    return [
        row["generation"], row["learner"], row["update"],
        _fmt(row["mean_reward"]), _fmt(first), _fmt(second), _fmt(objective),
        int(row["skipped"]),
    ]


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _best_sr_id(orch, record):
    if not record.sr_fitness:
        return None
    base = orch.population.k_ea
    scores = {base + i: f for i, f in enumerate(record.sr_fitness)}
    return evolution.select_champion(scores)


def _write_champion_checkpoint(orch, record, run_dir):
    """champion.json + champion_genomes.json; returns their paths or None."""
    champ = orch.last_champion
    if champ is None:
        return None, None
    genomes_path = run_dir / "champion_genomes.json"
    neuronet.save_genomes(champ["nets"], genomes_path)
    base = orch.population.k_ea
    portfolio = {
        str(base + slot): symtree.serialize(ln.tree)
        for slot, ln in enumerate(orch.population.sr_learners)
    }
    meta = {
        "format_version": 1,
        "generation": record.generation,
        "total_frames": record.total_frames,
        "champion_id": champ["id"],
        "champion_kind": champ["kind"],
        "champion_fitness": record.champion_fitness,
        "champion_tree": None if champ["tree"] is None
        else symtree.serialize(champ["tree"]),
        "best_sr_id": _best_sr_id(orch, record),
        "portfolio_trees": portfolio,
        "genome_file": genomes_path.name,
    }
    meta_path = run_dir / "champion.json"
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return meta_path, genomes_path


def _write_resume_checkpoint(orch, config, records, run_dir):
    path = run_dir / "resume.pkl"
    state = {
        "format_version": 1,
        "config": config.to_dict(),
        "orchestrator": orch,
        "records": records,
    }
    tmp = path.with_suffix(".pkl.tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(state, fh, protocol=pickle.HIGHEST_PROTOCOL)
    tmp.replace(path)
    return path


def _truncate_csv(path, upto_generation):
    """Drop rows from generations after a resume point (crash leftovers)."""
    if not path.exists():
        return
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return
    header, body = rows[0], rows[1:]
    kept = [r for r in body if r and int(r[0]) <= upto_generation]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv_writer(fh)
        writer.writerow(header)
        writer.writerows(kept)


def _drive(config, orch, records, run_dir, fresh):
    """Shared generation loop behind run() and resume_run()."""
    curve_path = run_dir / "curve.csv"
    losses_path = run_dir / "losses.csv"
    mode_flag = "w" if fresh else "a"
    champion_path = genomes_path = resume_path = None
    if not fresh:
        champion_path = run_dir / "champion.json"
        if not champion_path.exists():
            champion_path = None
        genomes_path = run_dir / "champion_genomes.json"
        if not genomes_path.exists():
            genomes_path = None
        resume_path = run_dir / "resume.pkl"

    with open(curve_path, mode_flag, newline="", encoding="utf-8") as curve_fh, \
            open(losses_path, mode_flag, newline="", encoding="utf-8") as loss_fh:
        curve = _csv_writer(curve_fh)
        losses = _csv_writer(loss_fh)
        if fresh:
            curve.writerow(CURVE_COLUMNS)
            losses.writerow(LOSS_COLUMNS)
            curve_fh.flush()
            loss_fh.flush()
        while orch.generation < config.generations and (
                config.frames is None or orch.total_frames < config.frames):
            record = orch.run_generation()
            records.append(record)
            curve.writerow(_curve_row(record))
            curve_fh.flush()
            for row in orch.drain_loss_rows():
                losses.writerow(_loss_row(row))
            loss_fh.flush()
            log.info(
                "generation %d: frames %d, champion %d at fitness %s",
                record.generation, record.total_frames,
                record.champion_id, _fmt(record.champion_fitness))
            if orch.generation % config.checkpoint_every == 0:
                champion_path, genomes_path = _write_champion_checkpoint(
                    orch, record, run_dir)
                resume_path = _write_resume_checkpoint(
                    orch, config, records, run_dir)

    if records and orch.last_champion is not None:
        champion_path, genomes_path = _write_champion_checkpoint(
            orch, records[-1], run_dir)
        resume_path = _write_resume_checkpoint(orch, config, records, run_dir)

    trees_dir = None
    if config.export_trees and champion_path is not None:
        try:
            exported = export_tree(run_dir)
            trees_dir = exported["tree"].parent
        except ValueError as exc:
            log.warning("tree export skipped: %s", exc)

    return RunArtifacts(
        run_dir=run_dir,
        curve_csv=curve_path,
        losses_csv=losses_path,
        config_snapshot=run_dir / "config.json",
        champion_checkpoint=champion_path,
        champion_genomes=genomes_path,
        resume_checkpoint=resume_path,
        trees_dir=trees_dir,
        records=records,
        counters=dict(orch.counters),
    )


def run(config):
    """Execute a full experiment; returns the artifact paths and records.

    The config snapshot lands in the run directory before the first
    generation, so a crashed run still documents what it was.
    """
    config.validate()
    run_dir = Path(config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.json")
    orch = build_orchestrator(config)
    return _drive(config, orch, [], run_dir, fresh=True)


def resume_run(run_dir):
    """Continue a crashed or stopped run from its latest state pickle.

    Curve and loss rows past the pickled generation are dropped first, so
    the CSVs stay duplicate-free whatever instant the crash hit.
    """
    run_dir = Path(run_dir)
    state_path = run_dir / "resume.pkl"
    if not state_path.exists():
        raise FileNotFoundError(f"no resumable checkpoint in {run_dir}")
    with open(state_path, "rb") as fh:
        state = pickle.load(fh)
    if state.get("format_version") != 1:
        raise ValueError(
            f"unsupported resume checkpoint version {state.get('format_version')!r}")
    config = ExperimentConfig.from_dict(state["config"])
    orch = state["orchestrator"]
    records = state["records"]
    _truncate_csv(run_dir / "curve.csv", orch.generation)
    _truncate_csv(run_dir / "losses.csv", orch.generation)
    return _drive(config, orch, records, run_dir, fresh=False)


def export_tree(run_dir, learner="champion"):
    """Write a tree's prefix form, unrolled pseudocode, and stats files.

    learner is "champion" or an integer slot id. A champion without a tree
    (a plain neuroevolution actor) falls back to the best-ranked reward
    learner's tree; the stats file records whose tree was written.
    """
    run_dir = Path(run_dir)
    meta_path = run_dir / "champion.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no champion checkpoint in {run_dir}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    config = ExperimentConfig.load(run_dir / "config.json")
    spec = envlab.make_env(config.env, **config.env_params).spec
    names = envlab.tree_feature_names(spec, config.feature_layout)

    if learner == "champion":
        stem = "champion_tree"
        text = meta["champion_tree"]
        source = f"champion (slot {meta['champion_id']})"
        if text is None:
            best = meta["best_sr_id"]
            if best is None:
                raise ValueError(
                    "champion is a neuroevolution actor and the run has no "
                    "reward learners; nothing to export")
            text = meta["portfolio_trees"][str(best)]
            source = (f"best reward learner (slot {best}); champion slot "
                      f"{meta['champion_id']} is a neuroevolution actor "
                      "without a tree")
    else:
        slot = int(learner)
        stem = f"learner_{slot}_tree"
        try:
            text = meta["portfolio_trees"][str(slot)]
        except KeyError:
            raise ValueError(
                f"slot {slot} carries no reward tree; tree-bearing slots: "
                f"{sorted(int(s) for s in meta['portfolio_trees'])}") from None
        source = f"learner slot {slot}"

    tree = symtree.deserialize(text, feature_dim=len(names))
    trees_dir = run_dir / "trees"
    trees_dir.mkdir(exist_ok=True)
    tree_path = trees_dir / f"{stem}.txt"
    tree_path.write_text(symtree.serialize(tree) + "\n", encoding="utf-8")
    code_path = trees_dir / f"{stem}_pseudocode.txt"
    code_path.write_text(symtree.unroll(tree, names) + "\n", encoding="utf-8")
    stats_path = trees_dir / f"{stem}_stats.json"
    stats = {
        "operators": symtree.count_operators(tree.root),
        "source": source,
        "generation": meta["generation"],
        "feature_layout": config.feature_layout,
    }
    stats_path.write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    return {"tree": tree_path, "pseudocode": code_path, "stats": stats_path}


def grid_configs(base):
    """Learning-rate and batch-size sweep around one base config.

    Continuous tasks cross actor and critic rates over {1e-3, 1e-4, 3e-5}
    with batches {256, 1024}; discrete tasks tie the two rates together
    over {1e-3, 1e-4} with batches {64, 256}.
    """
    spec = envlab.make_env(base.env, **base.env_params).spec
    if isinstance(spec.actions, envlab.DiscreteActions):
        combos = [
            {"actor_lr": lr, "critic_lr": lr, "batch_size": batch}
            for lr in DISCRETE_LR_GRID
            for batch in DISCRETE_BATCH_GRID
        ]
    else:
        combos = [
            {"actor_lr": alr, "critic_lr": clr, "batch_size": batch}
            for alr in CONTINUOUS_LR_GRID
            for clr in CONTINUOUS_LR_GRID
            for batch in CONTINUOUS_BATCH_GRID
        ]
    out = []
    for i, combo in enumerate(combos):
        out_dir = str(Path(base.out_dir) / f"grid_{i:02d}")
        out.append(dataclasses.replace(base, out_dir=out_dir, **combo))
    return out


def write_grid(base, directory):
    """Write one config file per grid point; returns the file paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, cfg in enumerate(grid_configs(base)):
        path = directory / f"grid_{i:02d}.json"
        cfg.save(path)
        paths.append(path)
    return paths


def build_arg_parser():
    parser = argparse.ArgumentParser(
        prog="symreward",
        description="Run a population of neural actors and tree-supervised "
                    "learners on a sparse-reward task and log learning curves.")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON config file; omitted fields keep defaults")
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed (overrides the config)")
    parser.add_argument("--mode", choices=list(MODES), default=None,
                        help="population composition (overrides the config)")
    parser.add_argument("--out", type=Path, default=None,
                        help="run directory (overrides the config)")
    parser.add_argument("--generations", type=int, default=None,
                        help="generation budget (overrides the config)")
    parser.add_argument("--frames", type=int, default=None,
                        help="total environment step budget (overrides the config)")
    parser.add_argument("--single-threaded", action="store_true", default=None,
                        help="force deterministic sequential evaluation")
    parser.add_argument("--export-trees", action="store_true", default=None,
                        help="write champion tree exports when the run ends")
    parser.add_argument("--grid", action="store_true",
                        help="write the learning-rate/batch sweep configs "
                             "into the output directory instead of running")
    return parser


def _apply_overrides(config, args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    if args.generations is not None:
        overrides["generations"] = args.generations
    if args.frames is not None:
        overrides["frames"] = args.frames
    if args.single_threaded is not None:
        overrides["single_threaded"] = True
    if args.export_trees is not None:
        overrides["export_trees"] = True
    return dataclasses.replace(config, **overrides)


def main(argv=None):
    args = build_arg_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = (ExperimentConfig.load(args.config) if args.config
                  else ExperimentConfig())
        config = _apply_overrides(config, args)
        config.validate()
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.grid:
        paths = write_grid(config, config.out_dir)
        for path in paths:
            print(path)
        return 0
    artifacts = run(config)
    print(f"run directory: {artifacts.run_dir}")
    print(f"learning curve: {artifacts.curve_csv}")
    if artifacts.records:
        last = artifacts.records[-1]
        print(f"final champion: slot {last.champion_id} "
              f"at fitness {_fmt(last.champion_fitness)} "
              f"after {last.total_frames} frames")
    if artifacts.trees_dir is not None:
        print(f"tree exports: {artifacts.trees_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
