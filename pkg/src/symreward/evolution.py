"""Generation loop tying the populations together.

Each generation: evaluate the neural genomes, refresh them by elitism,
tournament, crossover, and mutation; run gradient updates on every reward
learner; evaluate the learners' policies; evolve the reward-tree portfolio;
rank everyone and crown a champion. Every episode of every evaluation feeds
the shared replay buffer, which is also the global frame counter.

Environment reward reaches genomes and trees only as a summed episodic
fitness. Gradient updates see only tree-generated rewards.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import symtree
from .envlab import DiscreteActions, tree_feature_dim
from .learners import ContinuousLearner, DiscreteLearner
from .neuronet import Mlp, MutationParams, crossover_genomes, mutate_genome
from .replay import Transition

log = logging.getLogger(__name__)

TOURNAMENT_SIZE = 3
ELITE_FRACTION = 0.07
MUTATION_PROB = 0.9


@dataclass(frozen=True)
class FitnessScore:
    """Mean undiscounted episodic return over episodes_averaged episodes."""

    value: float
    episodes_averaged: int


@dataclass
class GenerationRecord:
    generation: int
    ea_fitness: tuple
    sr_fitness: tuple
    champion_id: int
    champion_fitness: float
    total_frames: int
    # None on generations where no gradient updates ran (NaN would poison
    # record equality, which the determinism checks rely on)
    mean_intrinsic_reward: float | None
    wall_clock: float = field(compare=False, default=0.0)

    @property
    def fitness_by_id(self):
        out = {i: f for i, f in enumerate(self.ea_fitness)}
        base = len(self.ea_fitness)
        out.update({base + i: f for i, f in enumerate(self.sr_fitness)})
        return out


class GenomePolicy:
    """Acting wrapper so a bare network evaluates like a learner policy.

    Continuous nets end in tanh and are rescaled to the action bounds;
    discrete nets are Q-tables read by argmax.
    """

    def __init__(self, net, actions):
        self.net = net
        self.actions = actions
        self.discrete = isinstance(actions, DiscreteActions)
        if not self.discrete:
            self._center = (actions.high + actions.low) / 2.0
            self._half = (actions.high - actions.low) / 2.0

    def act(self, state, rng, explore=False, force_random=False):
        if self.discrete:
            if force_random:
                return int(rng.integers(self.actions.n))
            return int(np.argmax(self.net.forward(state)))
        if force_random:
            return rng.uniform(self.actions.low, self.actions.high, size=self.actions.dim)
        return self._center + self._half * self.net.forward(state)


@dataclass
class Population:
    """The two co-evolving halves plus their elite counts.

    Genome slots are 0..k_ea-1 and learner slots continue from k_ea, so an
    individual's id is stable across a run regardless of mode.
    """

    ea_actors: list
    sr_learners: list
    elite_frac: float = ELITE_FRACTION

    def __post_init__(self):
        if not 0.0 < self.elite_frac <= 1.0:
            raise ValueError(f"elite_frac must be in (0, 1], got {self.elite_frac}")

    @property
    def k_ea(self):
        return len(self.ea_actors)

    @property
    def k_sr(self):
        return len(self.sr_learners)

    @property
    def elites_ea(self):
        return math.ceil(self.elite_frac * self.k_ea)

    @property
    def elites_sr(self):
        return math.ceil(self.elite_frac * self.k_sr)


def build_population(env_spec, rng, k_ea, k_sr, *, elite_frac=ELITE_FRACTION,
                     hidden=(256, 256), tree_max_depth=3, feature_layout="sas",
                     p_operator=symtree.P_OPERATOR, p_feature=symtree.P_FEATURE,
                     gamma=0.99, tau=1e-3, explore_sigma=0.1, epsilon=0.1,
                     heads=2, sanitizer=None):
    """Fresh genomes and learners sized for an environment."""
    actions = env_spec.actions
    discrete = isinstance(actions, DiscreteActions)
    obs_dim = env_spec.observation_dim
    feature_dim = tree_feature_dim(env_spec, feature_layout)
    out_dim = actions.n if discrete else actions.dim
    actors = [
        Mlp.create([obs_dim, *hidden, out_dim], rng,
                   output_activation="linear" if discrete else "tanh")
        for _ in range(k_ea)
    ]
    learners = []
    for _ in range(k_sr):
        tree = symtree.random_tree(feature_dim, tree_max_depth, rng,
                                   p_operator=p_operator, p_feature=p_feature)
        if discrete:
            learners.append(DiscreteLearner(
                obs_dim=obs_dim, n_actions=actions.n, tree=tree, rng=rng,
                heads=heads, hidden=hidden, gamma=gamma, tau=tau,
                epsilon=epsilon, feature_layout=feature_layout, sanitizer=sanitizer))
        else:
            learners.append(ContinuousLearner(
                obs_dim=obs_dim, action_dim=actions.dim,
                action_low=actions.low, action_high=actions.high,
                tree=tree, rng=rng, hidden=hidden, gamma=gamma, tau=tau,
                explore_sigma=explore_sigma, feature_layout=feature_layout,
                sanitizer=sanitizer))
    return Population(actors, learners, elite_frac)


def evaluate(policy, env, buffer, rng, episodes=1, explore=False, warmup_until=0):
    """Roll episodes, append every transition, return the mean return.

    The stored done flag is cleared on truncation so bootstrapping still
    happens across artificial time limits. While the buffer holds fewer
    than warmup_until transitions, actions are drawn uniformly at random.
    """
    if episodes < 1:
        raise ValueError(f"need at least one episode, got {episodes}")
    total = 0.0
    for _ in range(episodes):
        obs = env.reset(rng)
        done = truncated = False
        while not (done or truncated):
            force = buffer.total_appends < warmup_until
            action = policy.act(obs, rng, explore=explore, force_random=force)
            result = env.step(action)
            buffer.append(Transition(obs, action, result.reward, result.observation,
                                     result.done and not result.truncated))
            total += result.reward
            obs, done, truncated = result.observation, result.done, result.truncated
    return FitnessScore(total / episodes, episodes)


def _ranked_indices(scores):
    # descending by score, ties broken toward the lower slot
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def _tournament(scores, rng, size):
    contenders = rng.integers(0, len(scores), size=size)
    best = contenders[0]
    for c in contenders[1:]:
        if scores[c] > scores[best] or (scores[c] == scores[best] and c < best):
            best = c
    return int(best)


def rank_and_select_ea(actors, fitnesses, rng, *, elites, mutation=None,
                       tournament_size=TOURNAMENT_SIZE, mut_prob=MUTATION_PROB,
                       stats=None):
    """Next genome generation: elites survive verbatim, the rest are bred.

    Tournament winners seed the breeding set; because repeated winners
    collapse, the remaining slots are filled by crossing a random elite
    with a random member. Every non-elite is then mutated with probability
    mut_prob. Elites are never mutated.
    """
    k = len(actors)
    if len(fitnesses) != k:
        raise ValueError(f"{k} actors but {len(fitnesses)} fitnesses")
    if not 1 <= elites <= k:
        raise ValueError(f"elites must be in [1, {k}], got {elites}")
    order = _ranked_indices(fitnesses)
    next_pop = [actors[i].clone() for i in order[:elites]]
    target = k - elites
    chosen, seen = [], set()
    for _ in range(target):
        winner = _tournament(fitnesses, rng, tournament_size)
        if winner not in seen:
            seen.add(winner)
            chosen.append(winner)
    bred = [actors[i].clone() for i in chosen]
    while len(bred) < target:
        elite = next_pop[rng.integers(elites)]
        other = bred[rng.integers(len(bred))]
        bred.append(crossover_genomes(elite, other, rng))
        if stats is not None:
            stats["ea_crossovers"] = stats.get("ea_crossovers", 0) + 1
    mutation = MutationParams() if mutation is None else mutation
    for i in range(len(bred)):
        if rng.random() < mut_prob:
            bred[i] = mutate_genome(bred[i], mutation, rng)
            if stats is not None:
                stats["ea_mutations"] = stats.get("ea_mutations", 0) + 1
    return next_pop + bred


def evolve_sr_portfolio(learners, scores, rng, *, elites, max_depth,
                        tournament_size=TOURNAMENT_SIZE, stats=None):
    """Next tree per learner slot; the top learners keep theirs verbatim.

    Tournament winners over the current portfolio form a parent pool; the
    non-elite slots are then filled with fresh products, alternating
    crossover of a random elite with a random pool parent and mutation of
    a random pool parent. Returned as a full slot-indexed assignment;
    callers install it without touching network parameters.
    """
    k = len(learners)
    if len(scores) != k:
        raise ValueError(f"{k} learners but {len(scores)} scores")
    if not 1 <= elites <= k:
        raise ValueError(f"elites must be in [1, {k}], got {elites}")
    trees = [ln.tree for ln in learners]
    order = _ranked_indices(scores)
    elite_trees = [trees[i] for i in order[:elites]]
    target = k - elites
    assignment = list(trees)
    if target == 0:
        return assignment
    pool, seen = [], set()
    for _ in range(target):
        winner = _tournament(scores, rng, tournament_size)
        if winner not in seen:
            seen.add(winner)
            pool.append(trees[winner])
    fresh = []
    while len(fresh) < target:
        elite = elite_trees[rng.integers(elites)]
        parent = pool[rng.integers(len(pool))]
        fresh.append(symtree.crossover_trees(elite, parent, max_depth, rng))
        if stats is not None:
            stats["tree_crossovers"] = stats.get("tree_crossovers", 0) + 1
        if len(fresh) < target:
            source = pool[rng.integers(len(pool))]
            fresh.append(symtree.mutate_tree(source, max_depth, rng))
            if stats is not None:
                stats["tree_mutations"] = stats.get("tree_mutations", 0) + 1
    for slot, tree in zip(order[elites:], fresh):
        assignment[slot] = tree
    return assignment


def select_champion(fitness_by_id):
    """Highest fitness wins; exact ties go to the lowest id."""
    if not fitness_by_id:
        raise ValueError("no evaluated individuals")
    return min(fitness_by_id, key=lambda i: (-fitness_by_id[i], i))


class Orchestrator:
    """Runs the generation loop against one environment family.

    Single-threaded mode replays bit-identically under a fixed seed; the
    optional thread pool only parallelizes episode rollouts, whose buffer
    appends interleave nondeterministically.
    """

    def __init__(self, env_factory, population, buffer, rng, *,
                 batch_size=256, actor_lr=1e-3, critic_lr=1e-3,
                 episodes_averaged=1, exploration_steps=5000,
                 mutation=None, mut_prob=MUTATION_PROB,
                 tournament_size=TOURNAMENT_SIZE, tree_max_depth=3,
                 updates_per_generation=None, max_updates_per_generation=64,
                 single_threaded=True, max_workers=8):
        self.env_factory = env_factory
        self.population = population
        self.buffer = buffer
        self.rng = rng
        self.batch_size = int(batch_size)
        self.actor_lr = float(actor_lr)
        self.critic_lr = float(critic_lr)
        self.episodes_averaged = int(episodes_averaged)
        self.exploration_steps = int(exploration_steps)
        self.mutation = MutationParams() if mutation is None else mutation
        self.mut_prob = float(mut_prob)
        self.tournament_size = int(tournament_size)
        self.tree_max_depth = int(tree_max_depth)
        self.updates_per_generation = (
            None if updates_per_generation is None else int(updates_per_generation))
        self.max_updates_per_generation = int(max_updates_per_generation)
        self.single_threaded = bool(single_threaded)
        self.max_workers = int(max_workers)
        self.generation = 0
        self.counters = {
            "ea_crossovers": 0, "ea_mutations": 0,
            "tree_crossovers": 0, "tree_mutations": 0,
            "learner_updates": 0, "learner_update_batches_skipped": 0,
            "learner_reinits": 0,
        }
        self.loss_rows = []
        self._frames_at_last_update = 0
        self.last_champion = None

    @property
    def total_frames(self):
        return self.buffer.total_appends

    def _spec(self):
        return self.env_factory().spec

    def _evaluate_group(self, policies, explore, warmup_until):
        # rng draws happen up front in slot order so the master stream is
        # identical whether or not rollouts run on the pool
        seeds = [self.rng.integers(2 ** 63) for _ in policies]
        def one(policy, seed):
            return evaluate(policy, self.env_factory(), self.buffer,
                            np.random.default_rng(seed),
                            episodes=self.episodes_averaged,
                            explore=explore, warmup_until=warmup_until)
        if self.single_threaded or len(policies) <= 1:
            return [one(p, s) for p, s in zip(policies, seeds)]
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            return list(pool.map(one, policies, seeds))

    def _update_learners(self):
        pop = self.population
        if not pop.sr_learners:
            return None
        new_frames = self.buffer.total_appends - self._frames_at_last_update
        self._frames_at_last_update = self.buffer.total_appends
        if self.updates_per_generation is not None:
            # explicit schedule; the cap governs only the derived default
            n_updates = self.updates_per_generation
        else:
            n_updates = max(1, new_frames // self.batch_size)
            n_updates = min(n_updates, self.max_updates_per_generation)
        if self.buffer.size < self.batch_size:
            log.debug("generation %d: buffer below one batch, no gradient updates",
                      self.generation)
            self.counters["learner_update_batches_skipped"] += 1
            return None
        reward_sum = 0.0
        reward_n = 0
        for slot, learner in enumerate(pop.sr_learners):
            for u in range(n_updates):
                batch = self.buffer.sample_minibatch(self.batch_size, self.rng)
                if learner.discrete:
                    report = learner.update(batch, self.critic_lr)
                else:
                    report = learner.update(batch, self.actor_lr, self.critic_lr)
                self.counters["learner_updates"] += 1
                reward_sum += report["mean_reward"]
                reward_n += 1
                row = {"generation": self.generation, "learner": pop.k_ea + slot,
                       "update": u}
                row.update(report)
                self.loss_rows.append(row)
            if not learner.all_finite():
                log.warning("learner %d diverged; reinitializing networks",
                            pop.k_ea + slot)
                learner.reinit(self.rng)
                self.counters["learner_reinits"] += 1
        return reward_sum / reward_n if reward_n else None

    def run_generation(self):
        """One full generation; returns its record."""
        start = time.perf_counter()
        self.generation += 1
        pop = self.population
        spec = self._spec()

        ea_scores = []
        evaluated_actors = list(pop.ea_actors)
        if pop.ea_actors:
            policies = [GenomePolicy(net, spec.actions) for net in pop.ea_actors]
            ea_scores = self._evaluate_group(policies, explore=False, warmup_until=0)
            pop.ea_actors = rank_and_select_ea(
                pop.ea_actors, [s.value for s in ea_scores], self.rng,
                elites=pop.elites_ea, mutation=self.mutation,
                tournament_size=self.tournament_size, mut_prob=self.mut_prob,
                stats=self.counters)

        mean_intrinsic = self._update_learners()

        sr_scores = []
        if pop.sr_learners:
            sr_scores = self._evaluate_group(
                pop.sr_learners, explore=True, warmup_until=self.exploration_steps)
            champion_trees = [ln.tree for ln in pop.sr_learners]
            assignment = evolve_sr_portfolio(
                pop.sr_learners, [s.value for s in sr_scores], self.rng,
                elites=pop.elites_sr, max_depth=self.tree_max_depth,
                tournament_size=self.tournament_size, stats=self.counters)
            for learner, tree in zip(pop.sr_learners, assignment):
                learner.set_tree(tree)
        else:
            champion_trees = []

        fitness_by_id = {i: s.value for i, s in enumerate(ea_scores)}
        fitness_by_id.update(
            {pop.k_ea + i: s.value for i, s in enumerate(sr_scores)})
        champion_id = select_champion(fitness_by_id)
        if champion_id < pop.k_ea:
            self.last_champion = {
                "id": champion_id, "kind": "ea",
                "nets": [evaluated_actors[champion_id].clone()], "tree": None,
            }
        else:
            learner = pop.sr_learners[champion_id - pop.k_ea]
            nets = ([learner.actor, learner.q1, learner.q2]
                    if not learner.discrete else list(learner.heads))
            self.last_champion = {
                "id": champion_id, "kind": "sr",
                "nets": [n.clone() for n in nets],
                "tree": champion_trees[champion_id - pop.k_ea],
            }
        return GenerationRecord(
            generation=self.generation,
            ea_fitness=tuple(s.value for s in ea_scores),
            sr_fitness=tuple(s.value for s in sr_scores),
            champion_id=champion_id,
            champion_fitness=fitness_by_id[champion_id],
            total_frames=self.buffer.total_appends,
            mean_intrinsic_reward=mean_intrinsic,
            wall_clock=time.perf_counter() - start,
        )

    def drain_loss_rows(self):
        rows, self.loss_rows = self.loss_rows, []
        return rows
