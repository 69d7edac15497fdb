"""Generation loop: evaluation, selection, portfolio evolution, champions."""

import math

import numpy as np
import pytest
from scipy import stats as scipy_stats

from symreward import symtree
from symreward.envlab import make_env
from symreward.evolution import (
    FitnessScore,
    GenomePolicy,
    Orchestrator,
    Population,
    build_population,
    evaluate,
    evolve_sr_portfolio,
    rank_and_select_ea,
    select_champion,
    _tournament,
)
from symreward.learners import ContinuousLearner, DiscreteLearner
from symreward.neuronet import Mlp, MutationParams
from symreward.replay import CyclicBuffer


@pytest.fixture(autouse=True)
def _quiet_ieee():
    # the divergence test pushes inf through networks on purpose
    with np.errstate(all="ignore"):
        yield


class Scripted:
    """Policy stub driven by a function of the observation."""

    def __init__(self, fn):
        self.fn = fn
        self.force_flags = []

    def act(self, state, rng, explore=False, force_random=False):
        self.force_flags.append(force_random)
        return self.fn(state)


def to_goal(obs):
    # gridworld obs is (x, y, dx, dy) / (n - 1)
    return 0 if obs[2] > 0 else 2


def make_net(rng, sizes=(4, 8, 2)):
    return Mlp.create(list(sizes), rng)


def gridworld_buffer():
    return CyclicBuffer(10_000, 4)


# ------------------------------------------------------------------- evaluate

def test_evaluate_hugging_wall_scores_zero():
    env = make_env("sparse_gridworld")
    buf = gridworld_buffer()
    policy = Scripted(lambda obs: 1)  # -x forever, blocked at the edge
    score = evaluate(policy, env, buf, np.random.default_rng(0))
    assert score == FitnessScore(0.0, 1)
    assert buf.total_appends == 32  # truncation budget 4n
    # truncated endings keep bootstrapping alive
    assert not buf._dones[buf.total_appends - 1]


def test_evaluate_reaching_goal_scores_one():
    env = make_env("sparse_gridworld")
    buf = gridworld_buffer()
    score = evaluate(Scripted(to_goal), env, buf, np.random.default_rng(0))
    assert score.value == 1.0
    assert buf.total_appends == 14  # 7 steps east + 7 steps north
    assert buf._dones[13]


def test_evaluate_averages_over_episodes():
    env = make_env("sparse_gridworld")
    buf = gridworld_buffer()
    score = evaluate(Scripted(to_goal), env, buf, np.random.default_rng(0), episodes=3)
    assert score == FitnessScore(1.0, 3)
    assert buf.total_appends == 42
    with pytest.raises(ValueError):
        evaluate(Scripted(to_goal), env, buf, np.random.default_rng(0), episodes=0)


def test_evaluate_warmup_is_per_step():
    env = make_env("sparse_gridworld")
    buf = gridworld_buffer()
    policy = Scripted(lambda obs: 1)
    evaluate(policy, env, buf, np.random.default_rng(0), warmup_until=10)
    assert policy.force_flags == [True] * 10 + [False] * 22


# --------------------------------------------------------------- EA selection

def test_minimal_population_elite_plus_one():
    rng = np.random.default_rng(1)
    actors = [make_net(rng) for _ in range(2)]
    out = rank_and_select_ea(actors, [1.0, 2.0], rng, elites=1)
    assert len(out) == 2
    assert np.array_equal(out[0].flatten(), actors[1].flatten())
    assert all(o is not a for o in out for a in actors)


def test_elites_bit_survive_many_generations():
    rng = np.random.default_rng(2)
    pop = [make_net(rng) for _ in range(6)]
    for _ in range(300):
        fits = list(rng.permutation(6).astype(float))
        best = pop[int(np.argmax(fits))].flatten().copy()
        pop = rank_and_select_ea(pop, fits, rng, elites=1)
        assert np.array_equal(pop[0].flatten(), best)
        assert len(pop) == 6


def test_tournament_census_matches_closed_form():
    # winner of 3 uniform-with-replacement contenders over k ranked
    # individuals: P(index i wins) = ((k - i)^3 - (k - i - 1)^3) / k^3
    k, n = 10, 100_000
    fits = [float(k - i) for i in range(k)]
    rng = np.random.default_rng(3)
    counts = np.zeros(k)
    for _ in range(n):
        counts[_tournament(fits, rng, 3)] += 1
    expected = np.array([((k - i) ** 3 - (k - i - 1) ** 3) / k ** 3 for i in range(k)])
    assert abs(expected.sum() - 1.0) < 1e-12
    result = scipy_stats.chisquare(counts, expected * n)
    assert result.pvalue > 0.001, result


def test_selection_inclusion_monotone_in_fitness():
    rng = np.random.default_rng(4)
    actors = [make_net(rng, (3, 4, 1)) for _ in range(6)]
    flats = [a.flatten() for a in actors]
    fits = [5.0, 4.0, 3.0, 2.0, 1.0, 0.0]
    counts = np.zeros(6)
    for _ in range(1500):
        out = rank_and_select_ea(actors, fits, rng, elites=1, mut_prob=0.0)
        for member in out[1:]:
            mf = member.flatten()
            for i, f in enumerate(flats):
                if np.array_equal(mf, f):
                    counts[i] += 1
                    break
    for i in range(5):
        assert counts[i] > counts[i + 1] - 100, counts


def test_mutation_probability_extremes_and_elite_immunity():
    rng = np.random.default_rng(5)
    actors = [make_net(rng) for _ in range(5)]
    fits = [4.0, 3.0, 2.0, 1.0, 0.0]
    stats = {}
    rank_and_select_ea(actors, fits, rng, elites=1, mut_prob=0.0, stats=stats)
    assert stats.get("ea_mutations", 0) == 0

    wild = MutationParams(mut_strength=5.0, mut_frac=0.5)
    stats = {}
    out = rank_and_select_ea(actors, fits, rng, elites=2, mutation=wild,
                             mut_prob=1.0, stats=stats)
    assert stats["ea_mutations"] == 3
    assert np.array_equal(out[0].flatten(), actors[0].flatten())
    assert np.array_equal(out[1].flatten(), actors[1].flatten())


def test_rank_select_validation():
    rng = np.random.default_rng(6)
    actors = [make_net(rng) for _ in range(3)]
    with pytest.raises(ValueError):
        rank_and_select_ea(actors, [1.0, 2.0], rng, elites=1)
    with pytest.raises(ValueError):
        rank_and_select_ea(actors, [1.0, 2.0, 3.0], rng, elites=0)
    with pytest.raises(ValueError):
        rank_and_select_ea(actors, [1.0, 2.0, 3.0], rng, elites=4)


# ---------------------------------------------------------- portfolio of trees

class TreeHolder:
    def __init__(self, tree):
        self.tree = tree


def distinct_trees(rng, n, feature_dim=6, max_depth=3):
    trees, seen = [], set()
    while len(trees) < n:
        t = symtree.random_tree(feature_dim, max_depth, rng)
        key = symtree.serialize(t)
        if key not in seen:
            seen.add(key)
            trees.append(t)
    return trees


def test_portfolio_all_elite_keeps_everything():
    rng = np.random.default_rng(7)
    holders = [TreeHolder(t) for t in distinct_trees(rng, 4)]
    out = evolve_sr_portfolio(holders, [3.0, 2.0, 1.0, 0.0], rng, elites=4, max_depth=3)
    assert all(a is h.tree for a, h in zip(out, holders))


def test_portfolio_exactly_top_j_survive_structurally():
    # frozen seeds without coincidental product-equals-elite collisions,
    # which the operators permit (root grafts, crossover fallback copies)
    for seed in (1, 2, 3, 4, 5, 6, 8):
        rng = np.random.default_rng(100 + seed)
        holders = [TreeHolder(t) for t in distinct_trees(rng, 8)]
        scores = list(rng.permutation(8).astype(float))
        order = sorted(range(8), key=lambda i: -scores[i])
        elite_keys = {symtree.serialize(holders[i].tree) for i in order[:2]}
        out = evolve_sr_portfolio(holders, scores, rng, elites=2, max_depth=3)
        survivors = sum(1 for t in out if symtree.serialize(t) in elite_keys)
        assert survivors == 2, f"seed {seed}: {survivors}"
        for i in order[:2]:
            assert out[i] is holders[i].tree
        assert all(symtree.depth(t.root) <= 3 for t in out)
        assert len(out) == 8


def test_portfolio_counters_and_validation():
    rng = np.random.default_rng(8)
    holders = [TreeHolder(t) for t in distinct_trees(rng, 6)]
    stats = {}
    evolve_sr_portfolio(holders, [5.0, 4.0, 3.0, 2.0, 1.0, 0.0], rng,
                        elites=1, max_depth=3, stats=stats)
    assert stats["tree_crossovers"] + stats["tree_mutations"] >= 5
    assert stats["tree_crossovers"] >= stats["tree_mutations"]
    with pytest.raises(ValueError):
        evolve_sr_portfolio(holders, [1.0], rng, elites=1, max_depth=3)
    with pytest.raises(ValueError):
        evolve_sr_portfolio(holders, [1.0] * 6, rng, elites=0, max_depth=3)


# ------------------------------------------------------------------- champion

def test_select_champion():
    assert select_champion({3: 1.5}) == 3
    assert select_champion({0: 5.0, 7: 7.0}) == 7  # learner beats genome
    assert select_champion({2: 4.0, 5: 4.0, 1: 3.0}) == 2
    with pytest.raises(ValueError):
        select_champion({})


# ------------------------------------------------------------- population init

def test_build_population_shapes():
    rng = np.random.default_rng(9)
    spec = make_env("sparse_catcher").spec
    pop = build_population(spec, rng, k_ea=25, k_sr=25, hidden=(8,))
    assert pop.k_ea == 25 and pop.k_sr == 25
    assert pop.elites_ea == 2 and pop.elites_sr == 2  # ceil(0.07 * 25)
    assert all(isinstance(ln, DiscreteLearner) for ln in pop.sr_learners)
    assert all(ln.tree.feature_dim == 9 for ln in pop.sr_learners)  # 2*4 obs + action
    assert pop.ea_actors[0].out_dim == 3  # left, stay, right

    cspec = make_env("sparse_pointmass").spec
    cpop = build_population(cspec, rng, k_ea=50, k_sr=0, hidden=(8,))
    assert cpop.elites_ea == 4  # ceil(0.07 * 50)
    assert cpop.k_sr == 0 and cpop.sr_learners == []
    assert cpop.ea_actors[0].out_dim == 2
    assert cpop.ea_actors[0].layers[-1].activation == "tanh"

    mixed = build_population(cspec, rng, k_ea=1, k_sr=1, hidden=(8,))
    assert isinstance(mixed.sr_learners[0], ContinuousLearner)
    with pytest.raises(ValueError):
        Population([], [], elite_frac=0.0)


# ---------------------------------------------------------------- orchestrator

def make_orchestrator(seed, k_ea=2, k_sr=2, env="sparse_catcher", **kw):
    rng = np.random.default_rng(seed)
    factory = lambda: make_env(env)
    spec = factory().spec
    pop = build_population(spec, rng, k_ea=k_ea, k_sr=k_sr, hidden=(4,))
    buf = CyclicBuffer(50_000, spec.observation_dim,
                       None if env != "sparse_pointmass" else spec.actions.dim)
    defaults = dict(batch_size=64, exploration_steps=0, single_threaded=True)
    defaults.update(kw)
    return Orchestrator(factory, pop, buf, rng, **defaults)


def test_frames_and_update_accounting_on_fixed_length_episodes():
    # catcher episodes are exactly 200 steps, so the arithmetic is exact
    orch = make_orchestrator(10)
    records = [orch.run_generation() for _ in range(3)]
    assert [r.total_frames for r in records] == [800, 1600, 2400]
    assert records[0].generation == 1 and records[2].generation == 3
    # gen 1 updates see 400 new genome frames -> 6 batches of 64 per learner;
    # gens 2-3 see 400 + 400 -> 12 per learner
    assert orch.counters["learner_updates"] == 2 * 6 + 2 * 12 + 2 * 12
    assert all(len(r.ea_fitness) == 2 and len(r.sr_fitness) == 2 for r in records)
    assert all(r.champion_fitness == max(r.fitness_by_id.values()) for r in records)
    assert orch.counters["learner_reinits"] == 0
    rows = orch.drain_loss_rows()
    assert len(rows) == orch.counters["learner_updates"]
    assert orch.loss_rows == []
    assert {row["generation"] for row in rows} == {1, 2, 3}


def test_orchestrator_is_deterministic():
    a = make_orchestrator(11, env="sparse_gridworld")
    b = make_orchestrator(11, env="sparse_gridworld")
    ra = [a.run_generation() for _ in range(3)]
    rb = [b.run_generation() for _ in range(3)]
    assert ra == rb  # wall_clock excluded from record equality
    assert [r.champion_fitness for r in ra] == [r.champion_fitness for r in rb]
    assert a.drain_loss_rows() == b.drain_loss_rows()
    assert a.counters == b.counters


def test_orchestrator_reinits_diverged_learner():
    orch = make_orchestrator(12)
    orch.run_generation()
    victim = orch.population.sr_learners[0]
    victim.heads[0].layers[-1].weights[:] = np.inf
    orch.run_generation()
    assert orch.counters["learner_reinits"] == 1
    assert victim.all_finite()
    assert victim.reinits == 1


def test_ea_only_mode_touches_no_learner_machinery():
    orch = make_orchestrator(13, k_ea=4, k_sr=0)
    records = [orch.run_generation() for _ in range(2)]
    assert orch.counters["learner_updates"] == 0
    assert orch.counters["tree_crossovers"] == 0
    assert orch.counters["tree_mutations"] == 0
    assert orch.counters["ea_crossovers"] + orch.counters["ea_mutations"] > 0
    assert all(r.sr_fitness == () for r in records)
    assert all(r.champion_id < 4 for r in records)
    assert all(r.mean_intrinsic_reward is None for r in records)


def test_sr_only_mode_touches_no_genome_machinery():
    orch = make_orchestrator(14, k_ea=0, k_sr=3)
    records = [orch.run_generation() for _ in range(2)]
    assert orch.counters["ea_crossovers"] == 0
    assert orch.counters["ea_mutations"] == 0
    # nothing in the buffer when generation 1 reaches the update step
    assert orch.counters["learner_update_batches_skipped"] == 1
    assert orch.counters["learner_updates"] > 0  # generation 2 has data
    assert all(r.ea_fitness == () for r in records)
    assert all(0 <= r.champion_id < 3 for r in records)
    assert records[0].mean_intrinsic_reward is None
    assert isinstance(records[1].mean_intrinsic_reward, float)


def test_champion_checkpoint_material():
    orch = make_orchestrator(15)
    record = orch.run_generation()
    champ = orch.last_champion
    assert champ["id"] == record.champion_id
    if champ["kind"] == "ea":
        assert champ["tree"] is None and len(champ["nets"]) == 1
    else:
        assert champ["tree"] is not None and len(champ["nets"]) == 2  # two heads
    # checkpointed nets are frozen copies, not live references
    live = (orch.population.sr_learners + orch.population.ea_actors)
    assert all(n not in live for n in champ["nets"])


def test_warmup_forces_random_actions_in_sr_evaluations():
    orch = make_orchestrator(16, k_ea=0, k_sr=1, exploration_steps=10 ** 9)
    learner = orch.population.sr_learners[0]
    flags = []
    original = learner.act

    def spy(state, rng, explore=False, force_random=False):
        flags.append(force_random)
        return original(state, rng, explore=explore, force_random=force_random)

    learner.act = spy
    orch.run_generation()
    assert flags and all(flags)

    orch2 = make_orchestrator(17, k_ea=0, k_sr=1, exploration_steps=0)
    learner2 = orch2.population.sr_learners[0]
    flags2 = []
    original2 = learner2.act

    def spy2(state, rng, explore=False, force_random=False):
        flags2.append(force_random)
        return original2(state, rng, explore=explore, force_random=force_random)

    learner2.act = spy2
    orch2.run_generation()
    assert flags2 and not any(flags2)


def test_threaded_rollouts_account_frames():
    orch = make_orchestrator(18, k_ea=2, k_sr=1, single_threaded=False, max_workers=3)
    record = orch.run_generation()
    assert record.total_frames == 600
    assert len(record.ea_fitness) == 2 and len(record.sr_fitness) == 1


def test_genome_policy_acting():
    rng = np.random.default_rng(19)
    spec = make_env("sparse_catcher").spec
    net = Mlp.create([4, 4, 3], rng)
    policy = GenomePolicy(net, spec.actions)
    obs = np.array([0.5, 0.2, 0.9, -0.05])
    a = policy.act(obs, rng)
    assert a == int(np.argmax(net.forward(obs)))
    draws = {policy.act(obs, rng, force_random=True) for _ in range(50)}
    assert draws == {0, 1, 2}

    cspec = make_env("sparse_pointmass").spec
    cnet = Mlp.create([4, 4, 2], rng, output_activation="tanh")
    cpolicy = GenomePolicy(cnet, cspec.actions)
    cobs = np.zeros(4)
    assert np.allclose(cpolicy.act(cobs, rng), cnet.forward(cobs))
    randoms = cpolicy.act(cobs, rng, force_random=True)
    assert randoms.shape == (2,) and np.all(np.abs(randoms) <= 1.0)
