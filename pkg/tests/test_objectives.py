import math
import random

from munas.objectives import (
    BoundsConfig,
    ObjectiveVector,
    ParetoArchive,
    ScalarGoal,
    dominates,
    reference_goal,
    sample_goal,
    scalarize,
)

from .conftest import MNIST_BOUNDS
from .oracles import pareto_filter


def vec(e, p, s, m):
    return ObjectiveVector(e, p, s, m)


def test_sampled_coefficients_respect_bounds():
    rng = random.Random(0)
    inv_bounds = [1.0 / b for b in (0.035, 2560, 4608, 30e6)]
    for _ in range(2000):
        goal = sample_goal(MNIST_BOUNDS, rng)
        for lam, floor in zip(goal.lambdas, inv_bounds):
            assert lam >= floor


def test_disabled_objective_gets_zero_coefficient():
    bounds = BoundsConfig(0.1, 1000, 1000, 1e6, macs_enabled=False)
    rng = random.Random(1)
    for _ in range(200):
        goal = sample_goal(bounds, rng)
        assert goal.lambdas[3] == 0.0
        assert all(lam > 0 for lam in goal.lambdas[:3])


def test_scalarize_hand_example():
    goal = ScalarGoal(lambdas=(2.0, 1e-3, 1e-3, 1e-7))
    value = scalarize(goal, vec(0.1, 500, 300, 10**6))
    assert value == 0.5  # max(0.2, 0.5, 0.3, 0.1)


def test_scalarize_at_bounds_is_one():
    goal = reference_goal(MNIST_BOUNDS)
    at_bounds = vec(0.035, 2560, 4608, 30_000_000)
    assert math.isclose(scalarize(goal, at_bounds), 1.0)
    assert scalarize(goal, vec(0.0, 0, 0, 0)) == 0.0


def test_dominates_truth_table():
    a = vec(0.1, 100, 100, 100)
    assert not dominates(a, a)
    assert dominates(vec(0.05, 100, 100, 100), a)
    assert not dominates(vec(0.05, 100, 100, 200), a)
    assert not dominates(a, vec(0.05, 100, 100, 200))


def test_archive_basic_semantics():
    archive = ParetoArchive()
    assert archive.insert(0, vec(0.5, 10, 10, 10)).accepted
    delta = archive.insert(1, vec(0.6, 10, 10, 10))  # dominated
    assert not delta.accepted and len(archive) == 1
    delta = archive.insert(2, vec(0.4, 5, 5, 5))  # dominates member 0
    assert delta.accepted and delta.evicted == (0,)
    assert [cid for cid, _ in archive.members()] == [2]


def test_archive_rejects_duplicates_keeping_first():
    archive = ParetoArchive()
    assert archive.insert(7, vec(0.5, 10, 10, 10)).accepted
    assert not archive.insert(8, vec(0.5, 10, 10, 10)).accepted


def test_archive_matches_brute_force_filter_float_stream():
    rng = random.Random(3)
    stream = [
        (i, vec(rng.random(), rng.randrange(1000), rng.randrange(1000), rng.randrange(1000)))
        for i in range(1000)
    ]
    archive = ParetoArchive()
    for cid, v in stream:
        archive.insert(cid, v)
    expected = pareto_filter([(cid, v.as_tuple()) for cid, v in stream])
    assert sorted(cid for cid, _ in archive.members()) == sorted(cid for cid, _ in expected)


def test_archive_matches_brute_force_filter_with_ties():
    rng = random.Random(4)
    stream = [
        (i, vec(rng.randrange(4) / 4, rng.randrange(4), rng.randrange(4), rng.randrange(4)))
        for i in range(1000)
    ]
    archive = ParetoArchive()
    for cid, v in stream:
        archive.insert(cid, v)
    expected = pareto_filter([(cid, v.as_tuple()) for cid, v in stream])
    assert sorted(archive.members()) == sorted(
        (cid, ObjectiveVector(*v)) for cid, v in expected)


def test_scalarize_argmin_is_weakly_pareto_optimal():
    rng = random.Random(5)
    for trial in range(100):
        points = [
            vec(rng.random(), rng.randrange(10_000), rng.randrange(10_000), rng.randrange(10**7))
            for _ in range(rng.randint(2, 40))
        ]
        goal = sample_goal(MNIST_BOUNDS, rng, trial)
        winner = min(points, key=lambda v: scalarize(goal, v))
        # weak Pareto optimality: nothing strictly better in every objective
        for other in points:
            assert not all(o < w for o, w in zip(other.as_tuple(), winner.as_tuple()))


def test_scale_argmin_invariance_exact():
    rng = random.Random(6)
    for _ in range(100):
        points = [
            vec(rng.random(), rng.randrange(1, 10_000), rng.randrange(1, 10_000),
                rng.randrange(1, 10**7))
            for _ in range(12)
        ]
        goal = sample_goal(MNIST_BOUNDS, rng)
        c = 2.0 ** rng.randint(-8, 8)  # power of two keeps float scaling exact
        scaled_goal = ScalarGoal(
            lambdas=(goal.lambdas[0], goal.lambdas[1] / c, goal.lambdas[2], goal.lambdas[3]))
        for v in points:
            scaled_v = vec(v.error, v.peak_memory_bytes * c, v.model_size_bytes, v.macs)
            assert scalarize(scaled_goal, scaled_v) == scalarize(goal, v)
        original = min(range(12), key=lambda i: scalarize(goal, points[i]))
        rescaled = min(
            range(12),
            key=lambda i: scalarize(
                scaled_goal,
                vec(points[i].error, points[i].peak_memory_bytes * c,
                    points[i].model_size_bytes, points[i].macs)))
        assert original == rescaled


def test_bound_violations_exceed_their_in_bound_ceiling_every_draw():
    rng = random.Random(7)
    violator = vec(0.02, 2 * 2560, 1000, 10**6)  # peak memory over its bound
    for i in range(2000):
        goal = sample_goal(MNIST_BOUNDS, rng, i)
        ceiling = goal.lambdas[1] * MNIST_BOUNDS.peak_memory_bound
        assert goal.lambdas[1] * violator.peak_memory_bytes > ceiling
        # hence it scores strictly worse than any candidate that matches it
        # elsewhere but stays within the peak-memory bound
        within = vec(0.02, 2560, 1000, 10**6)
        assert scalarize(goal, violator) >= scalarize(goal, within)


def test_large_violations_lose_most_draws_despite_better_accuracy():
    rng = random.Random(7)
    inside = vec(0.8 * 0.035, int(0.8 * 2560), int(0.8 * 4608), int(0.8 * 30e6))
    outside = vec(0.4 * 0.035, 4 * 2560, int(0.8 * 4608), int(0.8 * 30e6))
    wins = sum(
        scalarize(goal, inside) < scalarize(goal, outside)
        for goal in (sample_goal(MNIST_BOUNDS, rng, i) for i in range(10_000))
    )
    assert wins > 6500  # 2x-better error does not buy back a 4x violation
