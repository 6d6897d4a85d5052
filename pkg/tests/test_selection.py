import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from fedsim.errors import ConfigError, DomainError
from fedsim.selection import (
    SELECTORS,
    ArmStats,
    EpsilonGreedySelector,
    KMeansSelector,
    NNMFSelector,
    UCBSelector,
    default_k,
    epsilon_greedy,
    kmeans_1d,
    kmeans_time_clusters,
    make_selector,
    nmf,
    nnmf_recommend,
    random_k,
    select_all,
    ucb,
    ucb_scores,
)

from oracles import kmeans_1d_exhaustive


def stats_with(means, pulls=None):
    s = ArmStats()
    for arm, m in means.items():
        for _ in range((pulls or {}).get(arm, 1)):
            s.record(arm, m)
    return s


def test_select_all():
    assert select_all([3, 1, 2]) == [1, 2, 3]
    assert select_all([7]) == [7]
    with pytest.raises(ConfigError):
        select_all([])


def test_default_k():
    assert default_k(10) == 4
    assert default_k(3) == 2
    assert default_k(1) == 1


def test_epsilon_zero_is_top_k():
    s = stats_with({0: 0.1, 1: 0.5, 2: 0.3, 3: 0.9})
    assert epsilon_greedy(s, [0, 1, 2, 3], 2, 0.0, np.random.default_rng(0)) == [1, 3]


def test_epsilon_zero_prefers_unpulled():
    s = stats_with({0: 0.9, 1: 0.8})
    assert 2 in epsilon_greedy(s, [0, 1, 2], 1, 0.0, np.random.default_rng(0))


def test_epsilon_one_is_uniform():
    s = stats_with({0: 0.9, 1: 0.1, 2: 0.5, 3: 0.2, 4: 0.0})
    rng = np.random.default_rng(77)
    subsets = list(itertools.combinations(range(5), 2))
    counts = dict.fromkeys(subsets, 0)
    for _ in range(10_000):
        counts[tuple(epsilon_greedy(s, range(5), 2, 1.0, rng))] += 1
    p = chisquare(list(counts.values())).pvalue
    assert p > 0.001


def test_epsilon_range_checked():
    with pytest.raises(ConfigError):
        epsilon_greedy(ArmStats(), [0, 1], 1, 1.5, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        epsilon_greedy(ArmStats(), [0, 1], 3, 0.1, np.random.default_rng(0))


def test_ucb_all_unpulled():
    assert ucb(ArmStats(), [4, 2, 9], 3, 1.0, 1) == [2, 4, 9]


def test_ucb_unpulled_first():
    s = stats_with({0: 1.0, 1: 1.0})
    assert ucb(s, [0, 1, 2], 1, 1.0, 5) == [2]


def test_ucb_bonus_favours_less_pulled():
    s = stats_with({0: 0.5, 1: 0.5}, pulls={0: 1, 1: 100})
    scores = ucb_scores(s, [0, 1], 1.0, 10)
    assert scores[0] == pytest.approx(0.5 + math.sqrt(math.log(10)))
    assert scores[1] == pytest.approx(0.5 + math.sqrt(math.log(10) / 100))
    assert ucb(s, [0, 1], 1, 1.0, 10) == [0]


def test_ucb_c_zero_is_greedy():
    s = stats_with({0: 0.2, 1: 0.7, 2: 0.4}, pulls={0: 1, 1: 50, 2: 3})
    assert ucb(s, [0, 1, 2], 2, 0.0, 9) == epsilon_greedy(s, [0, 1, 2], 2, 0.0, np.random.default_rng(0))


def test_kmeans_fixture_matches_exhaustive_oracle():
    times = {0: 1.0, 1: 1.0, 2: 1.0, 3: 100.0, 4: 100.0}
    oracle = kmeans_1d_exhaustive(times, 2)
    clusters = kmeans_time_clusters(times, 2, np.random.default_rng(0))
    assert [set(c) for c in clusters] == oracle == [{0, 1, 2}, {3, 4}]


def test_kmeans_random_instances_match_oracle():
    rng = np.random.default_rng(12)
    for _ in range(30):
        n = int(rng.integers(3, 8))
        # well-separated groups, where Lloyd's fixpoint is the global optimum
        centers = rng.choice([1.0, 50.0, 400.0], size=n)
        times = {i: float(c + rng.uniform(0, 3)) for i, c in enumerate(centers)}
        n_clusters = len(set(centers))
        got = [set(c) for c in kmeans_time_clusters(times, n_clusters, rng)]
        assert sorted(got, key=min) == kmeans_1d_exhaustive(times, n_clusters)


def test_kmeans_single_cluster_and_degenerate():
    times = {i: float(i) for i in range(5)}
    assert kmeans_time_clusters(times, 1) == [[0, 1, 2, 3, 4]]
    flat = {i: 7.0 for i in range(6)}
    a = kmeans_1d(flat, 2, np.random.default_rng(3))
    b = kmeans_1d(flat, 2, np.random.default_rng(3))
    assert a == b
    with pytest.raises(ConfigError):
        kmeans_1d(times, 6)


def test_kmeans_selector_cycles():
    sel = KMeansSelector(n_clusters=2)
    sel.setup([0, 1, 2, 3, 4], {0: 1, 1: 1, 2: 1, 3: 100, 4: 100}, np.random.default_rng(0))
    picks = [sel.select([0, 1, 2, 3, 4], r, None) for r in range(1, 5)]
    assert picks == [[0, 1, 2], [3, 4], [0, 1, 2], [3, 4]]


def test_nmf_rank_one_reconstruction():
    u = np.array([1.0, 2.0, 0.5, 3.0, 1.5])
    v = np.array([0.2, 0.8, 0.4, 0.6])
    H = np.outer(u, v)
    res = nmf(H, 1, np.random.default_rng(0), check_nonneg=True)
    assert np.linalg.norm(res.reconstruction - H) < 1e-4
    assert (res.W >= 0).all() and (res.V >= 0).all()


def test_nmf_rejects_negative():
    with pytest.raises(DomainError):
        nmf(np.array([[1.0, -1.0]]), 1, np.random.default_rng(0))


def test_nmf_nonneg_every_iteration_with_missing():
    rng = np.random.default_rng(4)
    for _ in range(20):
        H = rng.random((6, 5))
        H[rng.random(H.shape) < 0.3] = np.nan
        res = nmf(H, 2, rng, check_nonneg=True)
        assert np.isfinite(res.reconstruction).all()


def test_nnmf_empty_history_falls_back_to_random():
    pool = [0, 1, 2, 3, 4, 5]
    got = nnmf_recommend(np.zeros((6, 0)), pool, 2, np.random.default_rng(9))
    assert got == random_k(pool, 2, np.random.default_rng(9))
    all_nan = np.full((6, 3), np.nan)
    assert nnmf_recommend(all_nan, pool, 2, np.random.default_rng(9)) == got


def test_nnmf_dominant_collaborator_always_selected():
    rng = np.random.default_rng(0)
    for trial in range(20):
        H = rng.uniform(0.1, 0.5, (5, 6))
        H[3] = rng.uniform(0.9, 1.0, 6)
        H[rng.random(H.shape) < 0.2] = np.nan
        H[3, -1] = 0.95
        assert 3 in nnmf_recommend(H, [0, 1, 2, 3, 4], 1, np.random.default_rng(trial))


def policy_instances():
    return [make_selector(name) for name in sorted(SELECTORS)]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_subsets_are_valid_and_deterministic(seed, n):
    pool = list(range(100, 100 + n))
    times = {k: float(np.random.default_rng(seed + k).uniform(100, 1000)) for k in pool}
    picks = []
    for _ in range(2):
        rng = np.random.default_rng(seed)
        run = []
        for sel in policy_instances():
            sel.setup(pool, times, rng)
            for r in range(1, 4):
                chosen = sel.select(pool, r, rng)
                assert chosen and len(set(chosen)) == len(chosen) and set(chosen) <= set(pool)
                sel.observe(r, {k: float(np.random.default_rng(seed + r + k).random()) for k in chosen})
                run.append(chosen)
        picks.append(run)
    assert picks[0] == picks[1]


def test_reward_bookkeeping():
    rng = np.random.default_rng(5)
    for cls in (EpsilonGreedySelector, UCBSelector):
        sel = cls(k=2)
        for r in range(1, 30):
            sel.observe(r, {int(a): float(rng.random()) for a in rng.choice(5, 3, replace=False)})
        for arm, rewards in sel.rewards.items():
            assert all(0.0 <= x <= 1.0 for x in rewards)
            assert sel.stats.n(arm) == len(rewards)
            assert sel.stats.mean(arm) == pytest.approx(sum(rewards) / len(rewards), abs=1e-12)


def test_reward_is_clamped_dsc_increase():
    sel = UCBSelector()
    sel.observe(1, {0: 0.5, 1: 0.5})
    sel.observe(2, {0: 0.7, 1: 0.2})
    assert sel.rewards == {0: [pytest.approx(0.2)], 1: [0.0]}


def test_nnmf_selector_history_layout():
    sel = NNMFSelector(k=1)
    sel.observe(1, {0: 0.5, 2: 0.1})
    sel.observe(2, {1: 0.3})
    H = sel.history([0, 1, 2])
    assert H.shape == (3, 2)
    assert H[0, 0] == 0.5 and np.isnan(H[1, 0]) and H[1, 1] == 0.3


def test_unknown_selector_and_option():
    with pytest.raises(ConfigError):
        make_selector("oracle")
    with pytest.raises(ConfigError):
        make_selector("ucb", epsilon=0.1)
