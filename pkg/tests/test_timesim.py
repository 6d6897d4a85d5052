import numpy as np
import pytest

from fedsim.errors import ConfigError, DomainError
from fedsim.timesim import (
    ACTIONS,
    ROUND_CSV_HEADER,
    ActionDist,
    Budget,
    Decision,
    TimeModel,
    TimingProfile,
    WEEK_SECONDS,
    budget_check,
    collaborator_round_time,
    round_time,
    sample_action_time,
    substream,
    write_round_csv,
)


class FixedDraw:
    def __init__(self, value):
        self.value = value

    def normal(self, mu, sigma):
        return self.value


def profile_with(mu, sigma):
    return TimingProfile({0: {a: ActionDist(mu, sigma) for a in ACTIONS}})


def test_degenerate_normal_returns_mu():
    assert sample_action_time(profile_with(60.0, 0.0), 0, "train", np.random.default_rng(0)) == 60.0


def test_negative_draw_is_truncated():
    assert sample_action_time(profile_with(5.0, 10.0), 0, "up", FixedDraw(-2.7)) == 0.001


def test_seeded_draw_is_repeatable():
    p = profile_with(60.0, 5.0)
    first = sample_action_time(p, 0, "down", substream(7, 3, 0, "down"))
    again = sample_action_time(p, 0, "down", substream(7, 3, 0, "down"))
    assert first == again
    assert first != sample_action_time(p, 0, "down", substream(8, 3, 0, "down"))


def test_unknown_lookup():
    p = profile_with(1.0, 0.0)
    with pytest.raises(KeyError):
        sample_action_time(p, 0, "sleep", None)
    with pytest.raises(KeyError):
        sample_action_time(p, 5, "train", None)


def test_profile_validation():
    with pytest.raises(ConfigError):
        ActionDist(0.0, 1.0)
    with pytest.raises(ConfigError):
        ActionDist(1.0, -1.0)
    with pytest.raises(ConfigError):
        TimingProfile({0: {"train": ActionDist(1.0)}})


def test_round_time_formula():
    assert collaborator_round_time(100, 200, down=60, up=60, val=1, train=2) == 620.0
    assert collaborator_round_time(0, 0, down=12.5, up=7.5, val=3, train=4) == 20.0
    assert collaborator_round_time(5, 5, down=0, up=0, val=0, train=0) == 0.0
    with pytest.raises(DomainError):
        collaborator_round_time(-1, 0, 1, 1, 1, 1)


def test_round_barrier_is_max():
    assert round_time({0: 620, 1: 500}) == 620
    assert round_time({3: 314}) == 314
    assert round_time({0: 5, 1: 5, 2: 5}) == 5
    with pytest.raises(DomainError):
        round_time({})


def test_budget_boundary():
    b = Budget()
    assert b.limit == WEEK_SECONDS == 604_800
    assert budget_check(604_800, b) is Decision.CONTINUE
    assert budget_check(604_801, b) is Decision.HALT
    assert budget_check(0, b) is Decision.CONTINUE
    with pytest.raises(ConfigError):
        Budget(0)


def test_closed_form_clock_with_zero_sigma():
    ids = [0, 1, 2]
    profile = TimingProfile.constant(ids, down=30, up=45, val=1.5, train=2.25)
    tm = TimeModel(profile, seed=1)
    counts = {0: (4, 10), 1: (2, 30), 2: (7, 7)}
    per_round = max(30 + 45 + 1.5 * nv + 2.25 * nt for nv, nt in counts.values())
    trajectory = [tm.advance(r, counts).clock_after for r in range(1, 11)]
    expected = [per_round * r for r in range(1, 11)]
    np.testing.assert_allclose(trajectory, expected, rtol=0, atol=1e-9)


def test_clock_strictly_increasing_and_deterministic():
    profile = TimingProfile.synthetic(range(5), seed=3)
    runs = []
    for _ in range(2):
        tm = TimeModel(profile, seed=11)
        runs.append([tm.advance(r, {k: (2, 5) for k in range(5)}).clock_after for r in range(1, 20)])
    assert runs[0] == runs[1]
    assert all(b > a for a, b in zip(runs[0], runs[0][1:]))


def test_selection_independent_draws():
    profile = TimingProfile.synthetic(range(4), seed=3, sigma_fraction=0.3)
    full = TimeModel(profile, seed=5).advance(2, {k: (1, 3) for k in range(4)})
    partial = TimeModel(profile, seed=5).advance(2, {k: (1, 3) for k in (0, 2, 3)})
    for k in (0, 2, 3):
        assert full.per_collaborator[k] == partial.per_collaborator[k]


def test_synthetic_profile_is_seeded():
    a = TimingProfile.synthetic(range(3), seed=1)
    b = TimingProfile.synthetic(range(3), seed=1)
    assert a.dists == b.dists
    assert a.get(0, "train").sigma == pytest.approx(0.1 * a.get(0, "train").mu)


def test_round_csv(tmp_path):
    tm = TimeModel(TimingProfile.constant([0, 1]), seed=0)
    t = tm.advance(1, {1: (1, 1), 0: (2, 2)})
    path = tmp_path / "rounds.csv"
    write_round_csv(path, [t])
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == ROUND_CSV_HEADER
    assert [line.split(",")[1] for line in lines[1:]] == ["0", "1"]
    assert lines[1] == "1,0,60.0,60.0,1.0,2.0,126.0,126.0,126.0"
