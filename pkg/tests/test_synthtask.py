import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import kruskal

from fedsim.errors import ConfigError, DomainError
from fedsim.metrics import REGIONS, dice
from fedsim.synthtask import (
    N_PARAMS,
    Partitioning,
    apportion,
    export_dataset,
    export_predictions,
    generate_dataset,
    import_labels,
    init_params,
    local_train,
    loss_and_grad,
    make_case,
    mean_dice,
    partition_artificial,
    predict,
    read_manifest,
    stack_cases,
)

from oracles import finite_difference


@pytest.fixture(scope="module")
def small():
    return generate_dataset(3, n_cases=30, n_sites=5, dims=(10, 10, 10))


def test_determinism():
    a = generate_dataset(11, n_cases=12, n_sites=4, dims=(8, 8, 8))
    b = generate_dataset(11, n_cases=12, n_sites=4, dims=(8, 8, 8))
    assert a.partitioning == b.partitioning and a.holdout_ids == b.holdout_ids
    for cid in a.cases:
        assert np.array_equal(a.cases[cid].features, b.cases[cid].features)
        assert all(a.cases[cid].labels[r] == b.cases[cid].labels[r] for r in REGIONS)
    c = generate_dataset(12, n_cases=12, n_sites=4, dims=(8, 8, 8))
    assert not np.array_equal(a.cases["case_0000"].features, c.cases["case_0000"].features)


def test_uniform_profile():
    ds = generate_dataset(0, n_cases=100, site_size_profile="uniform", n_sites=10, dims=(8, 8, 8))
    assert [len(ds.partitioning.cases_of(s)) for s in ds.partitioning.sites] == [10] * 10


def test_skewed_sites_differ_in_lesion_size():
    ds = generate_dataset(42)
    groups = [[ds.cases[c].wt_size for c in ds.partitioning.cases_of(s)] for s in ds.partitioning.sites]
    groups = [g for g in groups if len(g) >= 3]
    assert kruskal(*groups).pvalue < 1e-3
    sizes = [len(ds.partitioning.cases_of(s)) for s in ds.partitioning.sites]
    assert max(sizes) > 2 * min(sizes)


def test_nesting_and_split(small):
    for case in small.cases.values():
        et, tc, wt = (case.labels[r].voxels for r in ("ET", "TC", "WT"))
        assert not (et & ~tc).any() and not (tc & ~wt).any()
        assert wt.any()
    assert set(small.train_ids).isdisjoint(small.holdout_ids)
    assert set(small.train_ids) | set(small.holdout_ids) == set(small.cases)
    assert len(small.holdout_ids) == pytest.approx(0.2 * len(small.cases), abs=len(small.partitioning.sites))


def test_generation_errors():
    with pytest.raises(ConfigError):
        generate_dataset(0, n_cases=3, n_sites=5)
    with pytest.raises(ConfigError):
        generate_dataset(0, site_size_profile="bimodal")


def test_apportion():
    assert apportion(10, [1, 1, 1]) == [4, 3, 3]
    assert sum(apportion(100, [5, 1, 0.3], minimum=1)) == 100
    with pytest.raises(DomainError):
        apportion(2, [1, 1, 1], minimum=1)


# --- artificial partitioning -------------------------------------------------


def natural_with(sizes, rng):
    assignment, wt = {}, {}
    idx = 0
    for site, n in enumerate(sizes):
        for _ in range(n):
            cid = f"c{idx:04d}"
            assignment[cid] = site
            wt[cid] = int(rng.integers(1, 40))  # coarse, so ties occur
            idx += 1
    return Partitioning("natural", assignment), wt


def test_23_sites_become_33():
    rng = np.random.default_rng(0)
    sizes = [40, 35, 30, 22, 18] + [2] * 10 + [1] * 8
    natural, wt = natural_with(sizes, rng)
    art = partition_artificial(natural, wt, 5)
    assert natural.site_count == 23
    assert art.site_count == 33


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(5, 25), st.integers(1, 5))
def test_partition_properties(seed, n_sites, n_split):
    rng = np.random.default_rng(seed)
    sizes = [int(x) for x in rng.integers(3, 30, n_sites)]
    natural, wt = natural_with(sizes, rng)
    art = partition_artificial(natural, wt, n_split)
    assert art.site_count == natural.site_count + 2 * n_split
    assert set(art.assignment) == set(natural.assignment)
    # oracle: the split sites are the n_split largest, ties by lower id
    expected = sorted(range(n_sites), key=lambda s: (-sizes[s], s))[:n_split]
    for site in range(n_sites):
        original = set(natural.cases_of(site))
        parts = sorted({art.assignment[c] for c in original})
        if site not in expected:
            assert parts == [site]
            continue
        assert len(parts) == 3 and parts[0] == site
        groups = [sorted(art.cases_of(p), key=lambda c: (wt[c], c)) for p in parts]
        assert set().union(*map(set, groups)) == original
        assert [len(g) for g in groups] == [len(x) for x in np.array_split(np.arange(len(original)), 3)]
        for lo, hi in zip(groups, groups[1:]):
            assert (wt[lo[-1]], lo[-1]) < (wt[hi[0]], hi[0])


def test_partition_errors():
    natural, wt = natural_with([5, 2, 2], np.random.default_rng(0))
    with pytest.raises(ConfigError):
        partition_artificial(natural, wt, 2)
    with pytest.raises(ConfigError):
        partition_artificial(natural, wt, 4)


# --- model -------------------------------------------------------------------


def test_gradient_matches_finite_differences(small):
    rng = np.random.default_rng(5)
    X, Y = stack_cases([small.cases[c] for c in small.train_ids[:3]])
    for _ in range(5):
        p = rng.normal(0, 1, N_PARAMS)
        _, g = loss_and_grad(p, X, Y)
        fd = finite_difference(lambda q: loss_and_grad(q, X, Y)[0], p, 1e-5)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_epochs_zero_is_identity(small):
    cases = [small.cases[c] for c in small.train_ids[:2]]
    p = np.random.default_rng(1).normal(size=N_PARAMS)
    out, loss = local_train(p, cases, 0, 10.0, np.random.default_rng(0))
    assert np.array_equal(out, p)
    assert loss == loss_and_grad(p, *stack_cases(cases))[0]
    with pytest.raises(DomainError):
        local_train(p, cases, -1, 1.0, np.random.default_rng(0))


def test_separable_case_is_learned():
    # noise-free sphere on a coarse grid: every region threshold sits ~0.05 from the nearest voxel radius
    case = make_case("toy", 0, center=(3, 3, 3), radii=(2.1, 2.1, 2.1), dims=(7, 7, 7))
    params, _ = local_train(init_params(), [case], 200, 300.0, np.random.default_rng(0))
    pred = predict(params, case)
    assert all(dice(pred[r], case.labels[r]) == 1.0 for r in REGIONS)


def test_training_is_seeded(small):
    cases = [small.cases[c] for c in small.train_ids[:4]]
    a = local_train(init_params(), cases, 2, 5.0, np.random.default_rng(3))
    b = local_train(init_params(), cases, 2, 5.0, np.random.default_rng(3))
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_zero_parameters_predict_empty(small):
    pred = predict(init_params(), small.cases[small.train_ids[0]])
    assert all(pred[r].count == 0 for r in REGIONS)


def test_prediction_nesting_on_random_models(small):
    rng = np.random.default_rng(2)
    case = small.cases[small.train_ids[0]]
    for _ in range(1000):
        pred = predict(rng.normal(0, 3, N_PARAMS), case)
        et, tc, wt = (pred[r].voxels for r in ("ET", "TC", "WT"))
        assert not (et & ~tc).any() and not (tc & ~wt).any()


def test_mean_dice_bounds(small):
    cases = [small.cases[c] for c in small.holdout_ids]
    assert 0.0 <= mean_dice(init_params(), cases) <= 1.0


def test_export_import_roundtrip(tmp_path, small):
    ids = small.holdout_ids[:3]
    export_dataset(small, tmp_path / "labels", ids)
    manifest = read_manifest(tmp_path / "labels" / "manifest.csv")
    assert [row["case_id"] for row in manifest] == ids
    assert all(int(row["wt_voxels"]) == small.cases[row["case_id"]].wt_size for row in manifest)
    loaded = import_labels(tmp_path / "labels")
    assert sorted(loaded) == ids
    for cid in ids:
        for r in REGIONS:
            assert loaded[cid][r] == small.cases[cid].labels[r]
    params = np.random.default_rng(0).normal(size=N_PARAMS)
    export_predictions(params, [small.cases[c] for c in ids], tmp_path / "pred")
    pred = import_labels(tmp_path / "pred")
    assert pred[ids[0]]["WT"] == predict(params, small.cases[ids[0]])["WT"]
