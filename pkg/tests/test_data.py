"""Label derivation, region assignment, synthetic data, CSV, and splits."""

import numpy as np
import pytest

from mfhlab.data import (
    CMPL_CAP,
    Dataset,
    SKIP_SECONDS,
    SyntheticSpec,
    assign_regions,
    derive_labels,
    generate_synthetic,
    load_csv,
    random_synthetic_spec,
    spec_digest,
    split,
    with_derived_labels,
    write_csv,
)
from mfhlab.errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    SchemaError,
)
from mfhlab.lattice import Code, FacetSpec, full_regions, make_task


def facets22():
    return FacetSpec((("g", ("a", "b")), ("h", ("c", "d"))))


def facets23():
    return FacetSpec((("group", ("New", "Low", "High")),
                      ("behavior", ("Cmpl", "Finish", "Skip"))))


def regression_tasks(facets):
    tasks = []
    for g in facets.partitions(0):
        for b in facets.partitions(1):
            tasks.append(make_task(facets, {facets.facet_name(0): g,
                                            facets.facet_name(1): b},
                                   head="regression",
                                   label=f"y_{b}"))
    return tuple(tasks)


# --- label derivation ------------------------------------------------------------


def test_labels_watch_equals_length():
    assert derive_labels(30, 30, c=3, cap=5) == (1.0, 1, 0)


def test_labels_short_watch_counts_as_skip():
    y_cmpl, y_finish, y_skip = derive_labels(2, 60, c=3, cap=5)
    assert abs(y_cmpl - 2.0 / 60.0) < 1e-15
    assert (y_finish, y_skip) == (0, 1)


def test_labels_rewatch_truncated_at_cap():
    assert derive_labels(200, 20, c=3, cap=5) == (5.0, 1, 0)


def test_labels_reject_bad_raw_values():
    with pytest.raises(DataError):
        derive_labels(10, 0)
    with pytest.raises(DataError):
        derive_labels(10, -1)
    with pytest.raises(DataError):
        derive_labels(-1, 10)


def test_labels_vectorized_matches_scalar():
    rng = np.random.default_rng(0)
    wt = rng.uniform(0, 120, size=50)
    vl = rng.uniform(1, 90, size=50)
    y_cmpl, y_finish, y_skip = derive_labels(wt, vl)
    for i in range(50):
        c, f, s = derive_labels(float(wt[i]), float(vl[i]))
        assert (y_cmpl[i], y_finish[i], y_skip[i]) == (c, f, s)
    assert np.all((0 <= y_cmpl) & (y_cmpl <= CMPL_CAP))


def test_finished_implies_not_skipped():
    # holds whenever the skip cutoff is below the video length
    rng = np.random.default_rng(1)
    wt = rng.uniform(0, 200, size=300)
    vl = rng.uniform(SKIP_SECONDS + 0.1, 90, size=300)
    _, y_finish, y_skip = derive_labels(wt, vl)
    assert not np.any((y_finish == 1) & (y_skip == 1))


# --- region assignment -----------------------------------------------------------


def test_quantile_sizes_forty_thirtyfive_twentyfive():
    stats = np.random.default_rng(2).permutation(np.arange(1, 101))
    groups = assign_regions(stats, fractions=(0.40, 0.35, 0.25))
    sizes = np.bincount(groups, minlength=3)
    assert list(sizes) == [40, 35, 25]
    # monotone: higher statistic never lands in a lower group
    order = np.argsort(stats)
    assert np.all(np.diff(groups[order]) >= 0)


def test_quantile_ties_split_in_stable_order():
    groups = assign_regions(np.zeros(100), fractions=(0.40, 0.35, 0.25))
    assert list(np.bincount(groups)) == [40, 35, 25]
    assert np.all(groups[:40] == 0)
    assert np.all(groups[40:75] == 1)
    assert np.all(groups[75:] == 2)


def test_quantile_sizes_within_one_of_targets():
    rng = np.random.default_rng(3)
    fractions = (0.40, 0.35, 0.25)
    for n in (7, 23, 97, 1000):
        stats = rng.normal(size=n)
        groups = assign_regions(stats, fractions=fractions)
        sizes = np.bincount(groups, minlength=3)
        assert sizes.sum() == n
        for g, f in enumerate(fractions):
            assert abs(sizes[g] - n * f) <= 1


def test_threshold_rule_puts_boundary_above():
    groups = assign_regions([59.9, 60.0, 60.1, 12.0], thresholds=(60.0,))
    assert list(groups) == [0, 1, 1, 0]


def test_region_rule_validation():
    with pytest.raises(ConfigError):
        assign_regions([1.0], fractions=(0.5, 0.4))
    with pytest.raises(ConfigError):
        assign_regions([1.0], fractions=(0.5, 0.5), thresholds=(1.0,))
    with pytest.raises(ConfigError):
        assign_regions([1.0])
    with pytest.raises(ConfigError):
        assign_regions([1.0], fractions=(1.5, -0.5))
    with pytest.raises(ConfigError):
        assign_regions([1.0], thresholds=(3.0, 2.0))


# --- dataset container -----------------------------------------------------------


def small_dataset():
    f = facets22()
    X = np.arange(8, dtype=float).reshape(4, 2)
    regions = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
    labels = {"y": np.array([0.5, 1.5, 2.5, 3.5])}
    raw = {"time": np.array([1.0, 2.0, 3.0, 4.0])}
    return Dataset(f, X, regions, labels, raw, provenance="unit")


def test_dataset_validation_rejects_bad_shapes():
    f = facets22()
    with pytest.raises(DimensionError):
        Dataset(f, np.zeros(3), np.zeros((3, 2), dtype=int), {})
    with pytest.raises(DimensionError):
        Dataset(f, np.zeros((3, 2)), np.zeros((3, 1), dtype=int), {})
    with pytest.raises(DataError):
        Dataset(f, np.zeros((1, 2)), np.array([[0, 5]]), {})
    with pytest.raises(DimensionError):
        Dataset(f, np.zeros((2, 2)), np.zeros((2, 2), dtype=int),
                {"y": np.zeros(3)})


def test_dataset_sample_view():
    ds = small_dataset()
    s = ds.sample(2)
    assert s.region == Code(((0, 1), (1, 0)))
    assert s.labels == {"y": 2.5}
    assert s.raw == {"time": 3.0}
    assert np.array_equal(s.features, [4.0, 5.0])


def test_dataset_take_reorders_rows():
    ds = small_dataset()
    sub = ds.take([3, 0])
    assert np.array_equal(sub.X[:, 0], [6.0, 0.0])
    assert np.array_equal(sub.labels["y"], [3.5, 0.5])
    assert np.array_equal(sub.regions[0], [1, 1])
    assert sub.provenance == "unit"


def test_with_derived_labels_adds_columns():
    f = facets22()
    ds = Dataset(f, np.zeros((3, 1)), np.zeros((3, 2), dtype=int), {},
                 {"watch_time": np.array([30.0, 2.0, 200.0]),
                  "video_length": np.array([30.0, 60.0, 20.0])})
    out = with_derived_labels(ds, c=3, cap=5)
    assert np.array_equal(out.labels["y_cmpl"], [1.0, 2.0 / 60.0, 5.0])
    assert np.array_equal(out.labels["y_finish"], [1.0, 0.0, 1.0])
    assert np.array_equal(out.labels["y_skip"], [0.0, 1.0, 0.0])
    with pytest.raises(DataError):
        with_derived_labels(small_dataset())


# --- synthetic generation --------------------------------------------------------


def test_spec_validation():
    f = facets22()
    tasks = regression_tasks(f)
    good = random_synthetic_spec(f, tasks, {"g=a": 10, "g=b": 10})
    with pytest.raises(ConfigError):
        random_synthetic_spec(f, tasks, {"g=a": -1})
    with pytest.raises(ConfigError):
        random_synthetic_spec(f, tasks, {"g=zzz": 1})
    with pytest.raises(ConfigError):
        random_synthetic_spec(f, tasks, {"g=a": 1}, noise=-0.1)
    with pytest.raises(ConfigError):
        random_synthetic_spec(f, tasks, {"g=a": 1}, deviation_scale=-1.0)
    # conflicting heads on a shared label column
    clash = tasks + (make_task(f, {"g": "a"}, head="binary", label="y_c"),)
    with pytest.raises(ConfigError):
        random_synthetic_spec(f, clash, {"g=a": 1})
    with pytest.raises(ConfigError):
        SyntheticSpec(f, tasks, {"g=a": 1}, w_shared={}, w_region={})
    with pytest.raises(ConfigError):
        SyntheticSpec(f, tasks, {"g=a": 1},
                      w_shared={t.label_key: np.zeros(3) for t in tasks},
                      w_region={}, feature_dim=16)
    with pytest.raises(ConfigError):
        SyntheticSpec(f, tasks, {"g=a": 1},
                      w_shared=dict(good.w_shared),
                      w_region={"nope": {}})
    with pytest.raises(ConfigError):
        SyntheticSpec(f, tasks, {"g=a": 1},
                      w_shared=dict(good.w_shared),
                      w_region={"y_c": {"g=a": np.zeros(16)}})


def region_counts(ds):
    texts = [r.text(ds.facets) for r in full_regions(ds.facets)]
    rows = {t: 0 for t in texts}
    for i in range(len(ds)):
        rows[ds.region_code(i).text(ds.facets)] += 1
    return rows


def test_partial_counts_spread_round_robin():
    f = facets22()
    spec = random_synthetic_spec(f, regression_tasks(f),
                                 {"g=a": 5, "g=b": 2}, feature_dim=3)
    ds = generate_synthetic(spec)
    assert region_counts(ds) == {"g=a&h=c": 3, "g=a&h=d": 2,
                                 "g=b&h=c": 1, "g=b&h=d": 1}


def test_overlapping_count_keys_rejected():
    f = facets22()
    with pytest.raises(ConfigError, match="both cover"):
        generate_synthetic(random_synthetic_spec(
            f, regression_tasks(f), {"g=a": 1, "h=c": 1}))


def test_imbalanced_group_counts_sum():
    f = facets23()
    spec = random_synthetic_spec(
        f, regression_tasks(f),
        {"group=New": 1000, "group=Low": 4000, "group=High": 20000},
        feature_dim=4)
    ds = generate_synthetic(spec)
    assert len(ds) == 25000
    by_group = np.bincount(ds.regions[:, 0], minlength=3)
    assert list(by_group) == [1000, 4000, 20000]


def test_generation_is_bitwise_deterministic():
    f = facets22()
    spec = random_synthetic_spec(f, regression_tasks(f),
                                 {"g=a": 50, "g=b": 30}, seed=9)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert np.array_equal(a.X, b.X)
    assert np.array_equal(a.regions, b.regions)
    for k in a.labels:
        assert np.array_equal(a.labels[k], b.labels[k])
    assert a.provenance == b.provenance == f"synthetic:{spec_digest(spec)}"


def test_zero_total_samples_is_contract_error():
    f = facets22()
    spec = random_synthetic_spec(f, regression_tasks(f), {"g=a": 0})
    with pytest.raises(ContractError):
        generate_synthetic(spec)


def test_noise_free_labels_reproducible_from_weights():
    f = facets22()
    spec = random_synthetic_spec(f, regression_tasks(f),
                                 {"g=a": 40, "g=b": 40}, noise=0.0, seed=4)
    ds = generate_synthetic(spec)
    for name, w in spec.w_shared.items():
        W = np.stack([w + spec.deviation_scale
                      * spec.w_region[name][ds.region_code(i).text(f)]
                      for i in range(len(ds))])
        expected = np.einsum("nd,nd->n", ds.X, W)
        assert np.array_equal(ds.labels[name], expected)


def test_zero_deviation_pools_to_one_labeler():
    # closed-form check: per-region least squares and pooled least squares
    # recover the same coefficients when every region shares the labeler
    f = facets22()
    tasks = (make_task(f, {"g": "a", "h": "c"}, label="y"),
             make_task(f, {"g": "b", "h": "d"}, label="y"))
    spec = random_synthetic_spec(f, tasks, {"g=a": 6000, "g=b": 6000},
                                 feature_dim=8, deviation_scale=0.0,
                                 noise=0.1, seed=5)
    ds = generate_synthetic(spec)
    y = ds.labels["y"]
    pooled, *_ = np.linalg.lstsq(ds.X, y, rcond=None)
    for g in (0, 1):
        rows = ds.regions[:, 0] == g
        local, *_ = np.linalg.lstsq(ds.X[rows], y[rows], rcond=None)
        assert np.max(np.abs(local - pooled)) < 1e-2
    assert np.max(np.abs(pooled - spec.w_shared["y"])) < 1e-2


def test_binary_labels_are_bernoulli_of_sigmoid():
    f = facets22()
    tasks = tuple(make_task(f, {"g": g, "h": h}, head="binary", label="hit")
                  for g in ("a", "b") for h in ("c", "d"))
    spec = random_synthetic_spec(f, tasks, {"g=a": 4000, "g=b": 4000},
                                 feature_dim=6, seed=6)
    ds = generate_synthetic(spec)
    y = ds.labels["hit"]
    assert set(np.unique(y)) <= {0.0, 1.0}
    # the empirical rate tracks the mean sigmoid under the spec weights
    W = np.stack([spec.w_shared["hit"] + spec.deviation_scale
                  * spec.w_region["hit"][ds.region_code(i).text(f)]
                  for i in range(len(ds))])
    z = np.einsum("nd,nd->n", ds.X, W)
    expected = float(np.mean(1.0 / (1.0 + np.exp(-z))))
    assert abs(float(y.mean()) - expected) < 0.02


def test_digest_tracks_spec_contents():
    f = facets22()
    a = random_synthetic_spec(f, regression_tasks(f), {"g=a": 10}, seed=1)
    b = random_synthetic_spec(f, regression_tasks(f), {"g=a": 10}, seed=1)
    c = random_synthetic_spec(f, regression_tasks(f), {"g=a": 10}, seed=2)
    assert spec_digest(a) == spec_digest(b)
    assert spec_digest(a) != spec_digest(c)


# --- CSV interchange -------------------------------------------------------------


def test_csv_round_trip_exact(tmp_path):
    f = facets22()
    spec = random_synthetic_spec(f, regression_tasks(f),
                                 {"g=a": 20, "g=b": 20}, feature_dim=3,
                                 seed=7)
    ds = generate_synthetic(spec)
    ds = Dataset(f, ds.X, ds.regions, ds.labels,
                 {"time": np.arange(len(ds), dtype=float)}, ds.provenance)
    path = tmp_path / "round.csv"
    write_csv(ds, path)
    back = load_csv(path, f, labels=sorted(ds.labels))
    assert np.array_equal(back.X, ds.X)
    assert np.array_equal(back.regions, ds.regions)
    for k in ds.labels:
        assert np.array_equal(back.labels[k], ds.labels[k])
    assert np.array_equal(back.raw["time"], ds.raw["time"])
    assert back.provenance == str(path)


def test_csv_three_row_file(tmp_path):
    path = tmp_path / "tiny.csv"
    path.write_text("f0,f1,g,h,y\n"
                    "0.5,1.5,a,c,1.0\n"
                    "-2.0,0.25,b,d,0.0\n"
                    "3.0,4.0,a,d,0.5\n")
    ds = load_csv(path, facets22(), labels=("y",))
    assert len(ds) == 3
    assert ds.feature_dim == 2
    assert np.array_equal(ds.X[1], [-2.0, 0.25])
    assert np.array_equal(ds.regions, [[0, 0], [1, 1], [0, 1]])
    assert np.array_equal(ds.labels["y"], [1.0, 0.0, 0.5])


def test_csv_missing_columns_name_the_column(tmp_path):
    f = facets22()
    base = "f0,f1,g,h,y\n0.5,1.5,a,c,1.0\n"
    path = tmp_path / "bad.csv"
    path.write_text(base.replace(",h,", ",other,"))
    with pytest.raises(SchemaError, match="'h'"):
        load_csv(path, f, labels=("y",))
    path.write_text("g,h,y\na,c,1.0\n")
    with pytest.raises(SchemaError, match="'f0'"):
        load_csv(path, f, labels=("y",))
    path.write_text("f0,f2,g,h,y\n0.5,1.5,a,c,1.0\n")
    with pytest.raises(SchemaError, match="contiguous"):
        load_csv(path, f, labels=("y",))
    path.write_text(base)
    with pytest.raises(SchemaError, match="'missing_label'"):
        load_csv(path, f, labels=("missing_label",))
    path.write_text("")
    with pytest.raises(SchemaError, match="header"):
        load_csv(path, f, labels=("y",))


def test_csv_bad_cells_name_row_and_value(tmp_path):
    f = facets22()
    path = tmp_path / "cells.csv"
    path.write_text("f0,g,h,y\n1.0,a,c,0.0\noops,a,c,0.0\n")
    with pytest.raises(DataError, match="row 2.*'oops'"):
        load_csv(path, f, labels=("y",))
    path.write_text("f0,g,h,y\n1.0,a,Qm,0.0\n")
    with pytest.raises(DataError, match="row 1.*'Qm'"):
        load_csv(path, f, labels=("y",))
    path.write_text("f0,g,h,y\n1.0,a,c\n")
    with pytest.raises(DataError, match="row 1"):
        load_csv(path, f, labels=("y",))


# --- splits ----------------------------------------------------------------------


def fraction_dataset(n):
    f = facets22()
    X = np.arange(n, dtype=float).reshape(n, 1)
    regions = np.zeros((n, 2), dtype=int)
    return Dataset(f, X, regions, {"y": np.arange(n, dtype=float)},
                   {"time": np.arange(1.0, n + 1.0)})


def test_fraction_split_sizes_and_partition():
    train, test = split(fraction_dataset(100), fraction=0.8, seed=0)
    assert (len(train), len(test)) == (80, 20)
    ids = np.concatenate([train.X[:, 0], test.X[:, 0]])
    assert sorted(ids) == list(range(100))
    again, _ = split(fraction_dataset(100), fraction=0.8, seed=0)
    assert np.array_equal(again.X, train.X)
    other, _ = split(fraction_dataset(100), fraction=0.8, seed=1)
    assert not np.array_equal(other.X, train.X)


def test_time_split_first_fourteen_days_train():
    ds = fraction_dataset(20)  # time column holds days 1..20
    train, test = split(ds, time_threshold=15.0)
    assert np.array_equal(train.raw["time"], np.arange(1.0, 15.0))
    assert np.array_equal(test.raw["time"], np.arange(15.0, 21.0))


def test_split_validation_and_empty_sides():
    ds = fraction_dataset(3)
    with pytest.raises(ConfigError):
        split(ds)
    with pytest.raises(ConfigError):
        split(ds, fraction=0.5, time_threshold=2.0)
    with pytest.raises(ConfigError):
        split(ds, fraction=1.5)
    with pytest.raises(DataError):
        split(Dataset(ds.facets, ds.X, ds.regions, ds.labels),
              time_threshold=2.0)
    with pytest.raises(ContractError):
        split(ds, fraction=0.9)  # rounds to 3 train rows, none left
    with pytest.raises(ContractError):
        split(ds, time_threshold=0.5)
