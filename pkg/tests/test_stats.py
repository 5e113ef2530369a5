"""Binning, regression and CSV emission for validation reports."""

import csv
import math

import numpy as np
import pytest

from scval import stats
from scval.errors import DegenerateInput, InsufficientData
from scval.validator import DiisReport


def synthetic_reports(n=1200, seed=42):
    """Reports whose labeled errors scale linearly with the self residual."""
    rng = np.random.default_rng(seed)
    sig = 10 ** rng.uniform(-4, -2, n)
    reports = []
    for i in range(n):
        x = sig[i] * abs(1 + 0.05 * rng.standard_normal())
        reports.append(
            DiisReport(
                system=f"{i:04d}",
                source="synthetic",
                self_diis=x,
                strict_diis=2.0 * x * (1 + 0.1 * rng.standard_normal()),
                mixed_hd=x,
                mixed_dh=x,
                mae_h=0.5 * x * (1 + 0.2 * rng.standard_normal()),
                mae_d=0.1 * x,
                d_e_total=3.0 * x * (1 + 0.3 * rng.standard_normal()),
                d_gap=x * (1 + 0.5 * rng.standard_normal()),
            )
        )
    return reports


# --- bin_records -----------------------------------------------------------------


@pytest.mark.parametrize("scheme", ["equal_width", "equal_count"])
def test_linear_target_halves_to_bin_means(scheme):
    rng = np.random.default_rng(0)
    x = rng.uniform(0.0, 1.0, 400)
    bins_y = stats.bin_records(x, 2.0 * x, n_bins=8, scheme=scheme)
    bins_x = stats.bin_records(x, x, n_bins=8, scheme=scheme)
    np.testing.assert_allclose(bins_y.means, 2.0 * bins_x.means, rtol=1e-14)


def test_constant_target_gives_zero_spread():
    rng = np.random.default_rng(1)
    x = rng.uniform(0.0, 1.0, 200)
    bins = stats.bin_records(x, np.full(200, 3.5), n_bins=10)
    np.testing.assert_array_equal(bins.means, np.full(10, 3.5))
    np.testing.assert_array_equal(bins.stds, np.zeros(10))
    assert bins.counts.sum() == 200


def test_equal_count_splits_evenly():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(10000)
    bins = stats.bin_records(x, 2.0 * x, n_bins=20, scheme="equal_count")
    assert bins.counts.tolist() == [500] * 20


def test_bin_edges_ascend_and_centers_interleave():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1.0, 1.0, 300)
    bins = stats.bin_records(x, x, n_bins=12, scheme="equal_width")
    assert np.all(np.diff(bins.edges) > 0)
    assert np.all(bins.centers > bins.edges[:-1])
    assert np.all(bins.centers < bins.edges[1:])


def test_bin_records_validation():
    x = np.arange(5.0)
    with pytest.raises(InsufficientData):
        stats.bin_records(x, x, n_bins=10)
    with pytest.raises(ValueError):
        stats.bin_records(x, x[:3])
    with pytest.raises(ValueError):
        stats.bin_records(x, x, n_bins=0)
    with pytest.raises(ValueError):
        stats.bin_records(x, x, n_bins=2, scheme="kmeans")


def test_degenerate_condition_collapses_to_one_bin():
    x = np.full(50, 1.0)
    bins = stats.bin_records(x, np.arange(50.0), n_bins=5)
    assert bins.counts.tolist() == [50]


# --- linfit ----------------------------------------------------------------------


def test_linfit_exact_line():
    x = np.linspace(0.0, 5.0, 20)
    fit = stats.linfit(x, 3.0 * x + 1.0)
    assert fit.slope == pytest.approx(3.0, abs=1e-12)
    assert fit.intercept == pytest.approx(1.0, abs=1e-12)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.n_points == 20


def test_linfit_three_point_identity():
    fit = stats.linfit([0.0, 1.0, 2.0], [0.0, 1.0, 2.0])
    assert fit.slope == pytest.approx(1.0, abs=1e-15)
    assert fit.intercept == pytest.approx(0.0, abs=1e-15)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-15)


def test_independent_noise_has_no_correlation():
    rng = np.random.default_rng(3)
    fit = stats.linfit(rng.uniform(0, 1, 1000), rng.standard_normal(1000))
    assert fit.r_squared < 0.05


def test_constant_target_fits_perfectly():
    fit = stats.linfit([0.0, 1.0, 2.0, 3.0], [4.0, 4.0, 4.0, 4.0])
    assert fit.slope == 0.0
    assert fit.r_squared == 1.0


def test_identical_condition_is_degenerate():
    with pytest.raises(DegenerateInput):
        stats.linfit([2.0, 2.0, 2.0], [0.0, 1.0, 2.0])


def test_linfit_needs_three_points():
    with pytest.raises(InsufficientData):
        stats.linfit([0.0, 1.0], [0.0, 1.0])


def test_slope_recovery_within_three_standard_errors():
    rng = np.random.default_rng(7)
    x = rng.uniform(0.0, 1.0, 2000)
    y = 2.0 * x + 0.1 * rng.standard_normal(2000)
    fit = stats.linfit(x, y)
    resid = y - fit.predict(x)
    sxx = ((x - x.mean()) ** 2).sum()
    se = math.sqrt((resid**2).sum() / (len(x) - 2) / sxx)
    assert abs(fit.slope - 2.0) < 3.0 * se


def test_r_squared_stays_in_unit_interval():
    rng = np.random.default_rng(8)
    for _ in range(20):
        fit = stats.linfit(rng.uniform(0, 1, 30), rng.standard_normal(30))
        assert 0.0 <= fit.r_squared <= 1.0


# --- correlation_report ----------------------------------------------------------


def test_linear_reports_regress_cleanly():
    res = stats.correlation_report(synthetic_reports())
    assert set(res) == set(stats.DEFAULT_TARGETS)
    for entry in res.values():
        assert entry.mean_fit.r_squared >= 0.95
        assert entry.std_fit.r_squared >= 0.9
        assert entry.bins.counts.sum() == 1200
    # Errors were generated at twice the condition value.
    assert res["strict_diis"].mean_fit.slope == pytest.approx(2.0, rel=0.05)


def test_identical_reports_rejected():
    reports = [
        DiisReport(system=str(i), self_diis=1.0, strict_diis=1.0, mae_h=1.0,
                   mae_d=1.0, d_e_total=1.0, d_gap=1.0)
        for i in range(100)
    ]
    with pytest.raises(InsufficientData):
        stats.correlation_report(reports)


def test_missing_target_field_rejected():
    reports = [
        DiisReport(system=str(i), self_diis=float(i), strict_diis=float(i))
        for i in range(200)
    ]
    with pytest.raises(InsufficientData):
        stats.correlation_report(reports, targets=("d_gap",))
    # but the populated field alone is fine
    res = stats.correlation_report(reports, targets=("strict_diis",))
    assert res["strict_diis"].mean_fit.r_squared == pytest.approx(1.0)


def test_unknown_condition_rejected():
    with pytest.raises(ValueError):
        stats.correlation_report(synthetic_reports(100), condition="vibes")
    with pytest.raises(InsufficientData):
        stats.correlation_report([])


def test_shuffled_reports_emit_identical_csv(tmp_path):
    reports = synthetic_reports()
    rng = np.random.default_rng(9)
    shuffled = [reports[i] for i in rng.permutation(len(reports))]
    paths = []
    for name, batch in (("a", reports), ("b", shuffled)):
        res = stats.correlation_report(batch)
        base = tmp_path / name
        base.mkdir()
        stats.write_summary_csv(base / "summary.csv", res, "self_diis")
        stats.write_binned_csv(base / "binned.csv", res["strict_diis"].bins)
        xs = stats.series(batch, "self_diis")
        ys = stats.series(batch, "strict_diis")
        stats.write_plot_data_csv(base / "plot.csv", xs, ys,
                                  res["strict_diis"])
        paths.append(base)
    for fname in ("summary.csv", "binned.csv", "plot.csv"):
        assert (paths[0] / fname).read_bytes() == (paths[1] / fname).read_bytes()


def test_binning_schemes_agree_on_r_squared():
    reports = synthetic_reports()
    by_count = stats.correlation_report(reports, scheme="equal_count")
    by_width = stats.correlation_report(reports, scheme="equal_width")
    for target in stats.DEFAULT_TARGETS:
        gap = abs(
            by_count[target].mean_fit.r_squared
            - by_width[target].mean_fit.r_squared
        )
        assert gap < 0.1


def test_raw_points_fit_uses_every_record():
    reports = synthetic_reports(400)
    binned = stats.correlation_report(reports, targets=("strict_diis",))
    raw = stats.correlation_report(reports, targets=("strict_diis",),
                                   raw_points=True)
    assert raw["strict_diis"].mean_fit.n_points == 400
    assert binned["strict_diis"].mean_fit.n_points < 400
    # Both see the same underlying slope.
    assert raw["strict_diis"].mean_fit.slope == pytest.approx(
        binned["strict_diis"].mean_fit.slope, rel=0.2
    )


def test_min_count_excludes_thin_bins():
    reports = synthetic_reports(100)
    with pytest.raises(InsufficientData):
        stats.correlation_report(reports, targets=("strict_diis",),
                                 n_bins=10, min_count=30)


def test_series_aliases():
    reports = synthetic_reports(50)
    np.testing.assert_array_equal(
        stats.series(reports, "mae"),
        np.array([r.mae_h for r in reports]),
    )
    with pytest.raises(ValueError):
        stats.series(reports, "nope")


# --- CSV formats -----------------------------------------------------------------


def test_binned_csv_schema(tmp_path):
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, 100)
    bins = stats.bin_records(x, 2 * x, n_bins=5)
    path = tmp_path / "binned.csv"
    stats.write_binned_csv(path, bins)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["center", "count", "mean", "std"]
    assert len(rows) == 6
    for row, center, count in zip(rows[1:], bins.centers, bins.counts):
        assert float(row[0]) == center
        assert int(row[1]) == count


def test_summary_csv_schema(tmp_path):
    res = stats.correlation_report(synthetic_reports(400))
    path = tmp_path / "summary.csv"
    stats.write_summary_csv(path, res, "self_diis")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["condition", "target", "statistic", "slope",
                       "intercept", "r_squared", "n_points"]
    assert len(rows) == 1 + 2 * len(stats.DEFAULT_TARGETS)
    assert {row[0] for row in rows[1:]} == {"self_diis"}
    assert {row[2] for row in rows[1:]} == {"mean", "std"}
    for row in rows[1:]:
        assert 0.0 <= float(row[5]) <= 1.0


def test_plot_data_csv_schema(tmp_path):
    reports = synthetic_reports(300)
    res = stats.correlation_report(reports, targets=("strict_diis",))
    xs = stats.series(reports, "self_diis")
    ys = stats.series(reports, "strict_diis")
    path = tmp_path / "plot.csv"
    stats.write_plot_data_csv(path, xs, ys, res["strict_diis"])
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "y", "fit_mean", "fit_std", "band_lo", "band_hi"]
    assert len(rows) == 301
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    assert np.all(np.diff(data[:, 0]) >= 0)  # sorted by x
    np.testing.assert_allclose(data[:, 4], data[:, 2] - 3 * data[:, 3],
                               atol=1e-12)
    np.testing.assert_allclose(data[:, 5], data[:, 2] + 3 * data[:, 3],
                               atol=1e-12)
    fit = res["strict_diis"].mean_fit
    np.testing.assert_allclose(data[:, 2], fit.predict(data[:, 0]), atol=1e-12)
