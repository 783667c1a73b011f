"""Data model, validation report, CSV round-trip, and seed derivation."""
import numpy as np
import pytest

from fedcause import (
    EstimateReport,
    SeedSpec,
    SiteDataset,
    TargetCovariates,
    read_sites_csv,
    read_target_csv,
    validate_dataset,
    write_sites_csv,
    write_target_csv,
)
from fedcause.core import DROPPED, SelectionLabel


def _random_sites(rng, n_sites=3, d=3):
    sites = []
    for k in range(1, n_sites + 1):
        n = int(rng.integers(5, 20))
        x = rng.normal(size=(n, d)) * rng.uniform(1e-3, 1e3)
        z = rng.integers(0, 2, size=n)
        z[:2] = [0, 1]
        y = rng.normal(size=n) / 3.0  # awkward mantissas on purpose
        sites.append(SiteDataset.from_arrays(k, x, z, y))
    return sites


def test_sites_csv_round_trip_is_exact(tmp_path, rng):
    sites = _random_sites(rng)
    path = tmp_path / "sites.csv"
    write_sites_csv(sites, path)
    back = read_sites_csv(path)
    assert [s.site_id for s in back] == [s.site_id for s in sites]
    for a, b in zip(sites, back):
        assert np.array_equal(a.x_matrix, b.x_matrix)
        assert np.array_equal(a.z_vec, b.z_vec)
        assert np.array_equal(a.y_vec, b.y_vec)


def test_target_csv_round_trip_is_exact(tmp_path, rng):
    target = TargetCovariates(rng.normal(size=(50, 4)) * 1e-7)
    path = tmp_path / "target.csv"
    write_target_csv(target, path)
    back = read_target_csv(path)
    assert np.array_equal(back.xs, target.xs)


def test_csv_headers(tmp_path, rng):
    sites = _random_sites(rng, n_sites=1, d=2)
    write_sites_csv(sites, tmp_path / "s.csv")
    write_target_csv(TargetCovariates(rng.normal(size=(3, 2))), tmp_path / "t.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "site_id,z,y,x1,x2"
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "x1,x2"


def test_validate_well_formed_ok():
    rng = np.random.default_rng(1)
    sites = _random_sites(rng)
    rep = validate_dataset(sites, TargetCovariates(rng.normal(size=(10, 3))))
    assert rep.ok and not rep.errors


def test_validate_dimension_mismatch():
    rng = np.random.default_rng(2)
    s1 = SiteDataset.from_arrays(1, rng.normal(size=(4, 3)), [0, 1, 0, 1], rng.normal(size=4))
    s2 = SiteDataset.from_arrays(2, rng.normal(size=(4, 2)), [0, 1, 0, 1], rng.normal(size=4))
    rep = validate_dataset([s1, s2], TargetCovariates(rng.normal(size=(5, 3))))
    assert not rep.ok
    assert any("dimension mismatch site 2" in e for e in rep.errors)


def test_validate_missing_arm_is_warning_not_error():
    rng = np.random.default_rng(3)
    s1 = SiteDataset.from_arrays(1, rng.normal(size=(4, 3)), [1, 1, 1, 1], rng.normal(size=4))
    rep = validate_dataset([s1], TargetCovariates(rng.normal(size=(5, 3))))
    assert rep.ok
    assert any("site 1 lacks control units" in w for w in rep.warnings)


def test_validate_duplicate_ids_and_nonfinite():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 3))
    x[0, 0] = np.nan
    s1 = SiteDataset.from_arrays(1, x, [0, 1, 0, 1], rng.normal(size=4))
    s2 = SiteDataset.from_arrays(1, rng.normal(size=(4, 3)), [0, 1, 0, 1], rng.normal(size=4))
    rep = validate_dataset([s1, s2], TargetCovariates(rng.normal(size=(5, 3))))
    assert any("duplicate site_id 1" in e for e in rep.errors)
    assert any("non-finite value in site 1" in e for e in rep.errors)


def test_validate_z_outside_binary():
    s = SiteDataset.from_arrays(1, np.zeros((3, 2)), [0, 1, 2], [0.0, 0.0, 0.0])
    rep = validate_dataset([s], TargetCovariates(np.zeros((2, 2))))
    assert any("z outside {0,1}" in e for e in rep.errors)


def test_selection_label():
    assert DROPPED.dropped
    lab = SelectionLabel.selected(2, 1)
    assert (lab.site_id, lab.z, lab.dropped) == (2, 1, False)
    with pytest.raises(ValueError):
        SelectionLabel(site_id=0, z=1)


def test_report_json_round_trip():
    rep = EstimateReport(
        estimator_name="ClbIPW", tau_hat=-0.25, var_hat=1.75, n_effective=6000,
        ci_level=0.95, ci_lo=-0.3, ci_hi=-0.2,
        per_site_diagnostics=[(1, "included", 0.5)], notes="x")
    back = EstimateReport.from_json(rep.to_json())
    assert back == rep


def test_report_validation():
    kw = dict(tau_hat=0.0, var_hat=1.0, n_effective=1, ci_level=0.95, ci_lo=-1, ci_hi=1)
    with pytest.raises(ValueError):
        EstimateReport(estimator_name="Nope", **kw)
    with pytest.raises(ValueError):
        EstimateReport(estimator_name="MetaIPW", tau_hat=5.0, var_hat=1.0,
                       n_effective=1, ci_level=0.95, ci_lo=-1, ci_hi=1)
    with pytest.raises(ValueError):
        EstimateReport(estimator_name="MetaIPW", tau_hat=0.0, var_hat=-1.0,
                       n_effective=1, ci_level=0.95, ci_lo=-1, ci_hi=1)


def test_seed_spec_is_deterministic_and_spreads():
    a, b = SeedSpec(42), SeedSpec(42)
    assert a.child_seed(3, 7) == b.child_seed(3, 7)
    assert a.child_seed(3, 7) != a.child_seed(3, 8)
    assert a.child_seed(3, 7) != a.child_seed(4, 7)
    assert SeedSpec(43).child_seed(3, 7) != a.child_seed(3, 7)
    x1 = a.rng(0, 1).normal(size=5)
    x2 = b.rng(0, 1).normal(size=5)
    assert np.array_equal(x1, x2)
    assert not np.array_equal(x1, a.rng(0, 2).normal(size=5))
