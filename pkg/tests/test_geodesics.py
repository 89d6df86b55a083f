import json
import pathlib

import numpy as np
import pytest

from horizon.errors import ConfigError, ConvergenceError
from horizon.geodesics import (
    GeodesicOptions,
    coincidence_check,
    generate_seeds,
    lagrange_residual,
    multistart,
    resolve_workers,
    solve_critical,
)
from horizon.signals import ControlSignal
from horizon.systems import ControlSystem, catalog_load, polynomial_field

ORACLE_PATH = pathlib.Path(__file__).parent / "data" / "heisenberg_shooting.json"


def translation_system(n=2):
    fields = []
    for i in range(n):
        comps = [[] for _ in range(n)]
        comps[i] = [{"coef": 1.0, "exponents": [0] * n}]
        fields.append(polynomial_field(comps, n))
    return ControlSystem(f"translation{n}", fields)


def circle_control(k, m=64, radius=None):
    # discrete loop control winding k times; lands near the k-th ladder point
    if radius is None:
        radius = np.sqrt(2.0 * np.pi * k)
    bps = np.linspace(0.0, 1.0, m + 1)
    mids = 0.5 * (bps[:-1] + bps[1:])
    vals = radius * np.column_stack(
        [np.cos(2.0 * np.pi * k * mids), np.sin(2.0 * np.pi * k * mids)]
    )
    return ControlSignal(bps, vals)


def test_translation_minimum_is_straight_segment():
    sys2 = translation_system(2)
    bps = np.linspace(0.0, 1.0, 9)
    u0 = ControlSignal(bps, np.tile([0.4, -0.2], (8, 1)))
    rec = solve_critical(sys2, [0.0, 0.0], [1.0, 2.0], u_init=u0)
    assert rec.converged
    assert rec.energy == pytest.approx(5.0, rel=1e-8)  # |y-x|^2
    assert np.allclose(rec.control.values, [1.0, 2.0], atol=1e-7)
    assert rec.speed_variation <= 1e-8


def test_translation_multistart_single_cluster():
    sys2 = translation_system(2)
    rep = multistart(sys2, [0.0, 0.0], [1.0, 0.5], p=2.0, n_seeds=6, rng_seed=3, m_seed=8)
    assert rep.seeds_tried == 6
    assert not rep.failed_seeds
    assert len(rep.energy_clusters) == 1
    assert rep.energy_clusters[0]["energy"] == pytest.approx(1.25, rel=1e-6)


def test_heisenberg_line_p2():
    heis = catalog_load("heisenberg")
    bps = np.linspace(0.0, 1.0, 17)
    rng = np.random.default_rng(1)
    u0 = ControlSignal(bps, np.tile([1.0, 0.0], (16, 1)) + 0.05 * rng.standard_normal((16, 2)))
    rec = solve_critical(heis, [0, 0, 0], [1.0, 0, 0], u_init=u0)
    assert rec.converged
    assert rec.energy == pytest.approx(1.0, abs=1e-3)
    assert rec.endpoint_residual <= 1e-8
    assert rec.stationarity_residual <= 1e-6 * rec.stationarity_scale
    assert rec.lam[0] == pytest.approx(2.0, abs=1e-6)
    assert abs(rec.lam[1]) <= 1e-6 and abs(rec.lam[2]) <= 1e-5


def test_ladder_matches_frozen_table():
    table = json.loads(ORACLE_PATH.read_text())
    heis = catalog_load("heisenberg")
    for k, row in enumerate(table["records"][:3], start=1):
        rec = solve_critical(heis, [0, 0, 0], [0, 0, 0.5], u_init=circle_control(k))
        assert rec.converged
        assert abs(rec.energy - row["energy"]) / row["energy"] < 0.01
        assert rec.speed_variation <= 1e-3


def test_lagrange_residual_perturbation_scales_linearly():
    heis = catalog_load("heisenberg")
    rec = solve_critical(
        heis, [0, 0, 0], [1.0, 0, 0], u_init=ControlSignal(np.linspace(0, 1, 17), np.tile([1.0, 0.0], (16, 1)))
    )
    base = lagrange_residual(heis, [0, 0, 0], [1, 0, 0], rec.control, rec.lam, 2.0)
    rng = np.random.default_rng(5)
    V = rng.standard_normal(rec.control.values.shape)
    V /= np.linalg.norm(V)
    res = []
    for delta in (1e-3, 2e-3):
        u_pert = ControlSignal(rec.control.breakpoints, rec.control.values + delta * V)
        res.append(lagrange_residual(heis, [0, 0, 0], [1, 0, 0], u_pert, rec.lam, 2.0))
    assert res[0] > 50 * max(base, 1e-12)
    assert 1.5 < res[1] / res[0] < 2.5


def test_coincidence_p2_and_p3():
    heis = catalog_load("heisenberg")
    bps = np.linspace(0.0, 1.0, 17)
    for p in (2.0, 3.0):
        u0 = ControlSignal(bps, np.tile([1.0, 0.0], (16, 1)))
        rec = solve_critical(heis, [0, 0, 0], [1.0, 0, 0], p=p, u_init=u0)
        assert rec.converged
        rep = coincidence_check(rec, heis, [0, 0, 0], [1.0, 0, 0])
        assert rep.passed
        assert rep.mean_speed == pytest.approx(1.0, abs=1e-6)
        assert not rep.indeterminate


def test_coincidence_on_curved_record():
    heis = catalog_load("heisenberg")
    rec = solve_critical(heis, [0, 0, 0], [0, 0, 0.5], p=2.0, u_init=circle_control(1, m=32))
    rep = coincidence_check(rec, heis, [0, 0, 0], [0, 0, 0.5])
    assert rep.passed
    assert rep.eta == pytest.approx(rec.lam / 2.0)


def test_multistart_deterministic_across_workers(monkeypatch):
    heis = catalog_load("heisenberg")
    kw = dict(p=2.0, n_seeds=6, rng_seed=11, m_seed=16)
    rep1 = multistart(heis, [0, 0, 0], [0, 0, 0.2], workers=1, **kw)
    rep2 = multistart(heis, [0, 0, 0], [0, 0, 0.2], workers=3, **kw)
    assert rep1.to_json() == rep2.to_json()
    assert rep1.to_csv() == rep2.to_csv()
    monkeypatch.setenv("HORIZON_WORKERS", "2")
    rep3 = multistart(heis, [0, 0, 0], [0, 0, 0.2], **kw)
    assert rep3.to_json() == rep1.to_json()


def test_resolve_workers_env(monkeypatch):
    monkeypatch.delenv("HORIZON_WORKERS", raising=False)
    assert resolve_workers(None) == 1
    assert resolve_workers(5) == 5
    monkeypatch.setenv("HORIZON_WORKERS", "7")
    assert resolve_workers(None) == 7
    monkeypatch.setenv("HORIZON_WORKERS", "zebra")
    with pytest.raises(ConfigError):
        resolve_workers(None)


def test_failed_seeds_logged_not_fatal():
    heis = catalog_load("heisenberg")
    opts = GeodesicOptions(max_iter=1, feas_iter=1, raise_on_failure=False)
    rep = multistart(heis, [0, 0, 0], [0, 0, 0.4], n_seeds=4, rng_seed=2, m_seed=8, opts=opts)
    assert rep.seeds_tried == 4
    assert len(rep.records) + len(rep.failed_seeds) == 4
    assert rep.failed_seeds  # the budget above is too small to converge
    for f in rep.failed_seeds:
        assert set(f) == {"seed_index", "reason"}


def test_solver_raises_on_exhausted_budget():
    heis = catalog_load("heisenberg")
    u0 = circle_control(1, m=16)
    with pytest.raises(ConvergenceError):
        solve_critical(
            heis, [0, 0, 0], [0, 0, 0.5], u_init=u0,
            opts=GeodesicOptions(max_iter=0, feas_iter=1),
        )


def test_options_validation():
    with pytest.raises(ConfigError):
        GeodesicOptions(p=1.0)
    with pytest.raises(ConfigError):
        GeodesicOptions(mode="taxicab")
    with pytest.raises(ConfigError):
        solve_critical(catalog_load("heisenberg"), [0, 0, 0], [1, 0, 0], u_init=None)


def test_seed_generation_deterministic_and_scaled():
    a = generate_seeds(9, 5, 16, 2, 0.5)
    b = generate_seeds(9, 5, 16, 2, 0.5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(s.shape == (16, 2) for s in a)
    amps = [np.sqrt(np.mean(s**2)) for s in a]
    assert min(amps) >= 0.2 and max(amps) <= 12.0


def test_report_serialization_shape():
    sys2 = translation_system(2)
    rep = multistart(sys2, [0, 0], [0.5, 0.5], n_seeds=3, rng_seed=1, m_seed=8)
    obj = json.loads(rep.to_json())
    assert obj["dedup_clusters"] == len(obj["records"])
    assert obj["seeds_tried"] == 3
    for row in obj["records"]:
        assert set(row) >= {
            "energy", "endpoint_residual", "stationarity_residual",
            "control", "lambda", "cluster_id", "converged",
        }
    lines = rep.to_csv().strip().split("\n")
    assert lines[0] == "seed,energy,endpoint_residual,stationarity_residual,speed_variation,cluster_id"
    assert len(lines) == 1 + len(obj["records"])


def test_discretization_refinement_approaches_continuum():
    heis = catalog_load("heisenberg")
    target = 2.0 * np.pi
    errs = []
    for m in (32, 64, 128):
        rec = solve_critical(heis, [0, 0, 0], [0, 0, 0.5], u_init=circle_control(1, m=m))
        errs.append(abs(rec.energy - target) / target)
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 5e-4
