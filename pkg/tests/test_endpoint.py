import numpy as np
import pytest

from horizon import (
    ControlSignal,
    DomainEscapeError,
    SingularFiberError,
    SymbolicField,
    ControlSystem,
    adjoint_frame,
    catalog_load,
    constant_signal,
    differential,
    endpoint,
    fiber_project,
    integrate,
    regular_value_test,
    state_symbols,
    zero_signal,
)
import sympy as sp


def random_signal(rng, d, m=6):
    cuts = np.sort(rng.uniform(0.1, 0.9, size=m - 1))
    bps = np.concatenate([[0.0], cuts, [1.0]])
    return ControlSignal(bps, rng.normal(size=(m, d)))


def test_heisenberg_line():
    heis = catalog_load("heisenberg")
    u = constant_signal(np.array([1.0, 0.0]), 1.0)
    y = endpoint(heis, np.zeros(3), u)
    assert np.allclose(y, [1.0, 0.0, 0.0], atol=1e-13)


def test_heisenberg_square_loop():
    # unit square in (x, y) picks up exactly the enclosed area in z
    heis = catalog_load("heisenberg")
    bps = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    vals = 4.0 * np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], dtype=float)
    y = endpoint(heis, np.zeros(3), ControlSignal(bps, vals), substeps=32)
    assert np.allclose(y, [0.0, 0.0, 1.0], atol=1e-12)


def test_agrachev_drift_endpoint():
    al = catalog_load("agrachev_lee(3)")
    u = constant_signal(np.array([1.0, 0.0]), 1.0)
    y = endpoint(al, np.zeros(2), u)
    # x2' = x1^2 = t^2, exactly integrated by RK4
    assert np.allclose(y, [1.0, 1.0 / 3.0], atol=1e-14)


def test_zero_length_signal_returns_start():
    heis = catalog_load("heisenberg")
    x0 = np.array([0.3, -0.2, 0.5])
    assert np.allclose(endpoint(heis, x0, zero_signal(2)), x0)


def test_rk4_step_halving():
    uni = catalog_load("unicycle")
    rng = np.random.default_rng(0)
    u = random_signal(rng, 2)
    ref = endpoint(uni, np.zeros(3), u, substeps=512)
    errs = [np.linalg.norm(endpoint(uni, np.zeros(3), u, substeps=s) - ref) for s in (4, 8, 16)]
    assert errs[0] / errs[1] > 8.0
    assert errs[1] / errs[2] > 8.0


def test_trajectory_csv():
    heis = catalog_load("heisenberg")
    traj = integrate(heis, np.zeros(3), constant_signal(np.array([1.0, 0.0]), 1.0), substeps=2)
    lines = traj.to_csv().strip().splitlines()
    assert lines[0] == "t,x_1,x_2,x_3"
    assert len(lines) == 4  # node rows


def test_differential_matches_fd():
    rng = np.random.default_rng(1)
    for name, n in [("heisenberg", 3), ("martinet", 3), ("unicycle", 3), ("agrachev_lee(3)", 2)]:
        system = catalog_load(name)
        for _ in range(3):
            u = random_signal(rng, system.d, m=5)
            x0 = np.zeros(n)
            diff = differential(system, x0, u, substeps=16)
            for _ in range(4):
                v = ControlSignal(u.breakpoints, rng.normal(size=u.values.shape))
                eps = 1e-6
                up = ControlSignal(u.breakpoints, u.values + eps * v.values)
                um = ControlSignal(u.breakpoints, u.values - eps * v.values)
                fd = (endpoint(system, x0, up, substeps=16) - endpoint(system, x0, um, substeps=16)) / (2 * eps)
                dv = diff.apply(v)
                assert np.linalg.norm(dv - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd))


def test_remainder_is_second_order():
    heis = catalog_load("heisenberg")
    rng = np.random.default_rng(2)
    u = random_signal(rng, 2)
    v = ControlSignal(u.breakpoints, rng.normal(size=u.values.shape))
    diff = differential(heis, np.zeros(3), u, substeps=32)
    F0 = endpoint(heis, np.zeros(3), u, substeps=32)
    dv = diff.apply(v)
    eps = np.logspace(-5, -2, 7)
    rem = []
    for e in eps:
        ue = ControlSignal(u.breakpoints, u.values + e * v.values)
        rem.append(np.linalg.norm(endpoint(heis, np.zeros(3), ue, substeps=32) - F0 - e * dv))
    slope = np.polyfit(np.log(eps), np.log(rem), 1)[0]
    assert slope >= 1.9


def test_adjoint_frame_consistency():
    # backward adjoint integration must reproduce the forward N(s) B(s) rows
    heis = catalog_load("heisenberg")
    rng = np.random.default_rng(3)
    u = random_signal(rng, 2, m=4)
    diff = differential(heis, np.zeros(3), u, substeps=128)
    N = adjoint_frame(heis, np.zeros(3), u, substeps=128)
    B = heis.field_values_batch(diff.trajectory.states)[:, 1:, :]
    W_back = np.einsum("tij,tdj->tid", N, B)
    assert np.max(np.abs(W_back - diff.grid_rows)) <= 1e-8


def test_semigroup_identity():
    # F(x, C(u,v,T)) == F(F(x,u), v) for the rescaled concatenation
    from horizon import concatenate_rescaled

    heis = catalog_load("heisenberg")
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        u = random_signal(rng, 2, m=4)
        T = rng.uniform(0.2, 3.0)
        cuts = np.sort(rng.uniform(0.1 * T, 0.9 * T, size=3))
        v = ControlSignal(np.concatenate([[0.0], cuts, [T]]), rng.normal(size=(4, 2)))
        w = concatenate_rescaled(u, v, T)
        lhs = endpoint(heis, np.zeros(3), w, substeps=64)
        mid = endpoint(heis, np.zeros(3), u, substeps=64)
        rhs = endpoint(heis, mid, v, substeps=64)
        worst = max(worst, np.linalg.norm(lhs - rhs))
    assert worst <= 1e-8


def test_regular_value_and_singular_control():
    heis = catalog_load("heisenberg")
    rng = np.random.default_rng(5)
    u = random_signal(rng, 2)
    rep = regular_value_test(differential(heis, np.zeros(3), u, substeps=16))
    assert rep.regular and rep.rank == 3

    u0 = constant_signal(np.array([0.0, 0.0]), 1.0)
    rep0 = regular_value_test(differential(heis, np.zeros(3), u0, substeps=16))
    assert not rep0.regular and rep0.rank == 2


def test_fiber_project():
    heis = catalog_load("heisenberg")
    rng = np.random.default_rng(6)
    u = random_signal(rng, 2)
    diff = differential(heis, np.zeros(3), u, substeps=32)
    h = ControlSignal(u.breakpoints, rng.normal(size=u.values.shape))
    vert = fiber_project(diff, h)
    assert np.linalg.norm(diff.apply(vert)) <= 1e-9 * max(1.0, np.linalg.norm(diff.apply(h)))
    # a purely horizontal direction projects to ~0
    lam = rng.normal(size=3)
    horiz = diff.dual_signal(lam)
    assert np.linalg.norm(fiber_project(diff, horiz).values) <= 1e-8 * np.linalg.norm(horiz.values)


def test_fiber_project_singular():
    heis = catalog_load("heisenberg")
    u0 = constant_signal(np.array([0.0, 0.0]), 1.0)
    diff = differential(heis, np.zeros(3), u0, substeps=16)
    with pytest.raises(SingularFiberError):
        fiber_project(diff, constant_signal(np.array([1.0, 1.0]), 1.0))


def test_domain_escape():
    x0s = state_symbols(1)
    f = SymbolicField([x0s[0] ** 2], coords=x0s)
    blow = ControlSystem("blowup", [f])
    with pytest.raises(DomainEscapeError) as exc:
        endpoint(blow, np.array([2.0]), constant_signal(np.array([1.0]), 1.0), substeps=256)
    assert exc.value.t is not None and exc.value.t < 1.0
