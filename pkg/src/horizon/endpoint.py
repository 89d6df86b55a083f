"""Trajectory integration and the first-order endpoint differential.

Everything runs on a fixed-step RK4 grid: each signal segment is cut into
`substeps` equal steps, and the same nodes carry the state, the fundamental
matrix of the variational equation, and the quadrature that assembles the
differential.  No adaptive stepping, so the three stay exactly consistent.
Second-order terms are never assembled here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainEscapeError, SingularFiberError
from .signals import ControlSignal
from .systems import ControlSystem

__all__ = [
    "Trajectory",
    "EndpointDifferential",
    "RegularityReport",
    "integrate",
    "endpoint",
    "differential",
    "adjoint_frame",
    "regular_value_test",
    "fiber_project",
]

DEFAULT_SUBSTEPS = 64
DEFAULT_BLOWUP = 1e6


@dataclass
class Trajectory:
    """States on the full substep grid, plus the generating data."""

    times: np.ndarray  # (K+1,)
    states: np.ndarray  # (K+1, n)
    signal: ControlSignal
    substeps: int
    fundamental: np.ndarray | None = None  # (K+1, n, n) when requested

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    def to_csv(self) -> str:
        header = "t," + ",".join(f"x_{i+1}" for i in range(self.n))
        lines = [header]
        for t, x in zip(self.times, self.states):
            lines.append(",".join([repr(float(t))] + [repr(float(v)) for v in x]))
        return "\n".join(lines) + "\n"


def _check_state(x, bound, t):
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > bound:
        raise DomainEscapeError(
            f"trajectory left |x|_inf <= {bound:g} at t={t:.6g}", t=t, state=np.array(x)
        )


def integrate(
    system: ControlSystem,
    x0,
    signal: ControlSignal,
    substeps: int = DEFAULT_SUBSTEPS,
    blowup_bound: float = DEFAULT_BLOWUP,
    with_fundamental: bool = False,
) -> Trajectory:
    """RK4 integration of dx/dt = drift(x) + sum u_i X_i(x) along a signal.

    With with_fundamental=True the matrix solution of M' = A(t) M, M(0) = I
    is propagated jointly on the same stages (A is the state Jacobian of the
    right-hand side along the trajectory).
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.n,):
        raise ConfigError(f"x0 must have shape ({system.n},)")
    if signal.segments > 0 and signal.d != system.d:
        raise ConfigError(f"signal has d={signal.d}, system expects {system.d}")
    if substeps < 1:
        raise ConfigError("substeps must be >= 1")

    m = signal.segments
    K = m * substeps
    n = system.n
    times = np.empty(K + 1)
    states = np.empty((K + 1, n))
    times[0] = 0.0
    states[0] = x0
    _check_state(x0, blowup_bound, 0.0)
    fund = None
    M = None
    if with_fundamental:
        fund = np.empty((K + 1, n, n))
        M = np.eye(n)
        fund[0] = M

    x = x0.copy()
    node = 0
    for k in range(m):
        u = signal.values[k]
        t0 = signal.breakpoints[k]
        h = (signal.breakpoints[k + 1] - t0) / substeps
        for j in range(substeps):
            if with_fundamental:
                x, M = _rk4_step_fund(system, x, u, h, M)
            else:
                x = _rk4_step(system, x, u, h)
            node += 1
            times[node] = t0 + (j + 1) * h
            states[node] = x
            if fund is not None:
                fund[node] = M
            _check_state(x, blowup_bound, times[node])
    times[-1] = signal.total_time  # exact final time
    return Trajectory(times=times, states=states, signal=signal, substeps=substeps, fundamental=fund)


def _rk4_step(system, x, u, h):
    k1 = system.dynamics(x, u)
    k2 = system.dynamics(x + 0.5 * h * k1, u)
    k3 = system.dynamics(x + 0.5 * h * k2, u)
    k4 = system.dynamics(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_step_fund(system, x, u, h, M):
    # joint step for (x, M); A is evaluated at the same stage states as f
    k1 = system.dynamics(x, u)
    K1 = system.dynamics_jacobian(x, u) @ M

    x2 = x + 0.5 * h * k1
    k2 = system.dynamics(x2, u)
    K2 = system.dynamics_jacobian(x2, u) @ (M + 0.5 * h * K1)

    x3 = x + 0.5 * h * k2
    k3 = system.dynamics(x3, u)
    K3 = system.dynamics_jacobian(x3, u) @ (M + 0.5 * h * K2)

    x4 = x + h * k3
    k4 = system.dynamics(x4, u)
    K4 = system.dynamics_jacobian(x4, u) @ (M + h * K3)

    x_new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    M_new = M + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
    return x_new, M_new


def endpoint(system, x0, signal, substeps=DEFAULT_SUBSTEPS, blowup_bound=DEFAULT_BLOWUP):
    """Final state of the controlled trajectory."""
    if signal.segments == 0:
        x0 = np.asarray(x0, dtype=float)
        _check_state(x0, blowup_bound, 0.0)
        return x0.copy()
    return integrate(system, x0, signal, substeps, blowup_bound).endpoint


def _segment_quadrature_weights(substeps: int) -> np.ndarray:
    """Composite Simpson weights on substeps+1 nodes (trapezoid fallback)."""
    if substeps >= 2 and substeps % 2 == 0:
        w = np.ones(substeps + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        return w / 3.0
    w = np.ones(substeps + 1)
    w[0] = w[-1] = 0.5
    return w


@dataclass
class EndpointDifferential:
    """First-order differential of the endpoint map over the segment basis.

    matrix has shape (n, m*d), column k*d + i holding the response to the
    indicator of segment k, component i.  w_bar (m, n, d) holds the dual rows
    projected onto the segment basis: w_bar[k, j] is the mean over segment k
    of row j of N(s) B(s).
    """

    system: ControlSystem
    x0: np.ndarray
    signal: ControlSignal
    substeps: int
    trajectory: Trajectory
    matrix: np.ndarray
    w_bar: np.ndarray
    grid_rows: np.ndarray  # (K+1, n, d) samples of N(s) B(s)

    @property
    def endpoint(self) -> np.ndarray:
        return self.trajectory.endpoint

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def apply(self, v) -> np.ndarray:
        """Differential applied to a segment-basis direction.

        v is an (m, d) array or a ControlSignal sharing the breakpoints.
        """
        if isinstance(v, ControlSignal):
            if not np.array_equal(v.breakpoints, self.signal.breakpoints):
                raise ConfigError("direction must share the signal's breakpoints")
            v = v.values
        v = np.asarray(v, dtype=float)
        return self.matrix @ v.ravel()

    def dual_signal(self, lam) -> ControlSignal:
        """Covector pullback sum_j lam_j w_j as a segment-basis dual signal."""
        lam = np.asarray(lam, dtype=float)
        vals = np.einsum("j,kjd->kd", lam, self.w_bar)
        return ControlSignal(self.signal.breakpoints, vals)

    def singular_values(self) -> np.ndarray:
        """Singular values of the differential as an operator on L^2."""
        h = self.signal.durations
        scale = np.repeat(1.0 / np.sqrt(h), self.signal.d)
        return np.linalg.svd(self.matrix * scale[None, :], compute_uv=False)


def differential(
    system: ControlSystem,
    x0,
    signal: ControlSignal,
    substeps: int = DEFAULT_SUBSTEPS,
    blowup_bound: float = DEFAULT_BLOWUP,
) -> EndpointDifferential:
    """Assemble the endpoint differential by variational equation + quadrature.

    Columns are integrals of N(s) B(s) over each segment, N(s) = M(T) M(s)^-1
    from the jointly integrated fundamental matrix and B(s) the controlled
    fields along the trajectory, with per-segment composite Simpson on the
    shared RK4 nodes.
    """
    if signal.segments == 0:
        raise ConfigError("differential needs a signal with at least one segment")
    traj = integrate(
        system, x0, signal, substeps=substeps, blowup_bound=blowup_bound, with_fundamental=True
    )
    m, d, n = signal.segments, signal.d, system.n
    S = substeps

    M_inv = np.linalg.inv(traj.fundamental)  # (K+1, n, n)
    N = traj.fundamental[-1] @ M_inv  # (K+1, n, n) via broadcasting
    B = system.field_values_batch(traj.states)[:, 1:, :]  # (K+1, d, n)
    W = np.einsum("tij,tdj->tid", N, B)  # (K+1, n, d): N(s) B(s)

    idx = np.arange(m)[:, None] * S + np.arange(S + 1)[None, :]  # (m, S+1)
    Wseg = W[idx]  # (m, S+1, n, d)
    base = _segment_quadrature_weights(S)
    steps = signal.durations / S  # (m,)
    cols = np.einsum("s,ksnd->knd", base, Wseg) * steps[:, None, None]  # (m, n, d)

    matrix = np.transpose(cols, (1, 0, 2)).reshape(n, m * d)
    w_bar = cols / signal.durations[:, None, None]  # (m, n, d)

    return EndpointDifferential(
        system=system,
        x0=np.asarray(x0, dtype=float),
        signal=signal,
        substeps=substeps,
        trajectory=traj,
        matrix=matrix,
        w_bar=w_bar,
        grid_rows=W,
    )


def adjoint_frame(
    system: ControlSystem,
    x0,
    signal: ControlSignal,
    substeps: int = DEFAULT_SUBSTEPS,
) -> np.ndarray:
    """N(s) on the grid by backward RK4 of N' = -N A, N(T) = I.

    Independent route for cross-checking differential(); the state is
    re-integrated backward jointly from the forward endpoint.
    """
    traj = integrate(system, x0, signal, substeps=substeps)
    n = system.n
    K = len(traj.times) - 1
    out = np.empty((K + 1, n, n))
    out[K] = np.eye(n)
    x = traj.states[-1].copy()
    N = np.eye(n)
    node = K
    for k in range(signal.segments - 1, -1, -1):
        u = signal.values[k]
        h = (signal.breakpoints[k + 1] - signal.breakpoints[k]) / substeps
        for _ in range(substeps):
            x, N = _rk4_step_adjoint(system, x, u, -h, N)
            node -= 1
            out[node] = N
    return out


def _rk4_step_adjoint(system, x, u, h, N):
    k1 = system.dynamics(x, u)
    K1 = -N @ system.dynamics_jacobian(x, u)
    x2 = x + 0.5 * h * k1
    k2 = system.dynamics(x2, u)
    K2 = -(N + 0.5 * h * K1) @ system.dynamics_jacobian(x2, u)
    x3 = x + 0.5 * h * k2
    k3 = system.dynamics(x3, u)
    K3 = -(N + 0.5 * h * K2) @ system.dynamics_jacobian(x3, u)
    x4 = x + h * k3
    k4 = system.dynamics(x4, u)
    K4 = -(N + h * K3) @ system.dynamics_jacobian(x4, u)
    return (
        x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4),
        N + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4),
    )


@dataclass
class RegularityReport:
    regular: bool
    rank: int
    sigma_min: float
    sigma_max: float
    tol: float


def regular_value_test(diff: EndpointDifferential, tol: float = 1e-8) -> RegularityReport:
    """Full-rank test of the differential in the L^2 operator geometry."""
    svals = diff.singular_values()
    smax = float(svals[0]) if len(svals) else 0.0
    smin = float(svals[-1]) if len(svals) else 0.0
    rank = int(np.sum(svals > tol * smax)) if smax > 0 else 0
    return RegularityReport(
        regular=(rank == diff.n and smin > tol * smax),
        rank=rank,
        sigma_min=smin,
        sigma_max=smax,
        tol=tol,
    )


def fiber_project(
    diff: EndpointDifferential, h_signal: ControlSignal, rank_tol: float = 1e-8
) -> ControlSignal:
    """L^2-orthogonal projection onto the kernel of the differential.

    The input must share the signal's breakpoints; the projection removes the
    span of the dual rows w_j, so the result is tangent to the fiber through
    the base control.
    """
    if not np.array_equal(h_signal.breakpoints, diff.signal.breakpoints):
        raise ConfigError("signal to project must share breakpoints with the base control")
    hdur = diff.signal.durations
    n = diff.n
    V = diff.w_bar  # (m, n, d)
    G = np.einsum("k,kid,kjd->ij", hdur, V, V)  # Gram of the rows in L^2
    svals = np.linalg.svd(G, compute_uv=False)
    if svals[-1] <= rank_tol**2 * max(svals[0], 1e-300):
        raise SingularFiberError(
            "differential rows are numerically dependent; fiber tangent undefined"
        )
    rhs = np.einsum("k,kid,kd->i", hdur, V, h_signal.values)
    a = np.linalg.solve(G, rhs)
    proj_vals = h_signal.values - np.einsum("j,kjd->kd", a, V)
    return ControlSignal(diff.signal.breakpoints, proj_vals)
