"""Critical points of the p-energy on endpoint fibers.

The solver works on the segment basis of a fixed signal grid.  A run has
three stages: (a) feasibilization, damped minimal-norm Newton steps toward
the fiber (these move perpendicular to the fiber, so the seed's homotopy
content survives); (b) a multiplier estimate by weighted least squares
against the dual rows; (c) a Lagrange-Newton phase on the full first-order
system, solved matrix-free by preconditioned GMRES with the exact
no-curvature KKT block as preconditioner and a line search on the residual
norm.  Stage (c) converges to critical points of any index, which matters
because on compact-fiber problems most of the ladder consists of saddles;
pure descent would collapse every seed onto the lowest cluster.

Projected-gradient descent steps (the classical alternating scheme) are
available through opts.descent_steps for minimization runs; they are off by
default precisely to preserve saddle basins.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .endpoint import differential, endpoint as _endpoint, fiber_project
from .errors import ConfigError, ConvergenceError, DomainEscapeError, HorizonError
from .signals import ControlSignal, dual_map
from .systems import ControlSystem, displacement

__all__ = [
    "GeodesicOptions",
    "GeodesicRecord",
    "MultistartReport",
    "CoincidenceReport",
    "lagrange_residual",
    "solve_critical",
    "multistart",
    "coincidence_check",
]


@dataclass
class GeodesicOptions:
    p: float = 2.0
    mode: str = "vector"  # energy aggregation: "vector" or "component"
    substeps: int = 2
    end_tol: float = 1e-8
    stat_tol: float = 1e-6  # relative to max(1, ||energy gradient||_q)
    max_iter: int = 40
    feas_iter: int = 30
    descent_steps: int = 0
    gmres_iter: int = 25
    ridge: float = 1e-10
    blowup_bound: float = 1e6
    raise_on_failure: bool = True

    def __post_init__(self):
        if not self.p > 1.0:
            raise ConfigError(f"p must exceed 1, got {self.p}")
        if self.mode not in ("vector", "component"):
            raise ConfigError(f"unknown energy mode {self.mode!r}")

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)


@dataclass
class GeodesicRecord:
    control: ControlSignal
    lam: np.ndarray
    p: float
    mode: str
    energy: float
    stationarity_residual: float
    stationarity_scale: float
    endpoint_residual: float
    speed_profile: np.ndarray
    iterations: int
    converged: bool
    seed_index: int | None = None
    rank_warning: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def speed_variation(self) -> float:
        """Max relative deviation of |u(t)| from its time average."""
        sp = self.speed_profile
        h = self.control.durations
        mean = float(np.sum(sp * h) / np.sum(h))
        if mean == 0.0:
            return 0.0
        return float(np.max(np.abs(sp - mean)) / mean)

    def to_dict(self) -> dict:
        return {
            "seed_index": self.seed_index,
            "energy": self.energy,
            "endpoint_residual": self.endpoint_residual,
            "stationarity_residual": self.stationarity_residual,
            "stationarity_scale": self.stationarity_scale,
            "speed_variation": self.speed_variation,
            "iterations": self.iterations,
            "converged": self.converged,
            "rank_warning": self.rank_warning,
            "lambda": self.lam.tolist(),
            "control": {
                "breakpoints": self.control.breakpoints.tolist(),
                "values": self.control.values.tolist(),
            },
        }


# -- densities of the energy and its derivatives ------------------------------


def _grad_density(U, p, mode):
    if mode == "component":
        return p * U * _abs_pow(U, p - 2.0)
    speeds = np.linalg.norm(U, axis=1)
    return p * _abs_pow(speeds, p - 2.0)[:, None] * U


def _abs_pow(a, e):
    out = np.zeros_like(a, dtype=float)
    nz = a != 0.0
    out[nz] = np.abs(a[nz]) ** e
    return out


def _hess_density_matvec(U, V, p, mode):
    """Action of the second derivative of the energy density on V (rows)."""
    if mode == "component":
        return p * (p - 1.0) * _abs_pow(U, p - 2.0) * V
    speeds = np.linalg.norm(U, axis=1)
    s2 = _abs_pow(speeds, p - 2.0)
    s4 = _abs_pow(speeds, p - 4.0)
    dots = np.sum(U * V, axis=1)
    return p * s2[:, None] * V + p * (p - 2.0) * (s4 * dots)[:, None] * U


def _hess_density_diag(U, p, mode):
    if mode == "component":
        return p * (p - 1.0) * _abs_pow(U, p - 2.0)
    speeds = np.linalg.norm(U, axis=1)
    s2 = _abs_pow(speeds, p - 2.0)
    s4 = _abs_pow(speeds, p - 4.0)
    return p * s2[:, None] + p * (p - 2.0) * s4[:, None] * U * U


def _energy_value(U, h, p, mode):
    if mode == "component":
        return float(np.sum(h[:, None] * np.abs(U) ** p))
    return float(np.sum(h * np.linalg.norm(U, axis=1) ** p))


def _lq_density_norm(dens, h, q):
    return float(np.sum(h[:, None] * np.abs(dens) ** q) ** (1.0 / q))


# -- stationarity -------------------------------------------------------------


def lagrange_residual(system, x, y, u: ControlSignal, lam, p, mode="vector", substeps=2):
    """L^q distance between the pulled-back covector and the energy gradient.

    Assembles lambda o d_uF as the dual signal sum_j lambda_j w_j and measures
    its L^q distance to the p-energy gradient density.
    """
    lam = np.asarray(lam, dtype=float)
    if u.segments == 0:
        return 0.0 if np.allclose(lam, 0.0) else float("inf")
    diff = differential(system, x, u, substeps=substeps)
    dens = np.einsum("j,kjd->kd", lam, diff.w_bar) - _grad_density(u.values, p, mode)
    q = p / (p - 1.0)
    return _lq_density_norm(dens, u.durations, q)


# -- the solver ---------------------------------------------------------------


class _Workspace:
    """Cached assembly of F, dF and derived quantities at the current U."""

    def __init__(self, system, x0, bps, substeps, blowup):
        self.system = system
        self.x0 = x0
        self.bps = bps
        self.substeps = substeps
        self.blowup = blowup
        self.h = np.diff(bps)
        self._cache_U = None

    def assemble(self, U):
        if self._cache_U is not None and np.array_equal(U, self._cache_U):
            return self._F, self._A, self._wbar
        sig = ControlSignal(self.bps, U)
        diff = differential(
            self.system, self.x0, sig, substeps=self.substeps, blowup_bound=self.blowup
        )
        self._cache_U = U.copy()
        self._F = diff.endpoint
        self._A = diff.matrix
        self._wbar = diff.w_bar
        return self._F, self._A, self._wbar

    def endpoint_only(self, U):
        sig = ControlSignal(self.bps, U)
        return _endpoint(
            self.system, self.x0, sig, substeps=self.substeps, blowup_bound=self.blowup
        )

    def pullback(self, U, lam):
        """A(U)^T lam, used by the finite-difference curvature."""
        _, A, _ = self.assemble(U)
        return A.T @ lam


def _feasibilize(ws, U, y, opts, log):
    """Damped minimal-L^2-norm Newton onto the fiber."""
    h_dof = np.repeat(ws.h, U.shape[1])
    best_r = None
    for _ in range(opts.feas_iter):
        F, A, _ = ws.assemble(U)
        r = displacement(ws.system, F, y)
        rn = np.linalg.norm(r)
        log.append(rn)
        if rn <= 0.5 * opts.end_tol:
            return U, True
        Aw = A / h_dof[None, :]
        G = A @ Aw.T
        G = G + opts.ridge * np.trace(G) / G.shape[0] * np.eye(G.shape[0])
        try:
            a = np.linalg.solve(G, r)
        except np.linalg.LinAlgError:
            return U, False
        v = (Aw.T @ a).reshape(U.shape)
        alpha, accepted = 1.0, False
        for _ in range(10):
            cand = U + alpha * v
            try:
                rc = np.linalg.norm(displacement(ws.system, ws.endpoint_only(cand), y))
            except DomainEscapeError:
                alpha *= 0.5
                continue
            if rc < (1.0 - 1e-4 * alpha) * rn:
                U, accepted = cand, True
                break
            alpha *= 0.5
        if not accepted:
            return U, best_r is not None and best_r <= opts.end_tol
        best_r = rn
    F, _, _ = ws.assemble(U)
    return U, np.linalg.norm(displacement(ws.system, F, y)) <= 0.5 * opts.end_tol * 10


def _lambda_least_squares(ws, U, opts):
    """Weighted LS fit of the multiplier to the gradient density."""
    _, _, wbar = ws.assemble(U)
    g = _grad_density(U, opts.p, opts.mode)
    G = np.einsum("k,kjd,kld->jl", ws.h, wbar, wbar)
    rhs = np.einsum("k,kjd,kd->j", ws.h, wbar, g)
    n = G.shape[0]
    ridge = opts.ridge * (np.trace(G) / n + 1.0)
    lam = np.linalg.solve(G + ridge * np.eye(n), rhs)
    svals = np.linalg.svd(G, compute_uv=False)
    rank_warning = bool(svals[-1] <= 1e-10 * svals[0])
    return lam, rank_warning


def _descent_step(ws, U, opts):
    """One projected-gradient step mapped back through the dual map.

    Kept merit-monotone in J_p + penalty * |F - y|; used only when
    opts.descent_steps > 0 (minimization refinement), since descent drains
    saddle basins.
    """
    sig = ControlSignal(ws.bps, U)
    diff = differential(ws.system, ws.x0, sig, substeps=ws.substeps, blowup_bound=ws.blowup)
    g_sig = ControlSignal(ws.bps, _grad_density(U, opts.p, opts.mode))
    vert = fiber_project(diff, g_sig)
    direction = dual_map(ControlSignal(ws.bps, vert.values), opts.p).values
    J0 = _energy_value(U, ws.h, opts.p, opts.mode)
    pen = 10.0 * max(1.0, J0)
    r0 = np.linalg.norm(displacement(ws.system, diff.endpoint, ws._y_target))
    merit0 = J0 + pen * r0
    alpha = 1.0
    for _ in range(12):
        cand = U - alpha * direction
        try:
            rc = np.linalg.norm(
                displacement(ws.system, ws.endpoint_only(cand), ws._y_target)
            )
        except DomainEscapeError:
            alpha *= 0.5
            continue
        merit = _energy_value(cand, ws.h, opts.p, opts.mode) + pen * rc
        if merit <= merit0 - 1e-4 * alpha * np.sum(ws.h[:, None] * direction * direction):
            return cand
        alpha *= 0.5
    return U


def _kkt_residual(ws, U, lam, y, opts):
    F, A, wbar = ws.assemble(U)
    g = _grad_density(U, opts.p, opts.mode)
    dens = g - np.einsum("j,kjd->kd", lam, wbar)
    r2 = -displacement(ws.system, F, y)  # F - y in wrapped coordinates
    stat_q = _lq_density_norm(dens, ws.h, opts.q)
    scale = max(1.0, _lq_density_norm(g, ws.h, opts.q))
    R1 = (ws.h[:, None] * dens).ravel()
    return R1, r2, stat_q, scale


def _solve_kkt_newton(ws, U, lam, y, opts, log):
    md = U.size
    n = len(lam)
    h_dof = np.repeat(ws.h, U.shape[1])
    eps_mach = np.finfo(float).eps

    iterations = 0
    R1, r2, stat_q, scale = _kkt_residual(ws, U, lam, y, opts)
    phi = 0.5 * (np.dot(R1 / h_dof, R1) + np.dot(r2, r2))
    phi0 = phi
    for it in range(opts.max_iter):
        iterations = it
        log.append((stat_q, np.linalg.norm(r2)))
        if stat_q <= opts.stat_tol * scale and np.linalg.norm(r2) <= opts.end_tol:
            return U, lam, iterations, True

        _, A, _ = ws.assemble(U)
        At_lam = A.T @ lam
        Hdiag = (ws.h[:, None] * _hess_density_diag(U, opts.p, opts.mode)).ravel()
        mu = 1e-8 * (np.mean(np.abs(Hdiag)) + 1.0)
        Hdd = Hdiag + mu
        Aw = A / Hdd[None, :]
        S = Aw @ A.T
        S = S + opts.ridge * (np.trace(S) / n + 1.0) * np.eye(n)

        def precond(z):
            a, b = z[:md], z[md:]
            t = a / Hdd
            try:
                dlam = np.linalg.solve(S, b - A @ t)
            except np.linalg.LinAlgError:
                dlam = np.linalg.lstsq(S, b - A @ t, rcond=None)[0]
            du = (a + A.T @ dlam) / Hdd
            return np.concatenate([du, dlam])

        U_norm = np.linalg.norm(U)

        def matvec(z):
            du, dlam = z[:md], z[md:]
            dU = du.reshape(U.shape)
            row1 = (ws.h[:, None] * _hess_density_matvec(U, dU, opts.p, opts.mode)).ravel()
            dn = np.linalg.norm(du)
            if dn > 0.0:
                eps = np.sqrt(eps_mach) * (1.0 + U_norm) / dn
                curv = (ws.pullback(U + eps * dU, lam) - At_lam) / eps
                row1 = row1 - curv
            row1 = row1 - A.T @ dlam
            row2 = A @ du
            return np.concatenate([row1, row2])

        R = np.concatenate([R1, r2])
        op = LinearOperator((md + n, md + n), matvec=matvec)
        M = LinearOperator((md + n, md + n), matvec=precond)
        rtol = min(0.1, float(np.sqrt(phi / phi0))) if phi0 > 0 else 0.1
        step, _ = gmres(op, -R, rtol=max(rtol, 1e-10), atol=0.0, maxiter=opts.gmres_iter, M=M)

        accepted = False
        alpha = 1.0
        for _ in range(10):
            Uc = U + alpha * step[:md].reshape(U.shape)
            lc = lam + alpha * step[md:]
            try:
                R1c, r2c, stat_c, scale_c = _kkt_residual(ws, Uc, lc, y, opts)
            except DomainEscapeError:
                alpha *= 0.5
                continue
            phic = 0.5 * (np.dot(R1c / h_dof, R1c) + np.dot(r2c, r2c))
            if phic <= (1.0 - 1e-4 * alpha) * phi:
                U, lam = Uc, lc
                R1, r2, stat_q, scale, phi = R1c, r2c, stat_c, scale_c, phic
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # preconditioned gradient-ish fallback: tiny damped step
            fallback = precond(-R)
            Uc = U + 1e-3 * fallback[:md].reshape(U.shape)
            lc = lam + 1e-3 * fallback[md:]
            try:
                R1c, r2c, stat_c, scale_c = _kkt_residual(ws, Uc, lc, y, opts)
                phic = 0.5 * (np.dot(R1c / h_dof, R1c) + np.dot(r2c, r2c))
            except DomainEscapeError:
                break
            if phic < phi:
                U, lam = Uc, lc
                R1, r2, stat_q, scale, phi = R1c, r2c, stat_c, scale_c, phic
            else:
                break
    converged = stat_q <= opts.stat_tol * scale and np.linalg.norm(r2) <= opts.end_tol
    return U, lam, iterations, converged


def solve_critical(
    system: ControlSystem,
    x,
    y,
    p: float | None = None,
    u_init: ControlSignal | None = None,
    opts: GeodesicOptions | None = None,
    seed_index: int | None = None,
) -> GeodesicRecord:
    """Drive u_init to a critical point of J_p on the fiber over y.

    Feasibilization moves minimally (perpendicular to the fiber), an optional
    projected-gradient phase descends, and the Lagrange-Newton phase solves
    the full stationarity system, converging to critical points of any
    Morse index.  Raises ConvergenceError when opts.raise_on_failure and the
    tolerances were not met.
    """
    if opts is None:
        opts = GeodesicOptions() if p is None else GeodesicOptions(p=p)
    elif p is not None and opts.p != p:
        opts = GeodesicOptions(**{**opts.__dict__, "p": p})
    if u_init is None:
        raise ConfigError("solve_critical needs an initial control signal")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)

    ws = _Workspace(system, x, u_init.breakpoints, opts.substeps, opts.blowup_bound)
    ws._y_target = y
    U = u_init.values.copy()
    diagnostics = {"feas_log": [], "kkt_log": []}

    U, feas_ok = _feasibilize(ws, U, y, opts, diagnostics["feas_log"])
    for _ in range(opts.descent_steps):
        U = _descent_step(ws, U, opts)
        U, feas_ok = _feasibilize(ws, U, y, opts, diagnostics["feas_log"])

    lam, rank_warning = _lambda_least_squares(ws, U, opts)
    U, lam, iters, converged = _solve_kkt_newton(ws, U, lam, y, opts, diagnostics["kkt_log"])

    sig = ControlSignal(ws.bps, U)
    F, _, wbar = ws.assemble(U)
    g = _grad_density(U, opts.p, opts.mode)
    dens = g - np.einsum("j,kjd->kd", lam, wbar)
    stat_q = _lq_density_norm(dens, ws.h, opts.q)
    scale = max(1.0, _lq_density_norm(g, ws.h, opts.q))
    end_res = float(np.linalg.norm(displacement(system, F, y)))
    record = GeodesicRecord(
        control=sig,
        lam=lam,
        p=opts.p,
        mode=opts.mode,
        energy=_energy_value(U, ws.h, opts.p, opts.mode),
        stationarity_residual=stat_q,
        stationarity_scale=scale,
        endpoint_residual=end_res,
        speed_profile=np.linalg.norm(U, axis=1),
        iterations=iters,
        converged=bool(converged),
        seed_index=seed_index,
        rank_warning=rank_warning,
        diagnostics=diagnostics,
    )
    if not converged and opts.raise_on_failure:
        raise ConvergenceError(
            f"geodesic solve stalled: stationarity {stat_q:.3e} (scale {scale:.3e}), "
            f"endpoint residual {end_res:.3e}"
        )
    return record


# -- multistart ---------------------------------------------------------------


@dataclass
class MultistartReport:
    system_name: str
    x: np.ndarray
    y: np.ndarray
    p: float
    mode: str
    n_seeds: int
    m_seed: int
    rng_seed: int
    records: list
    seeds_tried: int
    failed_seeds: list
    cluster_ids: list
    energy_clusters: list

    @property
    def dedup_clusters(self) -> int:
        return len(self.records)

    def cluster_energies(self) -> list:
        return [c["energy"] for c in self.energy_clusters]

    def to_json(self) -> str:
        payload = {
            "system": self.system_name,
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "p": self.p,
            "mode": self.mode,
            "n_seeds": self.n_seeds,
            "m_seed": self.m_seed,
            "rng_seed": self.rng_seed,
            "seeds_tried": self.seeds_tried,
            "failed_seeds": self.failed_seeds,
            "dedup_clusters": self.dedup_clusters,
            "energy_clusters": self.energy_clusters,
            "records": [
                {**rec.to_dict(), "cluster_id": cid}
                for rec, cid in zip(self.records, self.cluster_ids)
            ],
        }
        return json.dumps(payload, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["seed,energy,endpoint_residual,stationarity_residual,speed_variation,cluster_id"]
        for rec, cid in zip(self.records, self.cluster_ids):
            lines.append(
                f"{rec.seed_index},{rec.energy!r},{rec.endpoint_residual!r},"
                f"{rec.stationarity_residual!r},{rec.speed_variation!r},{cid}"
            )
        return "\n".join(lines) + "\n"


def resolve_workers(workers=None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("HORIZON_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"HORIZON_WORKERS must be an integer, got {env!r}") from exc
    return 1


def generate_seeds(rng_seed, n_seeds, m_seed, d, scale, bandwidth=5):
    """Random piecewise-constant seed controls, amplitudes over a log range.

    Each seed is one rotating Fourier mode in a random 2-plane of control
    space (random frequency up to `bandwidth`, random phase and orientation)
    plus a constant offset and white noise, rescaled to the drawn amplitude.
    The rotation carries coherent circulation, which white noise lacks, so
    the family reaches critical points of every index; the orientation flip
    is explicit because the QR factor's handedness is deterministic.

    All seeds are drawn from one generator before any solving starts, so
    the set is identical regardless of worker count.
    """
    rng = np.random.default_rng(rng_seed)
    mids = (np.arange(m_seed) + 0.5) / m_seed
    seeds = []
    for _ in range(n_seeds):
        amp = 10.0 ** rng.uniform(np.log10(0.5 * scale), np.log10(20.0 * scale))
        f = int(rng.integers(1, bandwidth + 1))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        c = np.cos(2.0 * np.pi * f * mids + phase)
        s = np.sin(2.0 * np.pi * f * mids + phase)
        if d >= 2:
            Q, _ = np.linalg.qr(rng.standard_normal((d, 2)))
            if rng.random() < 0.5:
                Q = Q[:, ::-1].copy()
            U = np.outer(c, Q[:, 0]) + np.outer(s, Q[:, 1])
        else:
            U = c[:, None]
        U = U + 0.3 * rng.standard_normal(d)[None, :] * np.ones((m_seed, 1))
        U = U + 0.2 * rng.standard_normal((m_seed, d))
        rms = float(np.sqrt(np.mean(U * U)))
        seeds.append(U * (amp / max(rms, 1e-12)))
    return seeds


def multistart(
    system: ControlSystem,
    x,
    y,
    p: float = 2.0,
    n_seeds: int = 32,
    rng_seed: int = 0,
    m_seed: int = 32,
    opts: GeodesicOptions | None = None,
    workers: int | None = None,
    dedup_energy_tol: float = 1e-3,
    dedup_lambda_tol: float = 1e-2,
    seed_scale: float | None = None,
) -> MultistartReport:
    """Run solve_critical from deterministic random seeds and deduplicate.

    Failed seeds (non-convergence, domain escape) are logged, never fatal.
    The reduction is a deterministic sorted merge, so reports are identical
    for any worker count.  seed_scale overrides the amplitude reference
    (default: distance from x to y), useful when the sought controls do not
    shrink with the displacement, as on fibers with an energy floor.
    """
    if n_seeds < 1:
        raise ConfigError("n_seeds must be at least 1")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if opts is None:
        opts = GeodesicOptions(p=p)
    elif opts.p != p:
        opts = GeodesicOptions(**{**opts.__dict__, "p": p})
    run_opts = GeodesicOptions(**{**opts.__dict__, "raise_on_failure": False})

    disp = displacement(system, x, y)
    scale = seed_scale if seed_scale is not None else max(float(np.linalg.norm(disp)), 0.1)
    if not scale > 0.0:
        raise ConfigError("seed_scale must be positive")
    seeds = generate_seeds(rng_seed, n_seeds, m_seed, system.d, scale)
    bps = np.linspace(0.0, 1.0, m_seed + 1)

    def run(idx):
        sig = ControlSignal(bps, seeds[idx])
        try:
            return idx, solve_critical(
                system, x, y, u_init=sig, opts=run_opts, seed_index=idx
            ), None
        except HorizonError as exc:
            return idx, None, f"{type(exc).__name__}: {exc}"

    nworkers = resolve_workers(workers)
    results = [None] * n_seeds
    if nworkers == 1:
        for i in range(n_seeds):
            results[i] = run(i)
    else:
        with ThreadPoolExecutor(max_workers=nworkers) as pool:
            for idx, rec, err in pool.map(run, range(n_seeds)):
                results[idx] = (idx, rec, err)

    converged = []
    failed = []
    for idx, rec, err in results:
        if rec is not None and rec.converged:
            converged.append(rec)
        else:
            failed.append({"seed_index": idx, "reason": err or "not converged"})

    records, cluster_ids, energy_clusters = _dedup(
        converged, dedup_energy_tol, dedup_lambda_tol
    )
    return MultistartReport(
        system_name=system.name,
        x=x,
        y=y,
        p=opts.p,
        mode=opts.mode,
        n_seeds=n_seeds,
        m_seed=m_seed,
        rng_seed=rng_seed,
        records=records,
        seeds_tried=n_seeds,
        failed_seeds=failed,
        cluster_ids=cluster_ids,
        energy_clusters=energy_clusters,
    )


def _dedup(records, energy_tol, lambda_tol):
    """Joint (energy, normalized lambda) dedup plus energy-only clustering."""
    ordered = sorted(records, key=lambda r: (r.energy, r.seed_index))
    kept = []
    for rec in ordered:
        lam_n = rec.lam / max(rec.energy, 1e-12)
        duplicate = False
        for pos, other in enumerate(kept):
            if abs(rec.energy - other.energy) > energy_tol * max(abs(other.energy), 1e-12):
                continue
            lam_o = other.lam / max(other.energy, 1e-12)
            if np.linalg.norm(lam_n - lam_o) <= lambda_tol * max(np.linalg.norm(lam_o), 1e-12):
                duplicate = True
                if rec.stationarity_residual < other.stationarity_residual:
                    kept[pos] = rec
                break
        if not duplicate:
            kept.append(rec)
    kept.sort(key=lambda r: (r.energy, r.seed_index))

    energy_clusters = []
    cluster_ids = []
    for rec in kept:
        for cid, cl in enumerate(energy_clusters):
            if abs(rec.energy - cl["energy"]) <= max(10 * energy_tol * cl["energy"], 1e-9):
                cl["count"] += 1
                cluster_ids.append(cid)
                break
        else:
            energy_clusters.append({"cluster_id": len(energy_clusters), "energy": rec.energy, "count": 1})
            cluster_ids.append(len(energy_clusters) - 1)
    return kept, cluster_ids, energy_clusters


# -- coincidence of J_p and J_2 critical points -------------------------------


@dataclass
class CoincidenceReport:
    eta: np.ndarray
    mean_speed: float
    residual_p: float
    residual_2: float
    passed: bool
    indeterminate: bool = False


def coincidence_check(
    record: GeodesicRecord,
    system: ControlSystem,
    x,
    y,
    tol: float = 1e-6,
    substeps: int | None = None,
) -> CoincidenceReport:
    """Check that the record's control is also J_2-stationary after rescaling.

    With constant speed c, the rescaled multiplier eta = lambda / (p c^(p-2))
    satisfies eta o d_uF = u, which is the p = 2 condition up to the factor 2.
    """
    if not record.converged:
        raise ConfigError("coincidence_check needs a converged record")
    u = record.control
    substeps = substeps if substeps is not None else 2
    c = float(np.sum(record.speed_profile * u.durations) / np.sum(u.durations))
    if c == 0.0:
        passed = bool(np.allclose(record.lam, 0.0))
        return CoincidenceReport(
            eta=record.lam.copy(),
            mean_speed=0.0,
            residual_p=record.stationarity_residual,
            residual_2=0.0 if passed else float("inf"),
            passed=passed,
            indeterminate=not passed,
        )
    eta = record.lam / (record.p * c ** (record.p - 2.0))
    lam2 = 2.0 * eta
    res2 = lagrange_residual(system, x, y, u, lam2, p=2.0, mode="vector", substeps=substeps)
    g2 = 2.0 * np.linalg.norm(u.values, axis=1)
    scale2 = max(1.0, float(np.sum(u.durations * g2**2) ** 0.5))
    return CoincidenceReport(
        eta=eta,
        mean_speed=c,
        residual_p=record.stationarity_residual,
        residual_2=res2,
        passed=bool(res2 <= tol * scale2),
    )
