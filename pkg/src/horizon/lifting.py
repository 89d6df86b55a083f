"""Lifting sampled state paths to continuously varying controls.

Given a control u0 reaching the first sample of a path, every later sample
is reached by appending a steering correction: the chart at the current
anchor endpoint produces a short plan sigma_k of duration T_k, and the new
control is the rescaled concatenation of the anchor control with sigma_k,
living again on [0, 1].  The p-norm of the correction shrinks with the
sample spacing, so consecutive controls stay close in L^p.

When a sample falls outside the chart's working radius, the lift re-anchors
at the previous sample's control and retries, bisecting the displacement
into stepping stones if a single hop still fails.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .endpoint import endpoint as _endpoint
from .errors import ChartRadiusError, ConfigError, ConvergenceError
from .signals import ControlSignal, EnergyParams, concatenate_rescaled
from .steering import check_admissibility, cross_section, cross_section_drift
from .systems import ControlSystem, displacement

__all__ = ["TargetPath", "LiftResult", "lift_path", "continuity_report"]


@dataclass(frozen=True)
class TargetPath:
    """A path sampled as parameter values and target states."""

    samples: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        t = np.asarray(self.targets, dtype=float)
        if s.ndim != 1 or t.ndim != 2 or t.shape[0] != s.shape[0]:
            raise ConfigError("samples (K+1,) and targets (K+1, n) must align")
        if s.shape[0] < 1:
            raise ConfigError("path needs at least one sample")
        if np.any(np.diff(s) <= 0):
            raise ConfigError("samples must be strictly increasing")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "targets", t)
        s.setflags(write=False)
        t.setflags(write=False)

    @property
    def K(self) -> int:
        return self.samples.shape[0] - 1

    @classmethod
    def from_function(cls, g, samples) -> "TargetPath":
        samples = np.asarray(samples, dtype=float)
        targets = np.stack([np.asarray(g(s), dtype=float) for s in samples])
        return cls(samples, targets)


@dataclass
class LiftResult:
    path: TargetPath
    controls: list
    residuals: np.ndarray
    reanchor_events: list = field(default_factory=list)
    params: EnergyParams | None = None
    alpha: float | None = None

    @property
    def K(self) -> int:
        return len(self.controls) - 1

    @property
    def lp_modulus(self) -> float:
        """Largest L^p distance between consecutive lifted controls."""
        mods = self.moduli()
        return float(mods.max()) if len(mods) else 0.0

    def moduli(self, p: float | None = None) -> np.ndarray:
        """L^p distances between consecutive lifted controls."""
        if p is None:
            p = self.params.p if self.params is not None else 2.0
        out = np.empty(self.K)
        for k in range(self.K):
            out[k] = self.controls[k + 1].subtract(self.controls[k]).lp_norm(p)
        return out


def lift_path(
    system: ControlSystem,
    x0,
    u0: ControlSignal,
    path: TargetPath,
    params: EnergyParams | None = None,
    lift_tol: float = 1e-8,
    steer_tol: float = 1e-10,
    substeps: int = 64,
    max_reanchors: int | None = None,
    max_bisect: int = 6,
    alpha: float | None = None,
) -> LiftResult:
    """Lift a sampled path to controls, anchored at u0.

    The control for the first sample is u0 itself (bit for bit); u0 must
    actually reach the first target within lift_tol.  Systems with drift are
    gated by the admissibility check before any steering is attempted.
    """
    if params is None:
        params = EnergyParams()
    x0 = np.asarray(x0, dtype=float)
    if u0.segments == 0:
        # promote the empty signal to the zero control on [0, 1]; same
        # element of L^p, but concatenation needs an actual unit interval
        u0 = ControlSignal(np.array([0.0, 1.0]), np.zeros((1, system.d)))
    elif abs(u0.total_time - 1.0) > 1e-12:
        raise ConfigError("anchor control must live on [0, 1]")
    if not system.is_driftless:
        check_admissibility(system, path.targets[0], params.p)
    if max_reanchors is None:
        max_reanchors = 4 * max(path.K, 1)

    anchor_u = u0
    anchor_end = _endpoint(system, x0, u0, substeps=substeps) if u0.segments else x0.copy()
    first_res = float(np.linalg.norm(displacement(system, anchor_end, path.targets[0])))
    if first_res > lift_tol:
        raise ConfigError(
            f"anchor control misses the first path sample by {first_res:.3e} "
            f"(lift_tol {lift_tol:.1e})"
        )

    controls = [u0]
    residuals = [first_res]
    events = []
    reanchors = 0

    for k in range(1, path.K + 1):
        target = path.targets[k]
        u_k, anchor_u, anchor_end, used = _reach_target(
            system,
            x0,
            anchor_u,
            anchor_end,
            target,
            params,
            steer_tol,
            substeps,
            prev_control=controls[k - 1],
            max_bisect=max_bisect,
            reanchors_left=max_reanchors - reanchors,
            alpha=alpha,
        )
        reanchors += used
        if used:
            events.append({"sample_index": k, "reanchors": used})
        end_k = _endpoint(system, x0, u_k, substeps=substeps) if u_k.segments else x0.copy()
        res_k = float(np.linalg.norm(displacement(system, end_k, target)))
        if res_k > lift_tol:
            raise ConvergenceError(
                f"lift residual {res_k:.3e} at sample {k} exceeds lift_tol {lift_tol:.1e}"
            )
        controls.append(u_k)
        residuals.append(res_k)

    return LiftResult(
        path=path,
        controls=controls,
        residuals=np.array(residuals),
        reanchor_events=events,
        params=params,
        alpha=alpha,
    )


def _steer(system, base, target, params, steer_tol, alpha, substeps, composed=None):
    # the plan must be solved on the same per-segment grid the lift will
    # integrate it with, or the verification sees the discretization gap
    if system.is_driftless:
        return cross_section(
            system,
            base,
            target,
            params,
            steer_tol=steer_tol,
            flow_substeps=substeps,
            plan_substeps=substeps,
        )
    # with drift, time compression skews the anchor's drift exposure, so the
    # plan must be solved against the endpoint of the composed control
    return cross_section_drift(
        system, base, target, p=params.p, alpha=alpha, steer_tol=steer_tol,
        flow_substeps=substeps, verify_endpoint=composed,
    )


def _reach_target(
    system,
    x0,
    anchor_u,
    anchor_end,
    target,
    params,
    steer_tol,
    substeps,
    prev_control,
    max_bisect,
    reanchors_left,
    alpha,
):
    """One sample's control: a single concatenation onto the current anchor.

    The anchor stays fixed across samples (so consecutive controls differ by
    one shrinking correction, keeping the lift L^p-continuous).  Only when
    the chart refuses the target does the lift re-anchor: first at the
    previous sample's control, then, if even that hop fails, at bisection
    stepping stones between the anchor endpoint and the target.
    """
    used = 0

    def composed_endpoint_fn(u_base):
        def fn(plan_sig):
            if plan_sig.segments == 0:
                w = u_base
            else:
                w = concatenate_rescaled(u_base, plan_sig, plan_sig.total_time)
            if w.segments == 0:
                return x0.copy()
            return _endpoint(system, x0, w, substeps=substeps)

        return fn if not system.is_driftless else None

    def hop(u_cur, end_cur, y, depth):
        """Steer end_cur -> y, re-anchoring at midpoints on failure."""
        nonlocal used
        try:
            plan = _steer(
                system, end_cur, y, params, steer_tol, alpha, substeps,
                composed=composed_endpoint_fn(u_cur),
            )
        except (ChartRadiusError, ConvergenceError):
            if depth >= max_bisect or used >= reanchors_left:
                raise ConvergenceError(
                    "steering failed after max subdivision while lifting"
                )
            used += 1
            mid = end_cur + 0.5 * (y - end_cur)
            u_mid, end_mid = hop(u_cur, end_cur, mid, depth + 1)
            return hop(u_mid, end_mid, y, depth + 1)
        u_new = concatenate_rescaled(u_cur, plan.sigma, plan.T)
        end_new = _endpoint(system, x0, u_new, substeps=substeps) if u_new.segments else x0.copy()
        return u_new, end_new

    try:
        plan = _steer(
            system, anchor_end, target, params, steer_tol, alpha, substeps,
            composed=composed_endpoint_fn(anchor_u),
        )
        u_k = concatenate_rescaled(anchor_u, plan.sigma, plan.T)
        return u_k, anchor_u, anchor_end, used
    except (ChartRadiusError, ConvergenceError):
        pass

    # re-anchor at the previous sample's control and hop (with bisection)
    used += 1
    if prev_control is not anchor_u:
        anchor_u = prev_control
        anchor_end = (
            _endpoint(system, x0, prev_control, substeps=substeps)
            if prev_control.segments
            else x0.copy()
        )
    u_k, end_k = hop(anchor_u, anchor_end, target, 0)
    # the composed control becomes the anchor for subsequent samples
    return u_k, u_k, end_k, used


def continuity_report(result: LiftResult, p: float | None = None) -> dict:
    """Tabulate consecutive L^p moduli against sample spacing."""
    if p is None:
        p = result.params.p if result.params is not None else 2.0
    mods = result.moduli(p)
    gaps = np.diff(result.path.samples)
    rows = [
        {
            "sample_index": k + 1,
            "gap": float(gaps[k]),
            "modulus": float(mods[k]),
            "residual": float(result.residuals[k + 1]),
        }
        for k in range(result.K)
    ]
    return {
        "p": p,
        "max_modulus": float(mods.max()) if len(mods) else 0.0,
        "max_residual": float(result.residuals.max()) if len(result.residuals) else 0.0,
        "reanchor_count": sum(ev["reanchors"] for ev in result.reanchor_events),
        "rows": rows,
    }
