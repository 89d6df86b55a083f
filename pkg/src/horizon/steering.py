"""Steering charts built from commutator flows of the controlled fields.

A chart at a base point picks a frame of bracket words, expands each word
into a sequence of elementary single-field flows (the group-commutator
recursion: doubling plus inverses, so a length-nu word costs 3*2^(nu-1) - 2
factors), and parametrizes the k-th word by the signed fractional root of a
coordinate phi_k.  Newton inversion of the composed flow then yields controls
steering the base point to a nearby target, with exact per-factor L^p norms
that shrink as the target approaches the base.

The working radius of a chart is empirical: Newton is damped, and callers
get a ChartRadiusError when the target is out of reach, at which point they
should re-anchor or subdivide.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .endpoint import endpoint as _endpoint
from .errors import (
    AdmissibilityError,
    ChartRadiusError,
    ConfigError,
    NotBracketGeneratingError,
    UnsupportedStepError,
)
from .signals import ControlSignal, EnergyParams, zero_signal
from .systems import BracketWord, ControlSystem, _word_candidates, displacement

__all__ = [
    "ChartFactor",
    "SteeringChart",
    "SteeringPlan",
    "build_chart",
    "solve_chart_coordinates",
    "cross_section",
    "cross_section_drift",
    "critical_exponent",
    "check_admissibility",
]

DEFAULT_FLOW_SUBSTEPS = 16


@dataclass(frozen=True)
class ChartFactor:
    """One elementary flow e^{c X_b} inside the expanded product.

    word_index selects the chart coordinate driving the factor; sign is the
    +/-1 from the commutator expansion; carries_sign marks the single factor
    per word that absorbs the sign of the coordinate (and the parity of the
    word length), so that the leading-order displacement is exactly
    phi_k times the word's bracket field.
    """

    word_index: int
    field_index: int
    sign: float
    carries_sign: bool


def _expand_positions(nu: int):
    """Chronological (m, sign) expansion of the commutator recursion."""
    if nu == 1:
        return [(1, 1.0)]
    inner = _expand_positions(nu - 1)
    inverse = [(m, -s) for (m, s) in reversed(inner)]
    return inverse + [(nu, -1.0)] + inner + [(nu, 1.0)]


def _word_factors(k: int, word: BracketWord):
    nu = word.length
    leaves = word.leaves
    out = []
    for m, s in _expand_positions(nu):
        # position m of the recursion acts with the (nu-m)-th leaf: the
        # innermost right leaf enters first, the outermost last
        out.append(ChartFactor(k, leaves[nu - m], s, m == 1))
    return out


def _factor_coefficient(phi_k: float, nu: int, factor: ChartFactor) -> float:
    if phi_k == 0.0:
        return 0.0
    c = factor.sign * abs(phi_k) ** (1.0 / nu)
    if factor.carries_sign:
        c *= np.sign(phi_k) * (-1.0) ** (nu - 1)
    return c


@dataclass
class SteeringChart:
    system: ControlSystem
    base: np.ndarray
    words: list
    factors: list
    params: EnergyParams
    alpha: float | None = None  # set for drift charts
    flow_substeps: int = DEFAULT_FLOW_SUBSTEPS

    @property
    def factor_count(self) -> int:
        return len(self.factors)

    @property
    def step(self) -> int:
        return max(w.length for w in self.words)

    def coefficients(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        out = np.empty(len(self.factors))
        for j, f in enumerate(self.factors):
            out[j] = _factor_coefficient(phi[f.word_index], self.words[f.word_index].length, f)
        return out

    def frame_matrix(self) -> np.ndarray:
        """Columns are the word bracket fields evaluated at the base."""
        cols = [self.system.word_field(w).value(self.base) for w in self.words]
        return np.stack(cols, axis=1)

    # -- executing the flow product --------------------------------------

    def compose(self, phi) -> np.ndarray:
        """Endpoint of the factor product applied to the base point.

        Driftless charts run pure single-field flows; drift charts integrate
        the realized control plan so the drift acts during every factor.
        """
        if self.alpha is not None:
            plan = self.plan_signal(phi)
            if plan.segments == 0:
                return self.base.copy()
            return _endpoint(self.system, self.base, plan, substeps=self.flow_substeps)
        x = self.base.copy()
        coeffs = self.coefficients(phi)
        for f, c in zip(self.factors, coeffs):
            if c == 0.0:
                continue
            x = _single_field_flow(self.system, x, f.field_index, c, self.flow_substeps)
        return x

    def plan_signal(self, phi) -> ControlSignal:
        """Realize the factor product as a piecewise-constant control.

        A factor with coefficient c becomes one segment on component b:
        duration |c|^beta, height c |c|^(-beta) (drift charts use the
        exponent 2*alpha instead of beta), so the time integral is exactly c.
        Zero coefficients are skipped; factors are laid out strictly in
        product order.
        """
        expo = self.params.beta if self.alpha is None else 2.0 * self.alpha
        coeffs = self.coefficients(phi)
        durations = []
        values = []
        d = self.system.d
        t = 0.0
        for f, c in zip(self.factors, coeffs):
            if c == 0.0:
                continue
            dur = abs(c) ** expo
            if t + dur <= t:
                continue  # numerically invisible factor, cannot advance the clock
            t += dur
            row = np.zeros(d)
            row[f.field_index - 1] = c * abs(c) ** (-expo)
            durations.append(dur)
            values.append(row)
        if not durations:
            return zero_signal(d)
        bps = np.concatenate([[0.0], np.cumsum(durations)])
        return ControlSignal(bps, np.vstack(values))


def _single_field_flow(system, x, field_index, time, substeps):
    """RK4 flow along one controlled field for a signed time."""
    h = time / substeps

    def f(pt):
        return system.field_values(pt)[field_index]

    for _ in range(substeps):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def _controlled_frame(system, point, max_depth, rank_tol=1e-8):
    """Greedy frame over controlled-field words only (drift never enters)."""
    point = np.asarray(point, dtype=float)
    selected, vecs = [], []
    for length in range(1, max_depth + 1):
        for word in _word_candidates(system.d, False, length):
            vec = system.word_field(word).value(point)
            trial = np.vstack(vecs + [vec]) if vecs else vec[None, :]
            svals = np.linalg.svd(trial, compute_uv=False)
            if svals[-1] > rank_tol * svals[0]:
                selected.append(word)
                vecs.append(vec)
                if len(selected) == system.n:
                    return selected
    raise NotBracketGeneratingError(
        f"{system.name}: controlled brackets up to depth {max_depth} span only "
        f"{len(selected)} of {system.n} directions"
    )


def build_chart(
    system: ControlSystem,
    x,
    params: EnergyParams | None = None,
    words=None,
    max_depth: int = 4,
    alpha: float | None = None,
    flow_substeps: int = DEFAULT_FLOW_SUBSTEPS,
) -> SteeringChart:
    """Expand a bracket frame at x into an elementary factor sequence.

    The factor layout depends only on the words, never on the target; with
    phi = 0 every coefficient vanishes and the product is the identity.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (system.n,):
        raise ConfigError(f"base point must have shape ({system.n},)")
    if params is None:
        params = EnergyParams()
    if words is None:
        words = _controlled_frame(system, x, max_depth)
    factors = []
    for k, w in enumerate(words):
        factors.extend(_word_factors(k, w))
    return SteeringChart(
        system=system,
        base=x,
        words=list(words),
        factors=factors,
        params=params,
        alpha=alpha,
        flow_substeps=flow_substeps,
    )


def solve_chart_coordinates(
    chart: SteeringChart,
    y,
    newton_tol: float = 1e-10,
    max_iter: int = 60,
    fd_scale: float = 1e-6,
) -> np.ndarray:
    """Damped Newton inversion of the chart's composed flow.

    Starts from the frame coordinates of the displacement (the leading-order
    answer) and uses central finite differences for the Jacobian.  Raises
    ChartRadiusError when the target resists, which callers treat as "outside
    the working radius": re-anchor closer and retry.
    """
    y = np.asarray(y, dtype=float)
    n = chart.system.n
    target_disp = displacement(chart.system, chart.base, y)
    scale = 1.0 + float(np.linalg.norm(target_disp))
    tol = newton_tol * scale

    phi = np.zeros(n)
    res = chart.compose(phi) - y
    if np.linalg.norm(res) <= tol:
        return phi

    frame = chart.frame_matrix()
    phi = np.linalg.lstsq(frame, target_disp, rcond=None)[0]

    res = chart.compose(phi) - y
    best = np.linalg.norm(res)
    for _ in range(max_iter):
        if best <= tol:
            return phi
        J = _fd_jacobian(chart, phi, fd_scale)
        try:
            step = np.linalg.solve(J, -res)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -res, rcond=None)[0]
        alpha = 1.0
        for _ in range(10):
            cand = phi + alpha * step
            cres = chart.compose(cand) - y
            cn = np.linalg.norm(cres)
            if cn < best:
                phi, res, best = cand, cres, cn
                break
            alpha *= 0.5
        else:
            break  # no progress at the smallest damping
    if best <= tol:
        return phi
    raise ChartRadiusError(
        f"chart Newton stalled at |residual| = {best:.3e} (tol {tol:.1e}); "
        "target likely outside the chart's working radius"
    )


def _fd_jacobian(chart, phi, fd_scale):
    n = len(phi)
    J = np.empty((chart.system.n, n))
    for k in range(n):
        delta = fd_scale * max(abs(phi[k]), 1e-2)
        ep = phi.copy()
        em = phi.copy()
        ep[k] += delta
        em[k] -= delta
        J[:, k] = (chart.compose(ep) - chart.compose(em)) / (2.0 * delta)
    return J


@dataclass
class SteeringPlan:
    """Control realizing a chart solution: run sigma for time T from x."""

    phi: np.ndarray
    T: float
    sigma: ControlSignal
    residual: float
    factor_count: int
    base: np.ndarray
    target: np.ndarray
    alpha: float | None = None

    def to_json(self) -> str:
        import json

        return json.dumps(
            {
                "phi": self.phi.tolist(),
                "T": self.T,
                "sigma": {
                    "breakpoints": self.sigma.breakpoints.tolist(),
                    "values": self.sigma.values.tolist(),
                },
                "residual": self.residual,
                "factor_count": self.factor_count,
            },
            sort_keys=True,
        )


def cross_section(
    system: ControlSystem,
    x,
    y,
    params: EnergyParams | None = None,
    steer_tol: float = 1e-9,
    max_depth: int = 4,
    chart: SteeringChart | None = None,
    flow_substeps: int = DEFAULT_FLOW_SUBSTEPS,
    plan_substeps: int = DEFAULT_FLOW_SUBSTEPS,
) -> SteeringPlan:
    """Steer a driftless system from x to y; returns the realized plan.

    Solves the chart coordinates against the factor flow product, lays the
    plan, then verifies the integrated endpoint and re-polishes the
    coordinates against the true plan endpoint if the residual exceeds
    steer_tol.  Steering a point to itself returns the zero plan exactly.
    """
    if not system.is_driftless:
        raise ConfigError(
            "cross_section requires a driftless system; use cross_section_drift"
        )
    if params is None:
        params = EnergyParams()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if chart is None:
        chart = build_chart(system, x, params, max_depth=max_depth, flow_substeps=flow_substeps)

    disp = displacement(system, x, y)
    if np.linalg.norm(disp) == 0.0:
        return SteeringPlan(
            phi=np.zeros(system.n),
            T=0.0,
            sigma=zero_signal(system.d),
            residual=0.0,
            factor_count=chart.factor_count,
            base=x,
            target=y,
        )

    # steer to the wrap-nearest representative of the target
    y_near = x + disp
    phi = solve_chart_coordinates(chart, y_near)
    plan_sig = chart.plan_signal(phi)
    res = _plan_residual(system, x, y, plan_sig, plan_substeps)
    if res > steer_tol:
        # polish against the integrated plan endpoint
        phi, plan_sig, res = _refine_on_plan(
            system, chart, x, y_near, phi, steer_tol, plan_substeps
        )
    return SteeringPlan(
        phi=phi,
        T=plan_sig.total_time,
        sigma=plan_sig,
        residual=res,
        factor_count=chart.factor_count,
        base=x,
        target=y,
    )


def _plan_residual(system, x, y, plan_sig, substeps, verify_endpoint=None):
    if verify_endpoint is not None:
        end = verify_endpoint(plan_sig)
    elif plan_sig.segments == 0:
        end = np.asarray(x, dtype=float)
    else:
        end = _endpoint(system, x, plan_sig, substeps=substeps)
    return float(np.linalg.norm(displacement(system, end, y)))


def _refine_on_plan(system, chart, x, y, phi, steer_tol, substeps, verify_endpoint=None, max_iter=20):
    def H(p):
        sig = chart.plan_signal(p)
        if verify_endpoint is not None:
            return verify_endpoint(sig)
        if sig.segments == 0:
            return np.asarray(x, dtype=float)
        return _endpoint(system, x, sig, substeps=substeps)

    res_vec = H(phi) - y
    best = np.linalg.norm(res_vec)
    for _ in range(max_iter):
        if best <= steer_tol:
            break
        J = np.empty((system.n, len(phi)))
        for k in range(len(phi)):
            delta = 1e-6 * max(abs(phi[k]), 1e-2)
            ep, em = phi.copy(), phi.copy()
            ep[k] += delta
            em[k] -= delta
            J[:, k] = (H(ep) - H(em)) / (2.0 * delta)
        try:
            step = np.linalg.solve(J, -res_vec)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -res_vec, rcond=None)[0]
        alpha = 1.0
        for _ in range(10):
            cand = phi + alpha * step
            cres = H(cand) - y
            cn = np.linalg.norm(cres)
            if cn < best:
                phi, res_vec, best = cand, cres, cn
                break
            alpha *= 0.5
        else:
            break
    if best > steer_tol:
        raise ChartRadiusError(
            f"plan refinement stalled at residual {best:.3e} (steer_tol {steer_tol:.1e})"
        )
    plan_sig = chart.plan_signal(phi)
    return phi, plan_sig, best


# -- drift admissibility ------------------------------------------------------


def critical_exponent(system: ControlSystem, x, max_depth: int = 6):
    """Lower bound sigma/(sigma-1) for the critical exponent at x.

    Driftless systems return inf (all p in (1, inf) are admissible); with
    drift, sigma is the step of the bracket frame at x with the drift allowed
    inside words.
    """
    if system.is_driftless:
        return float("inf")
    from .systems import bracket_frame

    _, step = bracket_frame(system, x, max_depth=max_depth)
    return step / (step - 1.0)


def _format_bound(step: int) -> str:
    fr = Fraction(step, step - 1)
    return f"{fr.numerator}/{fr.denominator}"


def check_admissibility(system: ControlSystem, x, p: float, max_depth: int = 6) -> float:
    """Raise AdmissibilityError unless p is below the critical bound at x."""
    if not p > 1.0:
        raise ConfigError(f"p must exceed 1, got {p}")
    if system.is_driftless:
        return float("inf")
    from .systems import bracket_frame

    _, step = bracket_frame(system, x, max_depth=max_depth)
    bound = step / (step - 1.0)
    if p >= bound:
        raise AdmissibilityError(
            f"p={p:g} is not admissible for {system.name} at this point: "
            f"the step-{step} bracket structure requires p < {_format_bound(step)} "
            f"(= {bound:g})"
        )
    return bound


def cross_section_drift(
    system: ControlSystem,
    x,
    y,
    p: float,
    alpha: float | None = None,
    steer_tol: float = 1e-9,
    flow_substeps: int = DEFAULT_FLOW_SUBSTEPS,
    verify_endpoint=None,
) -> SteeringPlan:
    """Steering with drift: factor segments of duration |c|^(2 alpha).

    Admissibility is checked first (p below the step bound, and alpha inside
    (step/2, p/(2(p-1))) so the segment norms still vanish near the base);
    then the factor layout, which is only implemented for charts whose
    controlled fields span within bracket depth 2, is solved against the
    integrated plan so the drift's contribution is absorbed by Newton.

    verify_endpoint, when given, is a callable mapping a candidate plan
    signal to the achieved state; the residual and the refinement loop then
    target that map instead of plain integration from x.  Lifting passes the
    composed (concatenated) endpoint here, because time compression does not
    commute with the drift term, so the standalone plan endpoint and the
    in-context endpoint differ at order T * drift.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if system.is_driftless:
        raise ConfigError("system has no drift; use cross_section")
    bound = check_admissibility(system, x, p)

    alpha_hi = p / (2.0 * (p - 1.0))
    from .systems import bracket_frame

    _, sigma_step = bracket_frame(system, x)
    alpha_lo = sigma_step / 2.0
    if alpha is None:
        alpha = 0.5 * (alpha_lo + alpha_hi)
    if not (alpha_lo < alpha < alpha_hi):
        raise AdmissibilityError(
            f"alpha={alpha:g} outside the admissible interval "
            f"({alpha_lo:g}, {alpha_hi:g}) for p={p:g} (bound {_format_bound(sigma_step)})"
        )

    try:
        words = _controlled_frame(system, x, max_depth=2)
    except NotBracketGeneratingError as exc:
        raise UnsupportedStepError(
            f"{system.name}: drift steering is implemented for controlled frames of "
            f"step <= 2 only ({exc})"
        ) from exc

    chart = build_chart(
        system, x, EnergyParams(p=p), words=words, alpha=alpha, flow_substeps=flow_substeps
    )
    disp = displacement(system, x, y)
    if np.linalg.norm(disp) == 0.0:
        return SteeringPlan(
            phi=np.zeros(system.n),
            T=0.0,
            sigma=zero_signal(system.d),
            residual=0.0,
            factor_count=chart.factor_count,
            base=x,
            target=y,
            alpha=alpha,
        )
    y_near = x + disp
    phi = solve_chart_coordinates(chart, y_near)
    plan_sig = chart.plan_signal(phi)
    res = _plan_residual(system, x, y, plan_sig, flow_substeps, verify_endpoint)
    if res > steer_tol:
        phi, plan_sig, res = _refine_on_plan(
            system, chart, x, y_near, phi, steer_tol, flow_substeps, verify_endpoint
        )
    return SteeringPlan(
        phi=phi,
        T=plan_sig.total_time,
        sigma=plan_sig,
        residual=res,
        factor_count=chart.factor_count,
        base=x,
        target=y,
        alpha=alpha,
    )
