"""Affine control systems: vector fields, catalogs, brackets, frames.

Fields are held as sympy expressions so that Jacobians, Hessians and Lie
brackets are exact; evaluation goes through cached lambdified closures that
are cheap enough for integrator inner loops.  Opaque callable fields are
accepted for integration but rejected wherever exact derivatives are needed.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from itertools import product

import numpy as np
import sympy as sp

from .errors import (
    ConfigError,
    NotBracketGeneratingError,
    UnsupportedRepresentationError,
)

__all__ = [
    "VectorField",
    "SymbolicField",
    "CallableField",
    "ControlSystem",
    "BracketWord",
    "polynomial_field",
    "lie_bracket",
    "bracket_frame",
    "catalog_names",
    "catalog_load",
    "system_from_json",
    "system_to_json",
    "displacement",
]


def state_symbols(n: int):
    return sp.symbols(f"x0:{n}", real=True)


class _LambdifiedStack:
    """Flat list of sympy expressions compiled once, reshaped on call.

    Handles the constant-expression wrinkle: lambdify returns scalars for
    constant entries, which are broadcast against the batch shape.
    """

    def __init__(self, coords, exprs, shape):
        self._shape = shape
        self._size = len(exprs)
        self._fn = sp.lambdify(coords, list(exprs), "numpy")

    def __call__(self, x):
        out = self._fn(*x)
        return np.asarray(out, dtype=float).reshape(self._shape)

    def batch(self, pts):
        pts = np.asarray(pts, dtype=float)
        cols = [pts[:, i] for i in range(pts.shape[1])]
        out = self._fn(*cols)
        nb = pts.shape[0]
        arrs = [np.broadcast_to(np.asarray(o, dtype=float), (nb,)) for o in out]
        flat = np.stack(arrs, axis=1)  # (nb, size)
        return flat.reshape((nb,) + self._shape)


class VectorField:
    """Interface: value(x), jacobian(x), second_derivative(x)."""

    n: int

    def value(self, x) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x) -> np.ndarray:
        raise NotImplementedError

    def second_derivative(self, x) -> np.ndarray:
        """(n, n, n) array D[i, j, k] = d^2 f_i / dx_j dx_k."""
        raise NotImplementedError


class SymbolicField(VectorField):
    def __init__(self, exprs, coords=None, n=None):
        if coords is None:
            if n is None:
                raise ConfigError("SymbolicField needs coords or n")
            coords = state_symbols(n)
        exprs = [sp.sympify(e) for e in exprs]
        self.coords = tuple(coords)
        self.n = len(self.coords)
        if len(exprs) != self.n:
            raise ConfigError(f"field has {len(exprs)} components, state dim is {self.n}")
        self.exprs = tuple(sp.expand(e) for e in exprs)
        self._val = None
        self._jac = None
        self._hess = None

    def _value_stack(self):
        if self._val is None:
            self._val = _LambdifiedStack(self.coords, self.exprs, (self.n,))
        return self._val

    def _jac_stack(self):
        if self._jac is None:
            ex = [sp.diff(e, c) for e in self.exprs for c in self.coords]
            self._jac = _LambdifiedStack(self.coords, ex, (self.n, self.n))
        return self._jac

    def value(self, x):
        return self._value_stack()(np.asarray(x, dtype=float))

    def jacobian(self, x):
        return self._jac_stack()(np.asarray(x, dtype=float))

    def second_derivative(self, x):
        if self._hess is None:
            ex = [
                sp.diff(e, c1, c2)
                for e in self.exprs
                for c1 in self.coords
                for c2 in self.coords
            ]
            self._hess = _LambdifiedStack(self.coords, ex, (self.n, self.n, self.n))
        return self._hess(np.asarray(x, dtype=float))

    def is_zero(self) -> bool:
        return all(e == 0 for e in self.exprs)

    def __repr__(self):
        return f"SymbolicField({list(self.exprs)})"


class CallableField(VectorField):
    """Opaque field given by callables; no symbolic structure.

    Usable for integration; bracket/steering operations reject it because
    they need exact derivatives.
    """

    def __init__(self, n, value_fn, jacobian_fn=None):
        self.n = int(n)
        self._value_fn = value_fn
        self._jacobian_fn = jacobian_fn

    def value(self, x):
        return np.asarray(self._value_fn(np.asarray(x, dtype=float)), dtype=float)

    def jacobian(self, x):
        if self._jacobian_fn is None:
            raise UnsupportedRepresentationError(
                "field has no Jacobian closure; exact derivatives unavailable"
            )
        return np.asarray(self._jacobian_fn(np.asarray(x, dtype=float)), dtype=float)

    def second_derivative(self, x):
        raise UnsupportedRepresentationError(
            "callable field has no second-derivative closure"
        )


def polynomial_field(component_terms, n: int) -> SymbolicField:
    """Build a field from per-component term lists.

    component_terms: n lists, each of {"coef": float, "exponents": [int]*n}.
    """
    coords = state_symbols(n)
    if len(component_terms) != n:
        raise ConfigError(f"expected {n} component term lists, got {len(component_terms)}")
    exprs = []
    for comp in component_terms:
        e = sp.Integer(0)
        for term in comp:
            try:
                coef = float(term["coef"])
                exps = term["exponents"]
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"bad polynomial term {term!r}") from exc
            if len(exps) != n:
                raise ConfigError(f"term exponents {exps} need length {n}")
            if any((not isinstance(k, int)) or k < 0 for k in exps):
                raise ConfigError(f"exponents must be nonnegative ints, got {exps}")
            mono = sp.Float(coef)
            for c, k in zip(coords, exps):
                mono *= c**k
            e += mono
        exprs.append(e)
    return SymbolicField(exprs, coords=coords)


def lie_bracket(f: VectorField, g: VectorField) -> SymbolicField:
    """Commutator [f, g] = (dg) f - (df) g, computed symbolically."""
    if not isinstance(f, SymbolicField) or not isinstance(g, SymbolicField):
        raise UnsupportedRepresentationError(
            "lie_bracket needs symbolic fields with exact derivatives"
        )
    if f.coords != g.coords:
        raise ConfigError("fields live on different coordinate tuples")
    coords = f.coords
    exprs = []
    for i in range(f.n):
        e = sp.Integer(0)
        for j in range(f.n):
            e += sp.diff(g.exprs[i], coords[j]) * f.exprs[j]
            e -= sp.diff(f.exprs[i], coords[j]) * g.exprs[j]
        exprs.append(sp.expand(e))
    return SymbolicField(exprs, coords=coords)


@dataclass(frozen=True)
class BracketWord:
    """Right-normed bracket word over field indices.

    leaves (l1, ..., lk) denotes [X_l1, [X_l2, [... [X_l(k-1), X_lk] ...]]];
    index 0 is the drift field, 1..d the controlled fields.  Length-1 words
    are the fields themselves.
    """

    leaves: tuple

    @property
    def length(self) -> int:
        return len(self.leaves)

    def __str__(self):
        def nest(ls):
            if len(ls) == 1:
                return str(ls[0])
            return f"[{ls[0]},{nest(ls[1:])}]"

        return f"[{nest(self.leaves)}]" if self.length > 1 else f"[{self.leaves[0]}]"


class ControlSystem:
    """State dim n, d controlled fields, optional drift, periodic flags."""

    def __init__(self, name, fields, drift=None, periodic=None):
        if not fields:
            raise ConfigError("need at least one controlled field")
        self.name = str(name)
        self.fields = list(fields)
        self.n = self.fields[0].n
        self.d = len(self.fields)
        for f in self.fields:
            if f.n != self.n:
                raise ConfigError("controlled fields disagree on state dimension")
        if drift is None:
            drift = SymbolicField([0] * self.n, n=self.n)
        if drift.n != self.n:
            raise ConfigError("drift disagrees on state dimension")
        self.drift = drift
        if periodic is None:
            periodic = (False,) * self.n
        if len(periodic) != self.n:
            raise ConfigError("periodic flags must have length n")
        self.periodic = tuple(bool(b) for b in periodic)
        self._stacks = {}

    # -- structure -------------------------------------------------------

    @property
    def is_driftless(self) -> bool:
        return isinstance(self.drift, SymbolicField) and self.drift.is_zero()

    def field_by_index(self, i: int) -> VectorField:
        """0 is the drift, 1..d the controlled fields."""
        if i == 0:
            return self.drift
        if 1 <= i <= self.d:
            return self.fields[i - 1]
        raise ConfigError(f"field index {i} outside 0..{self.d}")

    def all_symbolic(self) -> bool:
        return isinstance(self.drift, SymbolicField) and all(
            isinstance(f, SymbolicField) for f in self.fields
        )

    # -- fast stacked evaluation ------------------------------------------

    def _stack(self, kind):
        cached = self._stacks.get(kind)
        if cached is not None:
            return cached
        if not self.all_symbolic():
            return None
        coords = self.drift.coords
        all_fields = [self.drift] + list(self.fields)
        if kind == "value":
            exprs = [e for f in all_fields for e in f.exprs]
            stack = _LambdifiedStack(coords, exprs, (self.d + 1, self.n))
        elif kind == "jac":
            exprs = [
                sp.diff(e, c) for f in all_fields for e in f.exprs for c in coords
            ]
            stack = _LambdifiedStack(coords, exprs, (self.d + 1, self.n, self.n))
        else:
            raise ValueError(kind)
        self._stacks[kind] = stack
        return stack

    def field_values(self, x) -> np.ndarray:
        """(d+1, n) stack: row 0 drift, rows 1..d controlled fields at x."""
        stack = self._stack("value")
        if stack is not None:
            return stack(np.asarray(x, dtype=float))
        return np.stack([self.drift.value(x)] + [f.value(x) for f in self.fields])

    def field_values_batch(self, pts) -> np.ndarray:
        stack = self._stack("value")
        if stack is not None:
            return stack.batch(pts)
        return np.stack([self.field_values(p) for p in np.asarray(pts, dtype=float)])

    def field_jacobians(self, x) -> np.ndarray:
        stack = self._stack("jac")
        if stack is not None:
            return stack(np.asarray(x, dtype=float))
        return np.stack([self.drift.jacobian(x)] + [f.jacobian(x) for f in self.fields])

    def dynamics(self, x, u) -> np.ndarray:
        """Right-hand side drift(x) + sum_i u_i X_i(x)."""
        V = self.field_values(x)
        return V[0] + u @ V[1:]

    def dynamics_jacobian(self, x, u) -> np.ndarray:
        """State Jacobian of the right-hand side at (x, u)."""
        J = self.field_jacobians(x)
        return J[0] + np.tensordot(u, J[1:], axes=(0, 0))

    def controlled_matrix(self, x) -> np.ndarray:
        """(n, d) matrix whose columns are the controlled fields at x."""
        return self.field_values(x)[1:].T

    # -- bracket evaluation ------------------------------------------------

    def word_field(self, word: BracketWord) -> SymbolicField:
        return _word_field_cached(self, word.leaves)

    def __repr__(self):
        kind = "driftless" if self.is_driftless else "drift"
        return f"ControlSystem({self.name!r}, n={self.n}, d={self.d}, {kind})"


def _word_field_cached(system: ControlSystem, leaves: tuple) -> SymbolicField:
    cache = getattr(system, "_word_cache", None)
    if cache is None:
        cache = {}
        system._word_cache = cache
    got = cache.get(leaves)
    if got is not None:
        return got
    if len(leaves) == 1:
        f = system.field_by_index(leaves[0])
        if not isinstance(f, SymbolicField):
            raise UnsupportedRepresentationError(
                "bracket words need symbolic fields"
            )
        out = f
    else:
        inner = _word_field_cached(system, leaves[1:])
        outer = system.field_by_index(leaves[0])
        out = lie_bracket(outer, inner)
    cache[leaves] = out
    return out


def _word_candidates(d: int, with_drift: bool, length: int):
    """Right-normed candidate words of a given length, lexicographic order.

    Drift systems enumerate over {0..d} but never the bare drift word (0,):
    forward drift time is not a signed chart direction.  Words whose innermost
    pair repeats a field are identically zero and skipped.
    """
    alphabet = range(0, d + 1) if with_drift else range(1, d + 1)
    for leaves in product(alphabet, repeat=length):
        if length == 1:
            if leaves[0] == 0:
                continue
        elif leaves[-1] == leaves[-2]:
            continue
        yield BracketWord(leaves)


def bracket_frame(system: ControlSystem, point, max_depth: int = 4, rank_tol: float = 1e-8):
    """Greedy frame of bracket words spanning the tangent space at a point.

    Words are taken in (length, lexicographic) order; a candidate is kept when
    adding its evaluated field keeps the smallest singular value of the
    selected stack above rank_tol times the largest.  Returns (words, step)
    with step the maximal selected word length.
    """
    point = np.asarray(point, dtype=float)
    if point.shape != (system.n,):
        raise ConfigError(f"point must have shape ({system.n},)")
    with_drift = not system.is_driftless
    selected_words = []
    selected_vecs = []
    step = 0
    for length in range(1, max_depth + 1):
        for word in _word_candidates(system.d, with_drift, length):
            vec = system.word_field(word).value(point)
            trial = np.vstack(selected_vecs + [vec]) if selected_vecs else vec[None, :]
            svals = np.linalg.svd(trial, compute_uv=False)
            if svals[-1] > rank_tol * svals[0]:
                selected_words.append(word)
                selected_vecs.append(vec)
                step = length
                if len(selected_words) == system.n:
                    return selected_words, step
    raise NotBracketGeneratingError(
        f"{system.name}: brackets up to depth {max_depth} span only "
        f"{len(selected_words)} of {system.n} directions at {point.tolist()}"
    )


# -- catalog ---------------------------------------------------------------

_AGRACHEV_RE = re.compile(r"^agrachev_lee\((\d+)\)$")


def catalog_names():
    return [
        "heisenberg",
        "martinet",
        "unicycle",
        "grushin",
        "free_step2_rank2",
        "agrachev_lee(k)",
    ]


@lru_cache(maxsize=None)
def catalog_load(name: str) -> ControlSystem:
    """Built-in systems by name; agrachev_lee takes its exponent inline."""
    key = name.strip()
    if key == "heisenberg":
        x = state_symbols(3)
        return ControlSystem(
            "heisenberg",
            fields=[
                SymbolicField([1, 0, -x[1] / 2], coords=x),
                SymbolicField([0, 1, x[0] / 2], coords=x),
            ],
        )
    if key == "martinet":
        x = state_symbols(3)
        return ControlSystem(
            "martinet",
            fields=[
                SymbolicField([1, 0, 0], coords=x),
                SymbolicField([0, 1, x[0] ** 2], coords=x),
            ],
        )
    if key == "unicycle":
        x = state_symbols(3)
        return ControlSystem(
            "unicycle",
            fields=[
                SymbolicField([sp.cos(x[2]), sp.sin(x[2]), 0], coords=x),
                SymbolicField([0, 0, 1], coords=x),
            ],
            periodic=(False, False, True),
        )
    if key == "grushin":
        x = state_symbols(2)
        return ControlSystem(
            "grushin",
            fields=[
                SymbolicField([1, 0], coords=x),
                SymbolicField([0, x[0]], coords=x),
            ],
        )
    if key == "free_step2_rank2":
        x = state_symbols(3)
        return ControlSystem(
            "free_step2_rank2",
            fields=[
                SymbolicField([1, 0, 0], coords=x),
                SymbolicField([0, 1, x[0]], coords=x),
            ],
        )
    m = _AGRACHEV_RE.match(key)
    if m:
        k = int(m.group(1))
        if k < 3:
            raise ConfigError(f"agrachev_lee needs k >= 3, got {k}")
        x = state_symbols(2)
        return ControlSystem(
            f"agrachev_lee({k})",
            fields=[
                SymbolicField([1, 0], coords=x),
                SymbolicField([0, x[0] ** k], coords=x),
            ],
            drift=SymbolicField([0, x[0] ** 2], coords=x),
        )
    raise ConfigError(f"unknown catalog system {name!r}")


# -- JSON schema -------------------------------------------------------------


def system_from_json(text: str) -> ControlSystem:
    """Parse {"name", "n", "d", "drift", "fields", "periodic"}.

    "fields" holds d entries; each entry (and "drift", when present) is a list
    of n per-component term lists, a term being {"coef": float,
    "exponents": [int]*n}.
    """
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"bad system JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("system JSON must be an object")
    try:
        n = int(obj["n"])
        d = int(obj["d"])
        fields_spec = obj["fields"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"system JSON missing required keys: {exc}") from exc
    if n < 1 or d < 1:
        raise ConfigError("n and d must be positive")
    if not isinstance(fields_spec, list) or len(fields_spec) != d:
        raise ConfigError(f"'fields' must list exactly d={d} fields")
    fields = [polynomial_field(fs, n) for fs in fields_spec]
    drift_spec = obj.get("drift")
    drift = polynomial_field(drift_spec, n) if drift_spec else None
    periodic = obj.get("periodic")
    return ControlSystem(
        obj.get("name", "custom"), fields=fields, drift=drift, periodic=periodic
    )


def _field_to_terms(f: SymbolicField):
    comps = []
    for e in f.exprs:
        poly = sp.Poly(e, *f.coords) if e != 0 else None
        terms = []
        if poly is not None:
            for exps, coef in poly.terms():
                terms.append({"coef": float(coef), "exponents": [int(k) for k in exps]})
        comps.append(terms)
    return comps


def system_to_json(system: ControlSystem) -> str:
    """Serialize a polynomial system back to the JSON schema."""
    if not system.all_symbolic():
        raise UnsupportedRepresentationError("only symbolic systems serialize")
    for f in [system.drift] + list(system.fields):
        for e in f.exprs:
            if not e.is_polynomial(*f.coords):
                raise UnsupportedRepresentationError(
                    f"{system.name}: non-polynomial component {e} has no JSON form"
                )
    obj = {
        "name": system.name,
        "n": system.n,
        "d": system.d,
        "fields": [_field_to_terms(f) for f in system.fields],
        "periodic": list(system.periodic),
    }
    if not system.is_driftless:
        obj["drift"] = _field_to_terms(system.drift)
    return json.dumps(obj, sort_keys=True)


def displacement(system: ControlSystem, a, b) -> np.ndarray:
    """b - a with periodic coordinates wrapped into (-pi, pi]."""
    delta = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    for i, per in enumerate(system.periodic):
        if per:
            delta[i] = (delta[i] + np.pi) % (2.0 * np.pi) - np.pi
    return delta
