import numpy as np
import pytest
import sympy as sp

from horizon import (
    BracketWord,
    CallableField,
    ControlSystem,
    NotBracketGeneratingError,
    SymbolicField,
    UnsupportedRepresentationError,
    bracket_frame,
    catalog_load,
    catalog_names,
    displacement,
    lie_bracket,
    polynomial_field,
    state_symbols,
    system_from_json,
    system_to_json,
)


def fd_jacobian(field, x, eps=1e-6):
    n = len(x)
    J = np.empty((n, n))
    for j in range(n):
        ep, em = x.copy(), x.copy()
        ep[j] += eps
        em[j] -= eps
        J[:, j] = (field.value(ep) - field.value(em)) / (2 * eps)
    return J


def test_symbolic_field_eval():
    x0, x1, x2 = state_symbols(3)
    f = SymbolicField([x1 * x2, -x0, sp.Float(2)], coords=(x0, x1, x2))
    pt = np.array([1.0, 2.0, 3.0])
    assert np.allclose(f.value(pt), [6.0, -1.0, 2.0])
    assert np.allclose(f.jacobian(pt), fd_jacobian(f, pt), atol=1e-8)


def test_second_derivative_symmetric():
    x0, x1 = state_symbols(2)
    f = SymbolicField([x0**2 * x1, x0 * x1**2], coords=(x0, x1))
    pt = np.array([0.7, -1.3])
    D = f.second_derivative(pt)
    assert np.allclose(D, np.swapaxes(D, 1, 2))
    # check one entry by hand: d^2 f_0 / dx0 dx1 = 2 x0
    assert np.isclose(D[0, 0, 1], 2 * 0.7)


def test_callable_field_needs_jacobian():
    f = CallableField(2, lambda x: np.array([x[1], -x[0]]))
    assert np.allclose(f.value(np.array([1.0, 2.0])), [2.0, -1.0])
    with pytest.raises(UnsupportedRepresentationError):
        f.jacobian(np.zeros(2))


def test_polynomial_field():
    f = polynomial_field(
        [
            [{"coef": 2.0, "exponents": [1, 0]}],
            [{"coef": -1.0, "exponents": [0, 2]}],
        ],
        n=2,
    )
    pt = np.array([3.0, 2.0])
    assert np.allclose(f.value(pt), [6.0, -4.0])


def test_heisenberg_brackets():
    heis = catalog_load("heisenberg")
    X1, X2 = heis.fields
    b = lie_bracket(X1, X2)
    rng = np.random.default_rng(0)
    for _ in range(5):
        pt = rng.normal(size=3)
        assert np.allclose(b.value(pt), [0.0, 0.0, 1.0])


def test_martinet_deep_bracket():
    mart = catalog_load("martinet")
    X1, X2 = mart.fields
    w = lie_bracket(X1, lie_bracket(X1, X2))
    assert np.allclose(w.value(np.zeros(3)), [0.0, 0.0, 2.0])


def test_word_field_right_normed():
    mart = catalog_load("martinet")
    w = mart.word_field(BracketWord((1, 1, 2)))
    assert np.allclose(w.value(np.zeros(3)), [0.0, 0.0, 2.0])
    assert str(BracketWord((1, 1, 2))) == "[[1,[1,2]]]"


def test_commutator_flow_slope():
    # e^{-tY} e^{-tX} e^{tY} e^{tX} x = x + t^2 [X,Y](x) + O(t^3)
    heis = catalog_load("heisenberg")
    X1, X2 = heis.fields

    def flow(field, x, t, steps=64):
        h = t / steps
        for _ in range(steps):
            k1 = field.value(x)
            k2 = field.value(x + 0.5 * h * k1)
            k3 = field.value(x + 0.5 * h * k2)
            k4 = field.value(x + h * k3)
            x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        return x

    x = np.array([0.3, -0.2, 0.1])
    br = lie_bracket(X1, X2).value(x)
    for t in [0.1, 0.05]:
        y = flow(X2, flow(X1, flow(X2, flow(X1, x, t), t), -t), -t)
        assert np.allclose((y - x) / t**2, br, atol=5 * t)


def test_bracket_frames():
    heis = catalog_load("heisenberg")
    words, step = bracket_frame(heis, np.zeros(3))
    assert [str(w) for w in words] == ["[1]", "[2]", "[[1,2]]"]
    assert step == 2

    mart = catalog_load("martinet")
    words, step = bracket_frame(mart, np.zeros(3))
    assert step == 3
    assert str(words[-1]) == "[[1,[1,2]]]"

    uni = catalog_load("unicycle")
    _, step = bracket_frame(uni, np.zeros(3))
    assert step == 2

    al = catalog_load("agrachev_lee(3)")
    _, step = bracket_frame(al, np.zeros(2))
    assert step == 3


def test_bracket_frame_deterministic():
    heis = catalog_load("heisenberg")
    w1, _ = bracket_frame(heis, np.array([0.2, -0.1, 0.3]))
    w2, _ = bracket_frame(heis, np.array([0.2, -0.1, 0.3]))
    assert [w.leaves for w in w1] == [w.leaves for w in w2]


def test_not_bracket_generating():
    x0, x1 = state_symbols(2)
    f = SymbolicField([sp.Float(1), sp.Float(0)], coords=(x0, x1))
    sys2 = ControlSystem("flat", [f])
    with pytest.raises(NotBracketGeneratingError):
        bracket_frame(sys2, np.zeros(2), max_depth=3)


def test_catalog():
    names = catalog_names()
    assert "heisenberg" in names and "martinet" in names
    assert catalog_load("heisenberg") is catalog_load("heisenberg")
    al = catalog_load("agrachev_lee(4)")
    assert al.n == 2 and al.d == 2 and not al.is_driftless
    from horizon import ConfigError

    with pytest.raises(ConfigError):
        catalog_load("nope")


def test_dynamics_and_jacobian():
    al = catalog_load("agrachev_lee(3)")
    x = np.array([0.5, 0.2])
    u = np.array([1.0, 2.0])
    # drift (0, x1^2) + u1 (1,0) + u2 (0, x1^3)
    assert np.allclose(al.dynamics(x, u), [1.0, 0.25 + 2 * 0.125])
    eps = 1e-6
    J = al.dynamics_jacobian(x, u)
    for j in range(2):
        ep, em = x.copy(), x.copy()
        ep[j] += eps
        em[j] -= eps
        col = (al.dynamics(ep, u) - al.dynamics(em, u)) / (2 * eps)
        assert np.allclose(J[:, j], col, atol=1e-7)


def test_system_json_roundtrip():
    heis = catalog_load("heisenberg")
    text = system_to_json(heis)
    back = system_from_json(text)
    rng = np.random.default_rng(1)
    for _ in range(5):
        pt = rng.normal(size=3)
        assert np.allclose(back.field_values(pt), heis.field_values(pt))
    assert system_to_json(back) == text  # deterministic


def test_displacement_wraps_periodic():
    uni = catalog_load("unicycle")
    a = np.array([0.0, 0.0, 3.1])
    b = np.array([0.0, 0.0, -3.1])
    d = displacement(uni, a, b)
    assert abs(d[2] - (2 * np.pi - 6.2)) < 1e-12
    heis = catalog_load("heisenberg")
    assert np.allclose(displacement(heis, a, b), b - a)
