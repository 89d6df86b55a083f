"""Independent shooting oracle for vertical targets on the Heisenberg group.

Integrates the normal Hamiltonian flow (no code shared with the package
under test: plain numpy + scipy right-hand sides) and sweeps initial
covectors lam0 = (a, 0, omega) over a dense grid, polishing every grid cell
whose endpoint comes near the target with least squares.  Converged hits
are deduplicated and their energies frozen into data/heisenberg_shooting.json.

Fields (state (x, y, z)): X1 = (1, 0, -y/2), X2 = (0, 1, x/2).
Momenta functions: h1 = l1 - y/2 l3, h2 = l2 + x/2 l3.
Hamiltonian H = (h1^2 + h2^2)/2; the control energy of the unit-time
normal geodesic is J2 = 2 H (constant along the flow).

Run as a script to regenerate the table:  python3 tests/oracle_shooting.py
"""

import json
import pathlib

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import least_squares

TARGET = np.array([0.0, 0.0, 0.5])
DATA_PATH = pathlib.Path(__file__).parent / "data" / "heisenberg_shooting.json"


def normal_rhs(t, w):
    x, y, z, l1, l2, l3 = w
    h1 = l1 - 0.5 * y * l3
    h2 = l2 + 0.5 * x * l3
    return [
        h1,
        h2,
        -0.5 * y * h1 + 0.5 * x * h2,
        -0.5 * h2 * l3,
        0.5 * h1 * l3,
        0.0,
    ]


def shoot(a, omega, rtol=1e-12, atol=1e-14):
    w0 = [0.0, 0.0, 0.0, a, 0.0, omega]
    sol = solve_ivp(normal_rhs, (0.0, 1.0), w0, rtol=rtol, atol=atol, dense_output=False)
    return sol.y[:3, -1]


def energy_of(a, omega):
    # J2 = 2 H at t=0 with x=y=0: h = (a, 0)
    return a * a


def miss(params):
    a, omega = params
    return shoot(a, omega) - TARGET


def sweep(a_grid=None, omega_grid=None, coarse_tol=0.2):
    """Dense sweep + least-squares polish; returns deduplicated hits."""
    if a_grid is None:
        a_grid = np.linspace(0.2, 6.0, 45)
    if omega_grid is None:
        omega_grid = np.linspace(0.5, 24.0, 95)
    seeds = []
    for a in a_grid:
        for om in omega_grid:
            d = np.linalg.norm(shoot(a, om, rtol=1e-8, atol=1e-10) - TARGET)
            if d < coarse_tol:
                seeds.append((a, om, d))
    hits = []
    for a, om, _ in seeds:
        res = least_squares(miss, [a, om], xtol=1e-14, ftol=1e-14, gtol=1e-14)
        if np.linalg.norm(res.fun) > 1e-9:
            continue
        a_fit, om_fit = abs(res.x[0]), abs(res.x[1])
        if not any(abs(h["omega"] - om_fit) < 0.1 and abs(h["a"] - a_fit) < 0.05 for h in hits):
            hits.append(
                {
                    "a": float(a_fit),
                    "omega": float(om_fit),
                    "energy": float(energy_of(a_fit, om_fit)),
                    "residual": float(np.linalg.norm(res.fun)),
                }
            )
    hits.sort(key=lambda h: h["energy"])
    return hits


def main():
    hits = sweep()
    table = {
        "system": "heisenberg",
        "target": TARGET.tolist(),
        "description": "energies of unit-time normal geodesics from the origin "
        "to the target, from a dense covector sweep of the Hamiltonian flow",
        "records": hits,
    }
    DATA_PATH.parent.mkdir(exist_ok=True)
    DATA_PATH.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(hits)} records to {DATA_PATH}")
    for h in hits:
        print(f"  omega={h['omega']:.6f}  energy={h['energy']:.10f}  residual={h['residual']:.2e}")


if __name__ == "__main__":
    main()
