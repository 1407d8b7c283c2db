import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vvcdesign.errors import InjectionError
from vvcdesign.linmodels import build_ldf
from vvcdesign.network import bundled_feeder, feeder_from_dict
from vvcdesign.powerflow import Injection, PfConfig, power_mismatch, solve_pf, solve_pf_batch, solve_pf_many


def quadratic_v(p, q, r, x, v0=1.0):
    """Receiving-end magnitude of one line from the biquadratic in |v|^2 (net injection p, q)."""
    b = 2 * (p * r + q * x) + v0**2
    c = (r**2 + x**2) * (p**2 + q**2)
    return np.sqrt((b + np.sqrt(b * b - 4 * c)) / 2)


def newton_pf(net, p, q, tol=1e-13, max_iter=30):
    """Reference Newton-Raphson on the bus admittance matrix, polar unknowns, numerical Jacobian."""
    n = net.n
    Y = np.zeros((n + 1, n + 1), dtype=complex)
    for br in net.branches:
        y = 1.0 / complex(br.r, br.x)
        a, b = br.from_index, br.to_index
        Y[a, a] += y
        Y[b, b] += y
        Y[a, b] -= y
        Y[b, a] -= y
    S = p + 1j * q

    def resid(x):
        V = np.concatenate([[net.head_voltage], x[n:] * np.exp(1j * x[:n])])
        mis = (V * np.conj(Y @ V))[1:] - S
        return np.concatenate([mis.real, mis.imag])

    x = np.concatenate([np.zeros(n), np.full(n, net.head_voltage)])
    for _ in range(max_iter):
        f = resid(x)
        if np.max(np.abs(f)) < tol:
            break
        h = 1e-7
        J = np.column_stack([(resid(x + h * e) - resid(x - h * e)) / (2 * h) for e in np.eye(2 * n)])
        x = x - np.linalg.solve(J, f)
    assert np.max(np.abs(resid(x))) < 1e-11
    return x[n:]


def test_flat_profile_at_zero_injection(ieee33):
    sol = solve_pf(ieee33, Injection.zeros(ieee33.n))
    assert sol.converged and sol.iterations == 1
    assert np.all(sol.v == 1.0)


def test_two_bus_load_matches_quadratic(two_bus):
    sol = solve_pf(two_bus, Injection(np.array([-0.1]), np.array([-0.05])))
    assert sol.converged
    assert sol.v[0] == pytest.approx(quadratic_v(-0.1, -0.05, 0.01, 0.02), abs=1e-10)
    assert sol.v[0] == pytest.approx(0.9979948521, abs=1e-9)


def test_two_bus_generation_raises_voltage(two_bus):
    sol = solve_pf(two_bus, Injection(np.array([0.1]), np.array([0.0])))
    assert sol.v[0] > 1.0
    assert sol.v[0] == pytest.approx(quadratic_v(0.1, 0.0, 0.01, 0.02), abs=1e-10)


@pytest.mark.parametrize("name", ["two_bus", "chain5", "ieee33"])
def test_sweep_matches_newton(name):
    net = bundled_feeder(name)
    rng = np.random.default_rng(3)
    scale = 0.3 / net.n
    p = rng.uniform(-2, 1, net.n) * scale
    q = rng.uniform(-1, 1, net.n) * scale
    sol = solve_pf(net, Injection(p, q))
    assert sol.converged
    assert np.max(np.abs(sol.v - newton_pf(net, p, q))) <= 1e-8


def test_converged_profile_balances_power(ieee33):
    rng = np.random.default_rng(0)
    p, q = -rng.uniform(0, 0.02, 33), -rng.uniform(0, 0.01, 33)
    sol = solve_pf(ieee33, Injection(p, q))
    assert sol.converged and np.all(sol.v > 0)
    assert sol.max_mismatch <= PfConfig().tol
    assert np.max(power_mismatch(ieee33, sol.V[:, None], (p + 1j * q)[:, None])) <= 1e-10


def test_batch_matches_single(chain5):
    rng = np.random.default_rng(1)
    P, Q = rng.uniform(-0.1, 0.05, (7, 5)), rng.uniform(-0.05, 0.05, (7, 5))
    batch = solve_pf_batch(chain5, P, Q)
    many = solve_pf_many(chain5, P, Q, workers=3, chunk=2)
    for i in range(7):
        single = solve_pf(chain5, Injection(P[i], Q[i]))
        assert np.array_equal(batch.v[i], single.v)
        assert np.array_equal(many.v[i], single.v)


def test_nonconvergence_is_reported(two_bus):
    # far beyond the line's loadability: no real solution exists
    sol = solve_pf(two_bus, Injection(np.array([-9.0]), np.array([-9.0])))
    assert not sol.converged


@pytest.mark.parametrize("p,q", [([11.0], [0.0]), ([0.0], [np.nan]), ([0.0, 0.0], [0.0, 0.0])])
def test_bad_injections_rejected(two_bus, p, q):
    with pytest.raises(InjectionError):
        solve_pf(two_bus, Injection(np.array(p), np.array(q)))


def _path_to_head(net, i):
    out, j = [], i + 1
    while j != 0:
        out.append(j - 1)
        j = net.parent[j - 1]
    return out


@settings(max_examples=40, deadline=None)
@given(node=st.integers(0, 32), dq=st.floats(1e-4, 0.05), seed=st.integers(0, 10_000))
def test_reactive_injection_raises_path_voltages(ieee33, node, dq, seed):
    rng = np.random.default_rng(seed)
    p = -rng.uniform(0, 0.03, 33)
    q = -rng.uniform(0, 0.015, 33)
    v0 = solve_pf(ieee33, Injection(p, q)).v
    q2 = q.copy()
    q2[node] += dq
    v1 = solve_pf(ieee33, Injection(p, q2)).v
    path = _path_to_head(ieee33, node)
    assert np.all(v1[path] >= v0[path] - 1e-12)


def _lossless(name):
    d = bundled_feeder(name).to_dict()
    for br in d["branches"]:
        br["r_pu"] = 0.0
    return feeder_from_dict(d)


@pytest.mark.parametrize("name", ["chain5", "ieee33"])
def test_lossless_limit_matches_ldf(name):
    net = _lossless(name)
    ldf = build_ldf(net)
    rng = np.random.default_rng(5)
    for _ in range(10):
        # total injection of at most 0.01 p.u. spread over the feeder
        p = rng.uniform(-1, 1, net.n) * 0.01 / net.n
        q = rng.uniform(-1, 1, net.n) * 0.01 / net.n
        v = solve_pf(net, Injection(p, q)).v
        assert np.max(np.abs(v - ldf.evaluate(p, q))) <= 1e-4
