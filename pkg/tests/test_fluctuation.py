import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qfluct.algebra import Interval, LocalOperator, identity, pauli, translate, word
from qfluct.dynamics import tfim
from qfluct.errors import MixingCertificateError, WindowCapError
from qfluct.fluctuation import (block_normalization, block_sequence, bolthausen_residual,
                                characteristic_function, characteristic_grid, clt_prediction,
                                clt_study, covariance_data, covariance_t,
                                determine_phase_convention, exp_commutator_checks,
                                fluctuation_operator, symplectic_s, variance_sequence)
from qfluct.states import FCSSpec, FCSState, GibbsState, ProductState

from conftest import random_local

seeds = st.integers(0, 2 ** 32 - 1)


def fcs_resolvent_t(spec, q, r):
    """``t(q, r)`` for single-site ``q, r`` from the bond-space resolvent.

    With ``L`` the dual transfer map and ``P(X) = tr(rho X) 1``,
    ``sum_{g>=0} (L^g - P) = (1 - L + P)^{-1} - P``.
    """
    K, rho = spec.kraus, spec.rho
    k = spec.bond_dim

    def E(a, X):
        return sum(a[i, j] * K[i].conj().T @ X @ K[j] for i in range(len(K)) for j in range(len(K)))

    basis = [np.eye(1, k * k, i).reshape(k, k) for i in range(k * k)]
    Lmat = np.array([E(np.eye(len(K)), B).ravel() for B in basis]).T
    Pmat = np.array([(np.trace(rho @ B) * np.eye(k)).ravel() for B in basis]).T
    G = np.linalg.inv(np.eye(k * k) - Lmat + Pmat) - Pmat

    def phi(X):
        return np.trace(rho @ X)

    one = np.eye(k)
    mq, mr = phi(E(q, one)), phi(E(r, one))
    local = phi(E(q @ r, one)) - mq * mr
    right = phi(E(r, (G @ E(q, one).ravel()).reshape(k, k)))   # q to the right of r
    left = phi(E(q, (G @ E(r, one).ravel()).reshape(k, k)))    # q to the left of r
    return local + right + left


# fluctuation operators ------------------------------------------------------------

def test_fluctuation_of_identity_vanishes():
    f = fluctuation_operator(identity(0), 3, ProductState.tracial())
    assert np.abs(f.realized.matrix).max() <= 1e-14


def test_fluctuation_single_site():
    state = ProductState.bloch(0.2, 0.0, 0.5)
    q = pauli("z")
    f = fluctuation_operator(q, 0, state)
    assert np.allclose(f.realized.matrix, q.matrix - 0.5 * np.eye(2))
    assert f.window == Interval(0, 0)


@pytest.mark.parametrize("state", [ProductState.bloch(0.3, 0.1, 0.4), FCSState(FCSSpec.random(2, 2, seed=2)),
                                   GibbsState(tfim(), 0.6, buffer=1)], ids=["product", "fcs", "gibbs"])
def test_fluctuation_centered_and_bounded(state, rng):
    for N in (0, 1, 2):
        q = random_local(rng, 0, 1)
        f = fluctuation_operator(q, N, state)
        assert abs(state.expect(f.realized)) <= 1e-10
        assert f.realized.is_hermitian(1e-12)
        assert f.realized.norm() <= math.sqrt(2 * N + 1) * 2 * q.norm() + 1e-10


def test_fluctuation_guards():
    with pytest.raises(ValueError):
        fluctuation_operator(pauli("z"), -1, ProductState.tracial())
    with pytest.raises(WindowCapError):
        fluctuation_operator(pauli("z"), 5, ProductState.tracial(), max_window_dim=2 ** 8)


# covariance form ------------------------------------------------------------------

def test_covariance_tracial():
    v = covariance_t(ProductState.tracial(), pauli("z"), pauli("z"))
    assert v.value == pytest.approx(1) and v.tail == 0


def test_covariance_deterministic_observable():
    assert covariance_t(ProductState.z_up(), pauli("z"), pauli("z")).value == pytest.approx(0, abs=1e-15)


@pytest.mark.parametrize("seed", [0, 7, 21])
def test_covariance_fcs_resolvent(seed, rng):
    spec = FCSSpec.random(2, 2, seed=seed)
    q = random_local(rng, 0, 0)
    r = random_local(rng, 0, 0)
    v = covariance_t(FCSState(spec), q, r, tail_tol=1e-12)
    ref = fcs_resolvent_t(spec, q.matrix, r.matrix)
    assert abs(v.value - ref) <= 1e-8
    assert v.certified and v.tail <= 1e-12


def test_covariance_classical_chain():
    # variance of the symmetric two-state chain: (1 + l)/(1 - l) with l = 1 - 2p
    p = 0.25
    lam = 1 - 2 * p
    v = covariance_t(FCSState(FCSSpec.classical_chain(p)), pauli("z"), pauli("z"), 1e-12)
    assert v.value.real == pytest.approx((1 + lam) / (1 - lam), abs=1e-10)


def test_covariance_needs_mixing():
    with pytest.raises(MixingCertificateError):
        covariance_t(FCSState(FCSSpec.periodic()), pauli("z"), pauli("z"))


def test_covariance_gibbs_estimate():
    state = GibbsState(tfim(), 0.5, buffer=1)
    v = covariance_t(state, pauli("x"), pauli("x"))
    assert not v.certified
    assert v.value.real > 0 and abs(v.value.imag) <= 1e-10
    assert v.tail <= 1e-8


def test_covariance_extended_support():
    # a two-site observable sees its own overlapping translates
    q = word("z z")
    v = covariance_t(ProductState.diagonal([0.75, 0.25]), q, q)
    mu = 0.25  # <z> = 0.5, <zz> = 0.25
    # k = 0: 1 - mu^2; k = +-1: <z z^2 z> - mu^2 = <z>^2 - mu^2
    assert v.value.real == pytest.approx((1 - mu ** 2) + 2 * (0.25 - mu ** 2))


@pytest.mark.parametrize("kind", ["fcs", "product"])
@settings(max_examples=15)
@given(seed=seeds)
def test_covariance_matrix_invariants(kind, seed):
    rng = np.random.default_rng(seed)
    if kind == "fcs":
        state = FCSState(FCSSpec.random(2, 2, seed=seed % 997))
    else:
        m = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        m = m @ m.conj().T
        state = ProductState(m / np.trace(m))
    gens = [random_local(rng, 0, 0), random_local(rng, 0, 1), random_local(rng, 1, 1)]
    cov = covariance_data(state, gens, 1e-12)
    t = cov.t_matrix
    assert np.abs(t - t.conj().T).max() <= 1e-9
    assert cov.min_eigenvalue() >= -1e-9
    assert np.array_equal(cov.sigma_matrix, -cov.sigma_matrix.T)
    assert cov.consistency_residual() <= 1e-9
    assert np.all(np.abs(cov.sigma_matrix) <= 2 * np.sqrt(np.outer(np.diag(t).real, np.diag(t).real)) + 1e-9)


# symplectic form -------------------------------------------------------------------

def test_symplectic_self_vanishes(rng):
    q = random_local(rng, 0, 1)
    v = symplectic_s(FCSState(FCSSpec.random(2, 2, seed=1)), q, q)
    assert abs(v.s) <= 1e-12


def test_symplectic_polarized():
    v = symplectic_s(ProductState.z_up(), pauli("x"), pauli("y"))
    assert v.s == pytest.approx(2j) and v.sigma == pytest.approx(2)
    assert v.real_residual <= 1e-12


def test_symplectic_tracial_vanishes():
    assert symplectic_s(ProductState.tracial(), pauli("x"), pauli("y")).sigma == 0


@given(seeds)
def test_symplectic_antisymmetric(seed):
    rng = np.random.default_rng(seed)
    state = FCSState(FCSSpec.random(2, 2, seed=seed % 101))
    q, r = random_local(rng, 0, 1), random_local(rng, 0, 0)
    a, b = symplectic_s(state, q, r), symplectic_s(state, r, q)
    assert abs(a.sigma + b.sigma) <= 1e-12
    assert a.real_residual <= 1e-9


# characteristic functions ---------------------------------------------------------

@pytest.mark.parametrize("T", [0.0, 0.4, 1.3, 2.9])
def test_characteristic_two_point(T):
    val = characteristic_function(ProductState.tracial(), [pauli("z")], T, 0, method="dense")
    assert val == pytest.approx(math.cos(T), abs=1e-14)


def test_characteristic_at_zero(rng):
    state = FCSState(FCSSpec.aklt())
    gens = [random_local(rng, 0, 0, d=3), random_local(rng, 0, 1, d=3)]
    assert characteristic_function(state, gens, 0.0, 1) == 1


def test_characteristic_commuting_classical():
    p = np.array([0.7, 0.3])
    state = ProductState.diagonal(p)
    f1, f2 = np.array([1.0, -1.0]), np.array([2.0, 0.5])
    gens = [pauli("z"), LocalOperator(Interval(0, 0), np.diag(f2))]
    g = f1 - p @ f1 + f2 - p @ f2
    T_grid = [0.3, 0.9, 1.7]
    for N in (1, 2):
        n = 2 * N + 1
        oracle = [(p @ np.exp(1j * T * g / math.sqrt(n))) ** n for T in T_grid]
        assert np.allclose(characteristic_grid(state, gens, T_grid, N, "dense"), oracle, atol=1e-12)
        assert np.allclose(characteristic_grid(state, gens, T_grid, N, "product"), oracle, atol=1e-12)


def test_characteristic_routes_agree_noncommuting():
    state = ProductState.bloch(0.3, 0.5, -0.2)
    gens = [pauli("x"), pauli("z"), pauli("y")]
    T_grid = [0.5, 1.5]
    a = characteristic_grid(state, gens, T_grid, 2, "dense")
    b = characteristic_grid(state, gens, T_grid, 2, "product")
    assert np.allclose(a, b, atol=1e-12)


def test_characteristic_product_route_restrictions():
    with pytest.raises(ValueError):
        characteristic_grid(ProductState.tracial(), [word("z z")], [1.0], 1, "product")
    with pytest.raises(ValueError):
        characteristic_grid(ProductState.tracial(), [pauli("z")], [1.0], 1, "nope")


def test_characteristic_generators_on_different_sites():
    # z at 0 and -z at 1: the interior sites cancel and only the two ends remain
    gens = [pauli("z", 0), -1.0 * pauli("z", 1)]
    with pytest.raises(ValueError):
        characteristic_grid(ProductState.tracial(), gens, [1.0], 1, "product")
    T_grid = np.array([0.4, 1.3])
    for N in (1, 3):
        vals = characteristic_grid(ProductState.tracial(), gens, T_grid, N)
        assert np.allclose(vals, np.cos(T_grid / math.sqrt(2 * N + 1)) ** 2, atol=1e-12)


@pytest.mark.parametrize("kind", ["fcs", "gibbs"])
@given(seed=seeds, T=st.floats(-3, 3))
def test_characteristic_bounded(kind, seed, T):
    rng = np.random.default_rng(seed)
    state = FCSState(FCSSpec.random(2, 2, seed=seed % 53)) if kind == "fcs" else GibbsState(tfim(), 0.4, buffer=1)
    gens = [random_local(rng, 0, 0), random_local(rng, 0, 1)]
    assert abs(characteristic_function(state, gens, T, 1)) <= 1 + 1e-10


# CLT predictions and studies ------------------------------------------------------

def test_phase_convention_selected():
    pc = determine_phase_convention()
    assert pc.sign in (1, -1)
    chosen, other = (pc.errors_plus, pc.errors_minus) if pc.sign == 1 else (pc.errors_minus, pc.errors_plus)
    assert all(a < b for a, b in zip(chosen, other))
    assert all(b < a for a, b in zip(chosen, chosen[1:]))


def test_prediction_reversal_flips_phase():
    state = ProductState.bloch(0.0, 1.0, 0.0)
    gens = [pauli("z"), pauli("x")]
    T = np.array([0.5, 1.0, 2.0])
    a = clt_prediction(covariance_data(state, gens), T)
    b = clt_prediction(covariance_data(state, gens[::-1]), T)
    assert np.allclose(np.abs(a), np.abs(b)) and np.allclose(a, np.conj(b))
    assert np.all(np.abs(a) <= 1)


def test_clt_single_generator_form():
    cov = covariance_data(ProductState.tracial(), [pauli("z")])
    assert clt_prediction(cov, [1.0])[0] == pytest.approx(math.exp(-0.5))


def test_clt_closed_form_large_N():
    rep = clt_study(ProductState.tracial(), [pauli("z")], np.linspace(-3, 3, 25), [10, 100, 1000, 10000])
    assert rep.method == "product"
    assert rep.sup_errors[-1] <= 0.5 / math.sqrt(10000)
    assert rep.decreasing()
    assert rep.rate == pytest.approx(-1.0, abs=0.05)


def test_clt_kernel_direction():
    q = pauli("z", 0) - pauli("z", 1)
    rep = clt_study(ProductState.tracial(), [q], [0.5, 1.0, 2.0], [1, 2, 3, 4], method="dense")
    assert rep.t_total == pytest.approx(0, abs=1e-12)
    assert np.allclose(rep.prediction, 1)
    assert rep.decreasing()
    assert rep.sup_errors[-1] < 0.5


def test_clt_noncommuting_small():
    rep = clt_study(ProductState.tracial(), [pauli("x"), pauli("z")], [0.5, 1.0, 1.5], [1, 2, 3],
                    method="dense")
    assert rep.decreasing()
    doc = rep.to_dict()
    assert doc["phase_sign"] == rep.phase_sign and len(doc["values"]) == 3


# Bolthausen residual --------------------------------------------------------------

def test_bolthausen_zero_at_origin(rng):
    state = FCSState(FCSSpec.random(2, 2, seed=8))
    q, r = random_local(rng, 0, 0), random_local(rng, 0, 0)
    assert abs(bolthausen_residual(state, q, r, 0.0, 2)) <= 1e-12


@pytest.mark.parametrize("T", [0.3, 1.0, 2.2])
def test_bolthausen_stein_classical(T):
    N = 3
    n = 2 * N + 1
    a = 2 * T / math.sqrt(n)
    F = math.cos(a) ** n
    dF = -n * math.cos(a) ** (n - 1) * math.sin(a) * 2 / math.sqrt(n)
    res = bolthausen_residual(ProductState.tracial(), pauli("z"), pauli("z"), T, N)
    assert res == pytest.approx(dF + 4 * T * F, abs=1e-12)


def test_bolthausen_shrinks_gibbs():
    state = GibbsState(tfim(), 0.5, buffer=1)
    q, r = pauli("z"), pauli("x")
    cov = covariance_data(state, [q, r])
    small = abs(bolthausen_residual(state, q, r, 1.0, 2, cov))
    large = abs(bolthausen_residual(state, q, r, 1.0, 5, cov))
    assert large < small


# exponential commutator inequalities ------------------------------------------------

def test_exp_commutator_pauli_pair():
    out = exp_commutator_checks(pauli("x"), pauli("z"), strict=True)
    assert out.lhs1 < out.rhs1 < out.rhs2


def test_exp_commutator_commuting():
    out = exp_commutator_checks(pauli("z"), 2.0 * pauli("z"))
    assert max(out) <= 1e-15


def test_exp_commutator_large_norm_counterexample():
    # the middle inequality needs small norms: for ||B|| = 3 it fails on this pair
    a = LocalOperator(Interval(0, 0), np.array([[1.0, 0], [0, -1.0]]))
    b = LocalOperator(Interval(0, 0), 3 * np.array([[0, 1.0], [1.0, 0]]))
    out = exp_commutator_checks(a, b)
    assert out.lhs1 > out.rhs1 + 0.1
    with pytest.raises(AssertionError):
        exp_commutator_checks(a, b, strict=True)


# block sequence and normalization ---------------------------------------------------

def test_block_sequence_monotone():
    Ns = np.unique(np.logspace(0, 6, 400).astype(int))
    ms = [block_sequence(int(N)) for N in Ns]
    assert all(b >= a for a, b in zip(ms, ms[1:]))


def test_block_sequence_growth_conditions():
    for N in (10 ** 3, 10 ** 4, 10 ** 5, 10 ** 6, 10 ** 9):
        n = 2 * N + 1
        assert math.exp(-block_sequence(N)) * math.sqrt(n) < 1
    for N in (10 ** 4, 10 ** 5, 10 ** 6, 10 ** 9):
        assert block_sequence(N) / (2 * N + 1) ** 0.25 < 0.5
    vals = [math.exp(-block_sequence(10 ** e)) * math.sqrt(2 * 10 ** e + 1) for e in (3, 30, 300)]
    assert vals[-1] < vals[0]


def test_block_sequence_rejects_zero():
    with pytest.raises(ValueError):
        block_sequence(0)


def test_block_normalization_approaches_variance():
    state = FCSState(FCSSpec.classical_chain(0.25))
    t = covariance_t(state, pauli("z"), pauli("z"), 1e-12).value.real
    devs = [abs(block_normalization(state, pauli("z"), N) / ((2 * N + 1) * t) - 1)
            for N in (10, 100, 1000, 10000)]
    assert all(b < a for a, b in zip(devs, devs[1:]))
    assert devs[-1] < 0.05


def test_block_normalization_product_state():
    state = ProductState.tracial()
    assert block_normalization(state, pauli("z"), 50) == pytest.approx(101)


def test_variance_sequence_product():
    v = variance_sequence(ProductState.diagonal([0.6, 0.4]), pauli("z"), [0, 1, 2, 3])
    assert np.allclose(v, 1 - 0.2 ** 2)


def test_variance_sequence_fcs_converges():
    spec = FCSSpec.classical_chain(0.25)
    state = FCSState(spec)
    v = variance_sequence(state, pauli("z"), [1, 2, 3, 4, 5])
    t = covariance_t(state, pauli("z"), pauli("z"), 1e-12).value.real
    gaps = np.abs(v - t)
    assert np.all(np.diff(gaps) < 0)
