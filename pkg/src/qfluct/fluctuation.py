"""Fluctuation operators, covariance and symplectic forms, and CLT diagnostics."""
from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .algebra import (Interval, LocalOperator, QuasiLocalObservable, embed, opnorm,
                      pauli, translate)
from .dynamics import MAX_WINDOW_DIM, EvolutionResult, loglinear_fit
from .errors import MixingCertificateError, WindowCapError
from .states.base import StateFunctional, _expect_embedded, gap_between
from .states.gibbs import GibbsState
from .states.product import ProductState

__all__ = [
    "FluctuationOperator", "CovarianceData", "CLTReport", "PhaseConvention", "SeriesValue",
    "fluctuation_operator", "covariance_t", "symplectic_s", "covariance_data",
    "characteristic_function", "characteristic_grid", "clt_prediction", "clt_study",
    "bolthausen_residual", "exp_commutator_checks", "block_sequence", "block_normalization",
    "determine_phase_convention", "variance_sequence",
]


NOISE_FLOOR = 1e-13


def _local(q):
    """Strictly local stand-in and the norm error it carries."""
    if isinstance(q, QuasiLocalObservable):
        return q.top, q.tail_bound
    if isinstance(q, EvolutionResult):
        return q.operator, q.truncation_error
    return q, 0.0


# fluctuation operators ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FluctuationOperator:
    """``(2N+1)^{-1/2} sum_{|j|<=N} (tau_j(q) - mean)`` realized on its window.

    ``shift`` is the constant actually subtracted per translate: it equals the
    state's expectation of the realized sum divided by ``2N+1``, which agrees
    with ``mean`` for exactly translation-invariant states.
    """

    base: LocalOperator
    N: int
    mean: complex
    shift: complex
    realized: LocalOperator
    tail: float = 0.0

    @property
    def window(self) -> Interval:
        return self.realized.support


def _sum_translates(q: LocalOperator, N: int, window: Interval) -> np.ndarray:
    S = np.zeros((q.d ** window.length,) * 2, dtype=complex)
    for j in range(-N, N + 1):
        S += embed(translate(q, j), window).matrix
    return S


def fluctuation_operator(q, N: int, state: StateFunctional,
                         max_window_dim: int = MAX_WINDOW_DIM) -> FluctuationOperator:
    if N < 0:
        raise ValueError("N must be nonnegative")
    q, tail = _local(q)
    window = Interval(q.support.lo - N, q.support.hi + N)
    if q.d ** window.length > max_window_dim:
        raise WindowCapError(f"fluctuation window {window} exceeds dimension cap {max_window_dim}")
    n = 2 * N + 1
    S = LocalOperator(window, _sum_translates(q, N, window), q.d)
    mean = state.expect(q)
    shift = state.expect(S) / n if not isinstance(state, ProductState) else mean
    realized = LocalOperator(window, (S.matrix - n * shift * np.eye(S.dim)) / math.sqrt(n), q.d)
    return FluctuationOperator(q, N, mean, shift, realized, tail * math.sqrt(n))


# covariance and symplectic forms ----------------------------------------------------

@dataclass(frozen=True)
class SeriesValue:
    """Value of a lattice series with a bound (or estimate) on its remainder."""

    value: complex
    tail: float
    K: int
    terms: tuple = ()
    certified: bool = True
    correction: complex = 0j

    def __iter__(self):
        return iter((self.value, self.tail))


def _correlation(state, q, r, k):
    """``phi(tau_k(q) r) - phi(q) phi(r)`` evaluated consistently within one window."""
    qk = translate(q, k)
    if isinstance(state, GibbsState):
        W = state.window_for(qk.support.hull(r.support))
        hull = qk.support.hull(r.support)
        rho = state.window_density(W, hull)
        return (_expect_embedded(rho, hull, qk @ r)
                - _expect_embedded(rho, hull, qk) * _expect_embedded(rho, hull, r))
    return state.truncated_correlation(qk, r)


def _gap(q, r, k):
    return gap_between(translate(q, k).support, r.support)


def covariance_t(state: StateFunctional, q, r, tail_tol: float = 1e-8,
                 k_max: int = 200, max_window_dim: int | None = None) -> SeriesValue:
    """``sum_k [phi(tau_k(q) r) - phi(q) phi(r)]`` with a remainder bound.

    With a mixing certificate the summation range is chosen so the certified
    geometric remainder is below ``tail_tol``. Gibbs states carry no
    certificate; the remainder is then extrapolated from a log-linear fit of
    the last computed terms and added to the value (``correction``), its size
    serving as the error estimate (``certified`` is False). The range grows
    until that estimate is below ``tail_tol`` or the windows reach
    ``max_window_dim`` (default: the state's dense-diagonalization cap).
    """
    q, tq = _local(q)
    r, tr = _local(r)
    trunc = 2 * (tq * r.norm() + q.norm() * tr + tq * tr)
    reach = max(abs(q.support.lo - r.support.hi), abs(q.support.hi - r.support.lo))
    terms = {0: _correlation(state, q, r, 0)}
    try:
        state.correlation_bound(q, r, 0)
        certified = True
    except MixingCertificateError:
        certified = False

    if certified:
        def side_tail(K, sign):
            # geometric remainder of the certificate beyond translate K
            g = _gap(q, r, sign * (K + 1))
            b0 = state.correlation_bound(q, r, g)
            if b0 == 0:
                return 0.0
            b1 = state.correlation_bound(q, r, g + 1)
            return b0 / (1 - b1 / b0) if b1 < b0 else float("inf")

        K = reach
        tail = side_tail(K, 1) + side_tail(K, -1)
        while tail >= tail_tol and K < k_max:
            K += 1
            tail = side_tail(K, 1) + side_tail(K, -1)
        for k in range(1, K + 1):
            for s in (k, -k):
                g = _gap(q, r, s)
                terms[s] = 0.0 if g >= 0 and state.correlation_bound(q, r, g) == 0 \
                    else _correlation(state, q, r, s)
        value = sum(terms.values())
        return SeriesValue(complex(value), float(tail + trunc * (2 * K + 1)), K,
                           tuple(sorted(terms.items())), True)

    # fitted tail for states without a certificate
    cap = max_window_dim or getattr(state, "dense_cap", MAX_WINDOW_DIM)
    K = 0
    tail, correction = float("inf"), 0.0
    while K < k_max:
        if isinstance(state, GibbsState) and any(
                q.d ** state.window_for(translate(q, s).support.hull(r.support)).length > cap
                for s in (K + 1, -K - 1)):
            break
        for s in (K + 1, -K - 1):
            terms[s] = _correlation(state, q, r, s)
        K += 1
        if K < 3:
            continue
        ks = list(range(max(1, K - 3), K + 1))
        mags = [max(abs(terms[k]), abs(terms[-k])) for k in ks]
        if all(m < NOISE_FLOOR for m in mags[-2:]):
            tail, correction = 0.0, 0.0
        else:
            slope, _, _ = loglinear_fit(ks, mags, floor=NOISE_FLOOR)
            if np.isfinite(slope) and slope < 0:
                rr = math.exp(slope)
                correction = (terms[K] + terms[-K]) * rr / (1 - rr)
                tail = abs(correction)
            else:
                tail, correction = float("inf"), 0.0
        if tail < tail_tol:
            break
    if not np.isfinite(tail):
        raise MixingCertificateError(
            f"correlations computed up to distance {K} do not show a decaying tail")
    value = sum(terms.values()) + correction
    return SeriesValue(complex(value), float(tail + trunc * (2 * K + 1)), K,
                       tuple(sorted(terms.items())), False, complex(correction))


@dataclass(frozen=True)
class SymplecticValue:
    s: complex
    sigma: float
    tail: float
    real_residual: float

    def __iter__(self):
        return iter((self.s, self.sigma))


def symplectic_s(state: StateFunctional, q, r, tail_tol: float = 1e-8) -> SymplecticValue:
    """``s = sum_k phi([tau_k(q), r])`` and the real form ``sigma = -i s``.

    For strictly local arguments only overlapping translates contribute, so
    the sum is finite; quasi-local inputs add their truncation error.
    """
    q, tq = _local(q)
    r, tr = _local(r)
    lo = r.support.lo - q.support.hi
    hi = r.support.hi - q.support.lo
    s = 0j
    for k in range(lo, hi + 1):
        qk = translate(q, k)
        s += state.pair_expect(qk, r) - state.pair_expect(r, qk)
    tail = 2 * (tq * r.norm() + q.norm() * tr) * (hi - lo + 1)
    return SymplecticValue(complex(s), float((-1j * s).real), float(tail), abs(s.real))


@dataclass(frozen=True, eq=False)
class CovarianceData:
    """Gram matrices of the covariance form ``t`` and the real symplectic form ``sigma``."""

    generators: tuple
    t_matrix: np.ndarray
    sigma_matrix: np.ndarray
    tail_bounds: np.ndarray
    certified: bool = True

    @property
    def size(self) -> int:
        return self.t_matrix.shape[0]

    def consistency_residual(self) -> float:
        """Largest ``|Im t_ij - sigma_ij / 2|``."""
        return float(np.abs(self.t_matrix.imag - self.sigma_matrix / 2).max(initial=0.0))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.t_matrix).min())

    def form(self, f, g=None):
        """``(t(f, g), sigma(f, g))`` for coefficient vectors over the generators."""
        f = np.asarray(f, dtype=float)
        g = f if g is None else np.asarray(g, dtype=float)
        return complex(f @ self.t_matrix @ g), float(f @ self.sigma_matrix @ g)


def covariance_data(state: StateFunctional, generators, tail_tol: float = 1e-8) -> CovarianceData:
    gens = tuple(generators)
    m = len(gens)
    t = np.zeros((m, m), complex)
    sig = np.zeros((m, m))
    tails = np.zeros((m, m))
    certified = True
    for i in range(m):
        for j in range(i, m):
            v = covariance_t(state, gens[i], gens[j], tail_tol)
            certified &= v.certified
            t[i, j] = v.value
            tails[i, j] = tails[j, i] = v.tail
            if i == j:
                t[i, i] = v.value.real
            else:
                t[j, i] = np.conj(v.value)
                sv = symplectic_s(state, gens[i], gens[j], tail_tol)
                sig[i, j], sig[j, i] = sv.sigma, -sv.sigma
    return CovarianceData(gens, t, sig, tails, certified)


# phase convention ------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseConvention:
    """Sign ``c`` in ``exp(-i c T^2/2 sum_{k<l} sigma_kl)`` fixed from dense evaluations."""

    sign: int
    N_list: tuple
    errors_plus: tuple
    errors_minus: tuple

    def describe(self) -> dict:
        return {"sign": self.sign, "formula": "exp(-T^2/2 t(sum Q, sum Q)) * exp(-i*sign*T^2/2 * sum_{k<l} sigma(Q_k, Q_l))",
                "sigma": "-i * sum_k phi([tau_k(Q), R])"}


@lru_cache(maxsize=1)
def determine_phase_convention(N_list=(2, 3, 4, 5), T_grid=(0.5, 1.0, 1.5)) -> PhaseConvention:
    """Pick the phase sign matching dense evaluations for a state with nonzero sigma.

    Uses the product state polarized along +y with generators sigma_z and
    sigma_x, for which sigma = 2 and both fluctuation operators are real
    matrices; the chosen sign is the one whose prediction error is smaller at
    every N and decreases along the N list.
    """
    state = ProductState.bloch(0.0, 1.0, 0.0)
    gens = [pauli("z"), pauli("x")]
    cov = covariance_data(state, gens)
    errs = {1: [], -1: []}
    for N in N_list:
        vals = characteristic_grid(state, gens, T_grid, N, method="dense")
        for c in (1, -1):
            pred = clt_prediction(cov, T_grid, c)
            errs[c].append(float(np.max(np.abs(vals - pred))))
    plus, minus = np.array(errs[1]), np.array(errs[-1])

    def good(e):
        return bool(np.all(np.diff(e) < 0))

    if np.all(plus < minus) and good(plus):
        sign = 1
    elif np.all(minus < plus) and good(minus):
        sign = -1
    else:
        raise RuntimeError("dense evaluations do not single out a phase convention")
    return PhaseConvention(sign, tuple(N_list), tuple(errs[1]), tuple(errs[-1]))


# characteristic functions ---------------------------------------------------------

def _product_closed_form(state: ProductState, gens, T_grid, N):
    """Exact value for single-site generators on a product state.

    The unitaries factorize over sites, so regrouping by site gives
    ``[tr(rho prod_k exp(i s (q_k - mu_k)))]^(2N+1)`` with ``s = T/sqrt(2N+1)``.
    """
    n = 2 * N + 1
    eig = []
    for q in gens:
        mu = state.expect(q)
        w, V = np.linalg.eigh(q.matrix)
        eig.append((w - mu.real, V))
    out = []
    for T in T_grid:
        s = T / math.sqrt(n)
        M = np.eye(state.d, dtype=complex)
        for w, V in eig:
            M = M @ ((V * np.exp(1j * s * w)) @ V.conj().T)
        f = complex(np.trace(state.rho @ M))
        out.append(np.exp(n * np.log(f)) if f != 0 else 0.0)
    return np.array(out, dtype=complex)


def characteristic_grid(state: StateFunctional, generators, T_grid, N: int, method: str = "auto",
                        max_window_dim: int = 2 ** 12) -> np.ndarray:
    """``phi(prod_k exp(i T Q(k)_N))`` for every ``T`` in ``T_grid``.

    ``method`` is ``"dense"`` (exponentials of the realized fluctuation
    operators), ``"product"`` (closed form, product states with single-site
    generators only) or ``"auto"``.
    """
    T_grid = np.atleast_1d(np.asarray(T_grid, dtype=float))
    out = _characteristic_grid(state, generators, T_grid, N, method, max_window_dim)
    out[T_grid == 0] = 1.0  # the word is the unit
    return out


def _characteristic_grid(state, generators, T_grid, N, method, max_window_dim):
    gens = [_local(g)[0] for g in generators]
    # the closed form factorizes over sites only if all generators sit on one site
    single = len({(g.support.lo, g.support.hi) for g in gens}) == 1 and gens[0].support.length == 1
    if method == "auto":
        method = "product" if isinstance(state, ProductState) and single else "dense"
    if method == "product":
        if not (isinstance(state, ProductState) and single):
            raise ValueError("closed form needs a product state and generators on one common site")
        return _product_closed_form(state, [translate(g, -g.support.lo) for g in gens], T_grid, N)
    if method != "dense":
        raise ValueError(f"unknown method {method!r}")
    flucts = [fluctuation_operator(g, N, state, max_window_dim) for g in gens]
    window = flucts[0].window
    for f in flucts[1:]:
        window = window.hull(f.window)
    if gens[0].d ** window.length > max_window_dim:
        raise WindowCapError(f"window {window} exceeds dimension cap {max_window_dim}")
    rho = state.reduced_density(window)
    spectra = []
    for f in flucts:
        M = embed(f.realized, window).matrix
        if not np.any(M.imag):
            M = M.real
        spectra.append(np.linalg.eigh(M))
    out = np.empty(len(T_grid), dtype=complex)
    if len(spectra) == 1:
        (w, V), = spectra
        diag = np.sum(V.conj() * (rho @ V), axis=0).real
        for i, T in enumerate(T_grid):
            out[i] = np.sum(diag * np.exp(1j * T * w))
        return out
    if len(spectra) == 2:
        (w1, V1), (w2, V2) = spectra
        G = V1.conj().T @ V2
        Hm = V2.conj().T @ rho @ V1
        B = G * Hm.T
        for i, T in enumerate(T_grid):
            out[i] = np.exp(1j * T * w1) @ B @ np.exp(1j * T * w2)
        return out
    for i, T in enumerate(T_grid):
        U = np.eye(rho.shape[0], dtype=complex)
        for w, V in spectra:
            U = U @ ((V * np.exp(1j * T * w)) @ V.conj().T)
        out[i] = np.einsum("ij,ji->", rho, U)
    return out


def characteristic_function(state, generators, T: float, N: int, method: str = "auto") -> complex:
    return complex(characteristic_grid(state, generators, [T], N, method)[0])


def clt_prediction(cov: CovarianceData, T_grid, sign: int = 1, coeffs=None) -> np.ndarray:
    """Limit of the characteristic function for the ordered generator list in ``cov``."""
    T = np.asarray(T_grid, dtype=float)
    m = cov.size
    c = np.ones(m) if coeffs is None else np.asarray(coeffs, float)
    t_tot = float((c @ cov.t_matrix @ c).real)
    ordered = sum(c[k] * c[l] * cov.sigma_matrix[k, l] for k in range(m) for l in range(k + 1, m))
    return np.exp(-0.5 * T ** 2 * t_tot) * np.exp(-0.5j * sign * T ** 2 * ordered)


@dataclass(frozen=True)
class CLTReport:
    T_grid: tuple
    N_list: tuple
    values: np.ndarray
    prediction: np.ndarray
    sup_errors: tuple
    rate: float
    t_total: float
    sigma_ordered: float
    phase_sign: int
    tail: float
    method: str

    def decreasing(self, slack: float = 0.0) -> bool:
        e = np.asarray(self.sup_errors)
        return bool(np.all(e[1:] < e[:-1] + slack))

    def to_dict(self) -> dict:
        return {
            "T_grid": list(map(float, self.T_grid)), "N_list": list(self.N_list),
            "values": [[[float(z.real), float(z.imag)] for z in row] for row in self.values],
            "prediction": [[float(z.real), float(z.imag)] for z in self.prediction],
            "sup_errors": list(map(float, self.sup_errors)), "rate": _finite(self.rate),
            "t_total": self.t_total, "sigma_ordered": self.sigma_ordered,
            "phase_sign": self.phase_sign, "tail": self.tail, "method": self.method,
        }


def _finite(x):
    x = float(x)
    return x if math.isfinite(x) else None


def clt_study(state: StateFunctional, generators, T_grid, N_list, method: str = "auto",
              tail_tol: float = 1e-8, sign: int | None = None) -> CLTReport:
    """Compare characteristic functions with their Gaussian limit along ``N_list``.

    ``rate`` is the slope of ``log sup_error`` against ``log(2N+1)``.
    """
    gens = list(generators)
    if sign is None:
        sign = determine_phase_convention().sign
    cov = covariance_data(state, gens, tail_tol)
    T_grid = np.asarray(T_grid, dtype=float)
    pred = clt_prediction(cov, T_grid, sign)
    rows, sups = [], []
    for N in N_list:
        vals = characteristic_grid(state, gens, T_grid, N, method)
        rows.append(vals)
        sups.append(float(np.max(np.abs(vals - pred))))
    ns = 2 * np.asarray(N_list, float) + 1
    if len(N_list) >= 2:
        slope, _, _ = loglinear_fit(np.log(ns), sups, floor=1e-300)
    else:
        slope = float("nan")
    m = len(gens)
    ordered = float(sum(cov.sigma_matrix[k, l] for k in range(m) for l in range(k + 1, m)))
    used = method if method != "auto" else (
        "product" if isinstance(state, ProductState) and all(_local(g)[0].support.length == 1 for g in gens)
        else "dense")
    return CLTReport(tuple(T_grid), tuple(N_list), np.array(rows), pred, tuple(sups), slope,
                     float(np.sum(cov.t_matrix).real), ordered, sign,
                     float(np.max(np.abs(pred)) * 0.5 * np.max(T_grid ** 2) * cov.tail_bounds.sum()), used)


# diagnostics used in the convergence argument --------------------------------------

def bolthausen_residual(state: StateFunctional, q, r, T: float, N: int, cov: CovarianceData | None = None,
                        sign: int | None = None) -> complex:
    """``F'(T) + T (t(q+r, q+r) + i c sigma(q, r)) F(T)`` for ``F(T) = phi(e^{iTQ_N} e^{iTR_N})``.

    The derivative is exact: ``F'(T) = i phi(Q_N U_Q U_R) + i phi(U_Q R_N U_R)``.
    """
    if sign is None:
        sign = determine_phase_convention().sign
    if cov is None:
        cov = covariance_data(state, [q, r])
    qq, rr = _local(q)[0], _local(r)[0]
    fq, fr = fluctuation_operator(qq, N, state), fluctuation_operator(rr, N, state)
    window = fq.window.hull(fr.window)
    Q = embed(fq.realized, window).matrix
    R = embed(fr.realized, window).matrix
    rho = state.reduced_density(window)

    def expi(A):
        w, V = np.linalg.eigh(A)
        return (V * np.exp(1j * T * w)) @ V.conj().T

    UQ, UR = expi(Q), expi(R)
    UQR = UQ @ UR
    F = np.einsum("ij,ji->", rho, UQR)
    dF = 1j * np.einsum("ij,ji->", rho, Q @ UQR) + 1j * np.einsum("ij,ji->", rho, UQ @ R @ UR)
    t_tot = float(np.sum(cov.t_matrix).real)
    return complex(dF + T * (t_tot + 1j * sign * cov.sigma_matrix[0, 1]) * F)


ExpCommutatorChecks = namedtuple("ExpCommutatorChecks", "lhs1 rhs1 lhs2 rhs2")


def _holds(self, slack: float = 1e-12) -> bool:
    return self.lhs1 <= self.rhs1 + slack and self.lhs2 <= self.rhs2 + slack


ExpCommutatorChecks.holds = _holds


def exp_commutator_checks(a: LocalOperator, b: LocalOperator, strict: bool = False) -> ExpCommutatorChecks:
    """Norms in ``||e^{i(A+B)} - e^{iB} e^{iA}|| <= ||[A, e^{iB}]|| <= ||[A, B]||``.

    Returns ``(lhs1, rhs1, lhs2, rhs2)`` where ``rhs1 == lhs2``. With
    ``strict`` an ``AssertionError`` is raised on a violation beyond 1e-12.
    """
    if a.support != b.support:
        raise ValueError("operands must live on the same window")
    A, B = a.matrix, b.matrix

    def expi(M):
        w, V = np.linalg.eigh(M)
        return (V * np.exp(1j * w)) @ V.conj().T

    eA, eB, eAB = expi(A), expi(B), expi(A + B)
    lhs1 = opnorm(eAB - eB @ eA)
    mid = opnorm(A @ eB - eB @ A)
    rhs2 = opnorm(A @ B - B @ A)
    out = ExpCommutatorChecks(lhs1, mid, mid, rhs2)
    if strict and not out.holds():
        raise AssertionError(f"operator inequality violated: {out}")
    return out


def block_sequence(N: int) -> int:
    """Block length ``m(N)`` with ``e^{-m} sqrt(n) -> 0`` and ``n^{1/4}/m -> infinity``, ``n = 2N+1``.

    ``m = floor(log(n)/2) + 1 + max(0, floor(log log log n))``: the first two
    terms keep ``e^{-m} sqrt(n) < 1``, the slowly growing last term drives it
    to zero, and ``m`` stays logarithmic in ``n``.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    n = 2 * N + 1
    extra = 0
    ll = math.log(math.log(n))
    if ll > 0:
        extra = max(0, math.floor(math.log(ll)))
    return math.floor(0.5 * math.log(n)) + 1 + extra


def block_normalization(state: StateFunctional, q, N: int, m: int | None = None) -> float:
    """Blocked variance ``sum_{|k|<=N} 1/2 phi({tau_k(Q), Q_{k,N}})`` of the centered ``q``.

    ``Q_{k,N}`` sums the translates within distance ``m`` of ``k`` inside ``[-N, N]``.
    """
    q, _ = _local(q)
    if m is None:
        m = block_sequence(max(N, 1))
    L = min(m, 2 * N)
    C = {l: _correlation(state, q, q, l) for l in range(-L, L + 1)}
    total = 0.0
    for k in range(-N, N + 1):
        for j in range(max(-N, k - m), min(N, k + m) + 1):
            total += C[j - k].real
    return float(total)


def variance_sequence(state: StateFunctional, q, N_list) -> np.ndarray:
    """``phi(Q_N^2)`` for each ``N``, computed from the realized fluctuation operators."""
    out = []
    for N in N_list:
        f = fluctuation_operator(q, N, state)
        M = f.realized.matrix
        rho = state.reduced_density(f.window)
        out.append(np.einsum("ij,ji->", rho, M @ M).real)
    return np.array(out)
