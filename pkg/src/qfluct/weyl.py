"""Weyl algebra of normal fluctuations: quotient, CCR phases, quasifree state, dynamics, KMS.

The Weyl algebra is never represented on a Hilbert space. Words are reduced
with the CCR phase bookkeeping and evaluated through the closed-form
quasifree functional.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .algebra import LocalOperator, embed
from .dynamics import (Interaction, _to_eigenbasis, complex_evolve_eigenbasis,
                       evolve_infinite_approx, spectrum)
from .errors import ConditioningWarning, QuotientError
from .fluctuation import (CovarianceData, clt_prediction, covariance_data, covariance_t,
                          determine_phase_convention, fluctuation_operator)
from .states.base import StateFunctional
from .states.gibbs import GibbsState

__all__ = [
    "SymplecticSpace", "WeylWord", "QuasifreeState", "MicroContext", "MacroDynamics",
    "KMSReport", "quotient_reduce", "weyl_reduce", "weyl_multiply", "quasifree_expect",
    "positivity_matrix", "macro_dynamics", "continuity_defect", "kms_fluctuation_check",
]

KERNEL_RTOL = 1e-8


def _sign(sign):
    return determine_phase_convention().sign if sign is None else int(sign)


@dataclass(frozen=True, eq=False)
class SymplecticSpace:
    """Quotient of the real generator space by the kernel of ``t``.

    ``basis`` has orthonormal columns spanning the complement of the kernel
    in raw coefficient space; reduced coordinates are ``basis.T @ f``.
    """

    raw: CovarianceData
    basis: np.ndarray
    t_reduced: np.ndarray
    sigma_reduced: np.ndarray
    kernel: np.ndarray
    sign: int = 1

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def quotient(self, f) -> np.ndarray:
        return self.basis.T @ np.asarray(f, dtype=float)

    def include(self, g) -> np.ndarray:
        return self.basis @ np.asarray(g, dtype=float)

    def t(self, f, g=None) -> float:
        """Real part of the reduced covariance form (the part seen by the quasifree state)."""
        f = np.asarray(f, float)
        g = f if g is None else np.asarray(g, float)
        return float(f @ self.t_reduced.real @ g)

    def sigma(self, f, g) -> float:
        return float(np.asarray(f, float) @ self.sigma_reduced @ np.asarray(g, float))


def quotient_reduce(raw: CovarianceData, tol: float = 1e-9, sign: int | None = None) -> SymplecticSpace:
    """Remove the null directions of ``t`` and check that ``sigma`` descends.

    Real coefficient vectors see ``Re t``; a direction is dropped when its
    eigenvalue is below ``1e-8`` times the largest one.
    """
    t = raw.t_matrix
    if np.abs(t - t.conj().T).max(initial=0.0) > tol:
        raise QuotientError("t matrix is not Hermitian")
    if raw.size and np.linalg.eigvalsh(t).min() < -max(tol, float(raw.tail_bounds.max(initial=0.0))):
        raise QuotientError("t matrix is not positive semidefinite")
    w, V = np.linalg.eigh(t.real)
    top = w.max(initial=0.0)
    keep = w > KERNEL_RTOL * top if top > 0 else np.zeros(len(w), bool)
    basis, kernel = V[:, keep], V[:, ~keep]
    sig = raw.sigma_matrix
    if kernel.size:
        leak = np.abs(kernel.T @ sig).max()
        if leak > max(tol, 10 * float(raw.tail_bounds.max(initial=0.0))):
            raise QuotientError(f"sigma does not vanish on the kernel of t (residual {leak:.3e})")
    t_red = basis.T @ t @ basis
    s_red = basis.T @ sig @ basis
    s_red = 0.5 * (s_red - s_red.T)
    return SymplecticSpace(raw, basis, t_red, s_red, kernel, _sign(sign))


class WeylWord(tuple):
    """Ordered product ``W(f_1) ... W(f_m)``; the empty word is the unit."""

    def __new__(cls, letters=()):
        return super().__new__(cls, (np.asarray(f, dtype=float) for f in letters))

    def __mul__(self, other):
        return WeylWord(tuple(self) + tuple(other))

    def inverse(self) -> "WeylWord":
        return WeylWord(-f for f in reversed(self))


def weyl_multiply(a, b, space: SymplecticSpace):
    """Product of two reduced elements ``(vector, phase)``."""
    (fa, pa), (fb, pb) = a, b
    return fa + fb, pa * pb * np.exp(-0.5j * space.sign * space.sigma(fa, fb))


def weyl_reduce(word: WeylWord, space: SymplecticSpace, order: str = "left"):
    """``W(f_1)...W(f_m) = phase * W(sum f_k)``; returns ``(sum, phase)``.

    ``order`` selects the parenthesization: ``"left"`` folds from the left,
    ``"right"`` from the right; both give the same result.
    """
    unit = (np.zeros(space.dim), 1.0 + 0j)
    letters = [(np.asarray(f, float), 1.0 + 0j) for f in word]
    if order == "left":
        acc = unit
        for x in letters:
            acc = weyl_multiply(acc, x, space)
        return acc
    if order == "right":
        acc = unit
        for x in reversed(letters):
            acc = weyl_multiply(x, acc, space)
        return acc
    raise ValueError(f"unknown order {order!r}")


@dataclass(frozen=True, eq=False)
class QuasifreeState:
    space: SymplecticSpace

    def __call__(self, word) -> complex:
        return quasifree_expect(self, word)


def quasifree_expect(state: QuasifreeState, word) -> complex:
    """``exp(-t(f, f)/2)`` of the reduced vector times the accumulated CCR phase."""
    if not isinstance(word, WeylWord):
        word = WeylWord(word)
    f, phase = weyl_reduce(word, state.space)
    return complex(phase * math.exp(-0.5 * state.space.t(f)))


def positivity_matrix(state: QuasifreeState, vectors) -> np.ndarray:
    """Gram matrix ``[omega(W(f_i)^* W(f_j))]``; positive semidefinite for a state."""
    vs = [np.asarray(v, float) for v in vectors]
    m = len(vs)
    M = np.empty((m, m), complex)
    for i in range(m):
        for j in range(m):
            M[i, j] = quasifree_expect(state, WeylWord([-vs[i], vs[j]]))
    return M


# macroscopic dynamics ---------------------------------------------------------------

@dataclass(frozen=True)
class MicroContext:
    """State and interaction generating the microscopic evolution of the generators."""

    state: StateFunctional
    psi: Interaction
    tol: float = 1e-6
    tail_tol: float = 1e-8
    max_window_dim: int | None = None


@dataclass(frozen=True, eq=False)
class MacroDynamics:
    """Action of the induced dynamics on raw generator coefficients.

    ``matrix`` maps raw coefficients ``f`` to the best approximation of the
    evolved direction within the original generators (in the ``t`` metric);
    ``residual`` is the Schur complement measuring what is not captured, and
    ``kernel_leak`` the largest ``t(alpha f, alpha f)`` over kernel vectors.
    """

    time: float
    matrix: np.ndarray
    residual: np.ndarray
    enlarged: CovarianceData
    kernel_leak: float
    evolution_errors: tuple

    def apply(self, f) -> np.ndarray:
        return self.matrix @ np.asarray(f, float)


def _evolve(q, t, ctx: MicroContext):
    return evolve_infinite_approx(q, t, ctx.psi, ctx.tol, ctx.max_window_dim)


def macro_dynamics(space: SymplecticSpace, ctx: MicroContext, t: float) -> MacroDynamics:
    gens = list(space.raw.generators)
    m = len(gens)
    if t == 0:
        return MacroDynamics(0.0, np.eye(m), np.zeros((m, m)), space.raw, 0.0, (0.0,) * m)
    evolved = [_evolve(q, t, ctx) for q in gens]
    big = covariance_data(ctx.state, evolved + gens, ctx.tail_tol)
    T = big.t_matrix.real
    A, B, C = T[:m, :m], T[:m, m:], T[m:, m:]
    Cp = np.linalg.pinv(C, rcond=KERNEL_RTOL)
    G = Cp @ B.T
    resid = A - B @ Cp @ B.T
    leak = 0.0
    for k in space.kernel.T:
        leak = max(leak, float(k @ A @ k))
    return MacroDynamics(float(t), G, resid, big, leak,
                         tuple(e.truncation_error for e in evolved))


def continuity_defect(ctx: MicroContext, q: LocalOperator, u: float):
    """``t(alpha_u(q) - q, alpha_u(q) - q)`` with its error budget."""
    if u == 0:
        return 0.0, 0.0
    ev = _evolve(q, u, ctx)
    D = ev.operator - q
    val = covariance_t(ctx.state, D, D, ctx.tail_tol)
    n = 2 * (val.K + 1) + 1
    err = val.tail + 2 * n * (2 * D.norm() + ev.truncation_error) * ev.truncation_error
    return float(val.value.real), float(err)


# KMS for the fluctuation algebra -----------------------------------------------------

@dataclass(frozen=True)
class KMSReport:
    beta: float
    T: float
    t_grid: tuple
    N_list: tuple
    values: np.ndarray
    continued: np.ndarray
    swapped: np.ndarray
    residuals: np.ndarray
    max_abs: float
    prediction_t0: complex
    phase_sign: int

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals, initial=0.0))

    def to_dict(self) -> dict:
        def enc(a):
            return [[[float(z.real), float(z.imag)] for z in row] for row in a]

        return {"beta": self.beta, "T": self.T, "t_grid": list(map(float, self.t_grid)),
                "N_list": list(self.N_list), "values": enc(self.values),
                "continued": enc(self.continued), "swapped": enc(self.swapped),
                "residuals": [list(map(float, r)) for r in self.residuals],
                "max_residual": self.max_residual, "max_abs": self.max_abs,
                "prediction_t0": [self.prediction_t0.real, self.prediction_t0.imag],
                "phase_sign": self.phase_sign}


def _expi(M, T):
    w, V = np.linalg.eigh(M)
    return (V * np.exp(1j * T * w)) @ V.conj().T


def kms_fluctuation_check(gibbs: GibbsState, q: LocalOperator, r: LocalOperator, beta=None,
                          t_grid=(0.0,), N_list=(2, 3, 4), T: float = 1.0,
                          sign: int | None = None) -> KMSReport:
    """Finite-volume KMS identity for the Weyl-type word ``e^{iT Q_N} alpha_t(e^{iT R_N})``.

    For every ``N`` the Gibbs state of the window of the fluctuation
    operators is used. ``values`` holds ``F_N(t)``, ``continued`` the exact
    continuation ``F_N(t + i beta)`` obtained from complex-time evolution and
    ``swapped`` the value ``phi(alpha_t(e^{iT R_N}) e^{iT Q_N})``.
    """
    if beta is not None and float(beta) != gibbs.beta:
        gibbs = GibbsState(gibbs.psi, beta, gibbs.window, gibbs.buffer, gibbs.max_window_dim,
                           gibbs.dense_cap, gibbs.block)
    beta = gibbs.beta
    sign = _sign(sign)
    vals, cont, swap, res = [], [], [], []
    for N in N_list:
        fq = fluctuation_operator(q, N, gibbs)
        fr = fluctuation_operator(r, N, gibbs)
        inner = fq.window.hull(fr.window)
        W = gibbs.window_for(inner)
        E, V = spectrum(gibbs.psi, W.length, gibbs.dense_cap)
        p = np.exp(-beta * (E - E[0]))
        p /= p.sum()
        UQ = LocalOperator(inner, _expi(embed(fq.realized, inner).matrix, T), q.d)
        UR = LocalOperator(inner, _expi(embed(fr.realized, inner).matrix, T), q.d)
        B = _to_eigenbasis(V, UQ, W)
        A = _to_eigenbasis(V, UR, W)
        rv, rc, rs, rr = [], [], [], []
        for t in t_grid:
            ph = np.exp(1j * t * (E[:, None] - E[None, :]))
            At = A * ph
            rv.append(np.einsum("n,nm,mn->", p, B, At))
            rs.append(np.einsum("n,nm,mn->", p, At, B))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConditioningWarning)
                _, _, Az = complex_evolve_eigenbasis(UR, t + 1j * beta, gibbs.psi, W)
            rc.append(np.einsum("n,nm,mn->", p, B, Az))
            rr.append(abs(rc[-1] - rs[-1]))
        vals.append(rv)
        cont.append(rc)
        swap.append(rs)
        res.append(rr)
    cov = covariance_data(gibbs, [q, r])
    pred = clt_prediction(cov, [T], sign)[0]
    values = np.array(vals, complex)
    return KMSReport(beta, float(T), tuple(map(float, t_grid)), tuple(N_list), values,
                     np.array(cont, complex), np.array(swap, complex), np.array(res),
                     float(np.abs(values).max(initial=0.0)), complex(pred), sign)
