"""Finite-volume Gibbs states of finite-range interactions.

Windows up to ``dense_cap`` are handled by full diagonalization. Larger
windows (up to ``max_window_dim``) use a Chebyshev expansion of
``exp(-beta H / 2)`` applied to blocks of basis vectors, which yields exact
reduced densities without storing any dense matrix of the full window.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla
from scipy.special import ive

from ..algebra import Interval, LocalOperator, _as_interval, embed
from ..dynamics import (DENSE_CAP, MAX_WINDOW_DIM, Interaction, _geometric_tail,
                        _to_eigenbasis, complex_evolve_eigenbasis, local_hamiltonian_sparse,
                        loglinear_fit, spectrum)
from ..errors import SupportError, WindowCapError
from .base import StateFunctional, _expect_embedded

__all__ = ["GibbsState", "gibbs_expect", "thermodynamic_expect", "ThermoResult", "kms_residual"]


def reduce_columns(Y: np.ndarray, L: int, offset: int, n: int, d: int) -> np.ndarray:
    """``tr_rest(Y Y^dagger)`` for a block of column vectors on ``L`` sites.

    The kept sites are ``offset, ..., offset + n - 1`` counted from the left.
    """
    B = Y.shape[1]
    t = Y.reshape(d ** offset, d ** n, d ** (L - offset - n), B)
    t = np.ascontiguousarray(t.transpose(1, 0, 2, 3)).reshape(d ** n, -1)
    return t @ t.conj().T


class _LRU:
    def __init__(self, max_bytes):
        self.max_bytes = max_bytes
        self.data = OrderedDict()
        self.lock = threading.Lock()

    def get(self, key):
        with self.lock:
            v = self.data.get(key)
            if v is not None:
                self.data.move_to_end(key)
            return v

    def put(self, key, value):
        with self.lock:
            self.data[key] = value
            total = sum(v.nbytes for v in self.data.values())
            while total > self.max_bytes and len(self.data) > 1:
                _, old = self.data.popitem(last=False)
                total -= old.nbytes
        return value


_DENSITY_CACHE = _LRU(600_000_000)


def chebyshev_reduced_densities(psi: Interaction, beta: float, length: int, subs,
                                block: int = 1024, rtol: float = 1e-17):
    """Reduced densities of ``exp(-beta H)/Z`` on a window of ``length`` sites.

    ``subs`` is a list of ``(offset, n)`` pairs. Columns of ``X = exp(-beta H/2)``
    are generated block by block from a Chebyshev series in the rescaled
    Hamiltonian, and ``tr_rest(X X^dagger)`` is accumulated for each pair.
    """
    d = psi.d
    D = d ** length
    H = local_hamiltonian_sparse(psi, Interval(0, length - 1)).tocsr()
    lo = spla.eigsh(H, k=1, which="SA", return_eigenvectors=False, tol=1e-10)[0]
    hi = spla.eigsh(H, k=1, which="LA", return_eigenvectors=False, tol=1e-10)[0]
    pad = 1e-6 * max(1.0, hi - lo)
    c, a = 0.5 * (hi + lo), 0.5 * (hi - lo) + pad
    tau = 0.5 * beta * a
    coef = [ive(0, tau)]
    n = 1
    while True:
        cn = 2.0 * (-1) ** n * ive(n, tau)
        coef.append(cn)
        if abs(cn) < rtol * coef[0] and n > 2 * tau:
            break
        n += 1
    dtype = H.dtype
    acc = [np.zeros((d ** m, d ** m), dtype=dtype) for _, m in subs]
    for j0 in range(0, D, block):
        j1 = min(D, j0 + block)
        t_prev = np.zeros((D, j1 - j0), dtype=dtype)
        t_prev[np.arange(j0, j1), np.arange(j1 - j0)] = 1.0
        out = coef[0] * t_prev
        t_cur = (H @ t_prev - c * t_prev) / a
        out += coef[1] * t_cur
        for cn in coef[2:]:
            t_next = 2.0 * (H @ t_cur - c * t_cur) / a - t_prev
            out += cn * t_next
            t_prev, t_cur = t_cur, t_next
        for k, (off, m) in enumerate(subs):
            acc[k] += reduce_columns(out, length, off, m, d)
    return [r / np.trace(r).real for r in acc]


class GibbsState(StateFunctional):
    """Local Gibbs state ``exp(-beta H_W)/Z`` of an interaction on windows ``W``.

    Parameters
    ----------
    psi : Interaction
    beta : float
        Inverse temperature.
    window : Interval, optional
        Fixed window; all expectations are taken in it. When omitted the
        window of an operator is its support grown by ``buffer`` sites on
        each side, an approximation of the infinite-volume state.
    buffer : int
    max_window_dim : int
        Largest Hilbert space dimension allowed for a window.
    dense_cap : int
        Largest dimension treated by full diagonalization.
    """

    def __init__(self, psi: Interaction, beta: float, window=None, buffer: int = 2,
                 max_window_dim: int = MAX_WINDOW_DIM, dense_cap: int | None = None,
                 block: int = 1024):
        if beta < 0:
            raise ValueError("beta must be nonnegative")
        self.psi = psi
        self.beta = float(beta)
        self.window = None if window is None else _as_interval(window)
        self.buffer = int(buffer)
        self.max_window_dim = int(max_window_dim)
        self.dense_cap = DENSE_CAP if dense_cap is None else int(dense_cap)
        self.block = block
        self.d = psi.d
        self.translation_invariant = self.window is None

    def with_buffer(self, buffer: int) -> "GibbsState":
        return GibbsState(self.psi, self.beta, None, buffer, self.max_window_dim,
                          self.dense_cap, self.block)

    def window_for(self, support: Interval) -> Interval:
        if self.window is not None:
            if not self.window.contains(support):
                raise SupportError(f"{support} outside the fixed window {self.window}")
            return self.window
        return support.grow(self.buffer)

    def _check_dim(self, window: Interval):
        if self.d ** window.length > self.max_window_dim:
            raise WindowCapError(
                f"window {window} of dimension {self.d ** window.length} exceeds {self.max_window_dim}")

    def window_densities(self, window: Interval, subs) -> list:
        """Reduced densities on each interval of ``subs`` for the Gibbs state of ``window``."""
        window = _as_interval(window)
        subs = [_as_interval(s) for s in subs]
        for s in subs:
            if not window.contains(s):
                raise SupportError(f"{s} outside {window}")
        if self.beta == 0:
            return [np.eye(self.d ** s.length) / self.d ** s.length for s in subs]
        self._check_dim(window)
        L = window.length
        keys = [(self.psi.key, self.beta, L, s.lo - window.lo, s.length) for s in subs]
        out = [_DENSITY_CACHE.get(k) for k in keys]
        todo = [i for i, r in enumerate(out) if r is None]
        if todo:
            pairs = [(subs[i].lo - window.lo, subs[i].length) for i in todo]
            if self.d ** L <= self.dense_cap:
                E, V = spectrum(self.psi, L, self.dense_cap)
                p = np.exp(-self.beta * (E - E[0]))
                p /= p.sum()
                Y = V * np.sqrt(p)[None, :]
                res = [reduce_columns(Y, L, off, m, self.d) for off, m in pairs]
            else:
                res = chebyshev_reduced_densities(self.psi, self.beta, L, pairs, self.block)
            for i, r in zip(todo, res):
                out[i] = _DENSITY_CACHE.put(keys[i], r)
        return out

    def window_density(self, window: Interval, sites: Interval) -> np.ndarray:
        return self.window_densities(window, [sites])[0]

    def reduced_density(self, sites: Interval) -> np.ndarray:
        return self.window_density(self.window_for(sites), sites)

    def expect_many(self, ops) -> np.ndarray:
        ops = list(ops)
        if self.window is None or not ops:
            return np.array([self.expect(q) for q in ops], dtype=complex)
        hull = ops[0].support
        for q in ops[1:]:
            hull = hull.hull(q.support)
        rho = self.window_density(self.window, hull)
        return np.array([_expect_embedded(rho, hull, q) for q in ops])

    def describe(self) -> dict:
        return {"kind": "gibbs", "interaction": self.psi.name, "beta": self.beta,
                "window": None if self.window is None else [self.window.lo, self.window.hi],
                "buffer": self.buffer}


def gibbs_expect(state: GibbsState, q: LocalOperator, window) -> complex:
    """``tr(exp(-beta H_W) q) / tr(exp(-beta H_W))`` on the window ``W``."""
    window = _as_interval(window)
    if not window.contains(q.support):
        raise SupportError(f"support {q.support} not contained in {window}")
    rho = state.window_density(window, q.support)
    return complex(np.einsum("ij,ji->", rho, q.matrix))


@dataclass(frozen=True)
class ThermoResult:
    value: complex
    error: float
    buffers: tuple
    values: tuple
    increments: tuple
    slope: float
    r2: float

    def __iter__(self):
        return iter((self.value, self.error))


def thermodynamic_expect(state: GibbsState, q: LocalOperator, tol: float,
                         max_buffer: int | None = None) -> ThermoResult:
    """Infinite-volume expectation from windows ``supp(q)`` grown by ``k = 0, 1, ...``.

    Stops when the increment between consecutive windows is below ``tol``;
    the error bar is that increment plus a geometric extrapolation of the
    remaining increments. ``slope`` is the log-linear fit of the increments.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if state.beta == 0:
        v = gibbs_expect(state, q, q.support)
        return ThermoResult(v, 0.0, (0,), (v,), (), float("nan"), float("nan"))
    vals, incs, bufs = [], [], []
    k = 0
    while True:
        w = q.support.grow(k)
        if state.d ** w.length > state.max_window_dim or (max_buffer is not None and k > max_buffer):
            err = incs[-1] + _geometric_tail(incs) if incs else float("inf")
            slope, _, r2 = loglinear_fit(np.arange(1, len(incs) + 1), incs)
            raise WindowCapError(
                f"no convergence to tol={tol} before window {w}",
                partial=ThermoResult(vals[-1], err, tuple(bufs), tuple(vals), tuple(incs), slope, r2))
        vals.append(gibbs_expect(state, q, w))
        bufs.append(k)
        if k > 0:
            incs.append(abs(vals[-1] - vals[-2]))
            if incs[-1] < tol:
                break
        k += 1
    slope, _, r2 = loglinear_fit(np.arange(1, len(incs) + 1), incs)
    return ThermoResult(vals[-1], incs[-1] + _geometric_tail(incs), tuple(bufs), tuple(vals),
                        tuple(incs), slope, r2)


def kms_residual(state: GibbsState, q1: LocalOperator, q2: LocalOperator, window=None) -> float:
    """``|phi(q1 alpha_{i beta}(q2)) - phi(q2 q1)|`` for the Gibbs state of ``window``.

    Both sides are evaluated in the eigenbasis of the window Hamiltonian, with
    the continued operator carrying the factors ``exp(-beta (E_n - E_m))``.
    """
    window = _as_interval(window) if window is not None else state.window_for(q1.support.hull(q2.support))
    for q in (q1, q2):
        if not window.contains(q.support):
            raise SupportError(f"support {q.support} not contained in {window}")
    beta = state.beta
    E, V, A = complex_evolve_eigenbasis(q2, 1j * beta, state.psi, window)
    Q1 = _to_eigenbasis(V, q1, window)
    Q2 = _to_eigenbasis(V, q2, window)
    p = np.exp(-beta * (E - E[0]))
    p /= p.sum()
    lhs = np.einsum("n,nm,mn->", p, Q1, A)
    rhs = np.einsum("n,nm,mn->", p, Q2, Q1)
    return float(abs(lhs - rhs))
