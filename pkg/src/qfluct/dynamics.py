"""Finite-range interactions and Heisenberg dynamics on finite windows."""
from __future__ import annotations

import hashlib
import threading
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .algebra import Interval, LocalOperator, _as_interval, embed, opnorm, word
from .errors import ConditioningWarning, SupportError, WindowCapError

__all__ = [
    "Interaction",
    "EvolutionResult",
    "LocalityTable",
    "tfim",
    "classical_ising",
    "xy",
    "heisenberg",
    "local_hamiltonian",
    "local_hamiltonian_sparse",
    "spectrum",
    "evolve",
    "complex_evolve",
    "complex_evolve_eigenbasis",
    "evolve_infinite_approx",
    "lieb_robinson_probe",
    "DENSE_CAP",
    "MAX_WINDOW_DIM",
]

# largest dimension diagonalized densely; larger windows use other routes
DENSE_CAP = 2 ** 12
MAX_WINDOW_DIM = 2 ** 14
# exp(overflow) is the largest amplification tolerated silently
OVERFLOW_EXPONENT = 30.0


@dataclass(frozen=True, eq=False)
class Interaction:
    """Translation-invariant finite-range interaction.

    Each term is a self-adjoint ``LocalOperator`` whose support starts at
    site 0; the Hamiltonian of a window sums every translate that fits.
    """

    terms: tuple
    d: int = 2
    name: str = "custom"
    key: str = field(init=False, repr=False)

    def __post_init__(self):
        ts = tuple(self.terms)
        for t in ts:
            if t.support.lo != 0:
                raise ValueError("interaction terms must be anchored at site 0")
            if t.d != self.d:
                raise ValueError("term site dimension mismatch")
            if not t.is_hermitian(1e-12):
                raise ValueError("interaction terms must be self-adjoint")
        object.__setattr__(self, "terms", ts)
        h = hashlib.sha1(f"{self.d}".encode())
        for t in ts:
            h.update(str(t.support.length).encode())
            h.update(np.ascontiguousarray(t.matrix).tobytes())
        object.__setattr__(self, "key", h.hexdigest())

    @property
    def range(self) -> int:
        return max((t.support.length for t in self.terms), default=1)

    @property
    def is_real(self) -> bool:
        return all(np.allclose(t.matrix.imag, 0) for t in self.terms)

    @property
    def is_diagonal(self) -> bool:
        return all(np.allclose(t.matrix, np.diag(np.diag(t.matrix))) for t in self.terms)

    @property
    def local_strength(self) -> float:
        """Sum of term norms, the norm of all terms touching one site is at most range times this."""
        return float(sum(t.norm() for t in self.terms))

    @classmethod
    def from_words(cls, spec, d: int = 2, name: str = "custom") -> "Interaction":
        """Build from ``[(coeff, "z z"), (coeff, "x"), ...]``; terms with equal length are merged."""
        by_len = {}
        for coeff, letters in spec:
            op = word(letters, 0, d, coeff=float(coeff))
            n = op.support.length
            by_len[n] = op if n not in by_len else by_len[n] + op
        return cls(tuple(by_len[n] for n in sorted(by_len)), d, name)

    def __eq__(self, other):
        return isinstance(other, Interaction) and other.key == self.key

    def __hash__(self):
        return hash(self.key)


def tfim(J: float = 1.0, h: float = 1.0) -> Interaction:
    """Transverse-field Ising chain ``-J z z - h x``."""
    return Interaction.from_words([(-J, "z z"), (-h, "x")], name=f"tfim(J={J},h={h})")


def classical_ising(J: float = 1.0) -> Interaction:
    return Interaction.from_words([(-J, "z z")], name=f"ising(J={J})")


def xy(gamma: float = 0.0, h: float = 0.0, J: float = 1.0) -> Interaction:
    """Anisotropic XY chain in a longitudinal field."""
    spec = [(-J * (1 + gamma) / 2, "x x"), (-J * (1 - gamma) / 2, "y y")]
    if h:
        spec.append((-h, "z"))
    return Interaction.from_words(spec, name=f"xy(gamma={gamma},h={h},J={J})")


def heisenberg(J: float = 1.0, h: float = 0.0) -> Interaction:
    spec = [(J, "x x"), (J, "y y"), (J, "z z")]
    if h:
        spec.append((-h, "z"))
    return Interaction.from_words(spec, name=f"heisenberg(J={J},h={h})")


PRESETS = {"tfim": tfim, "ising": classical_ising, "classical_ising": classical_ising,
           "xy": xy, "heisenberg": heisenberg}


# Hamiltonians ---------------------------------------------------------------

def local_hamiltonian_sparse(psi: Interaction, window) -> sp.csr_matrix:
    window = _as_interval(window)
    L, d = window.length, psi.d
    dim = d ** L
    dtype = float if psi.is_real else complex
    H = sp.csr_matrix((dim, dim), dtype=dtype)
    for t in psi.terms:
        n = t.support.length
        m = sp.csr_matrix(t.matrix.real if psi.is_real else t.matrix)
        for a in range(0, L - n + 1):
            left, right = d ** a, d ** (L - a - n)
            H = H + sp.kron(sp.kron(sp.identity(left, format="csr"), m), sp.identity(right, format="csr"), format="csr")
    return H


def local_hamiltonian(psi: Interaction, window) -> LocalOperator:
    """Dense ``H_window``: the sum of all interaction terms inside the window."""
    window = _as_interval(window)
    return LocalOperator(window, local_hamiltonian_sparse(psi, window).toarray(), psi.d)


class _SpectrumCache:
    """Thread-safe LRU store of eigendecompositions keyed by (interaction, length)."""

    def __init__(self, max_bytes: int = 1_500_000_000):
        self.max_bytes = max_bytes
        self._data = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                return self._data[key]
        return None

    def put(self, key, value):
        size = sum(a.nbytes for a in value)
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            total = sum(sum(a.nbytes for a in v) for v in self._data.values())
            while total > self.max_bytes and len(self._data) > 1:
                _, old = self._data.popitem(last=False)
                total -= sum(a.nbytes for a in old)
        return value

    def clear(self):
        with self._lock:
            self._data.clear()


SPECTRUM_CACHE = _SpectrumCache()


def spectrum(psi: Interaction, length: int, dense_cap: int | None = None):
    """Eigenvalues and eigenvectors of ``H`` on a window of ``length`` sites.

    The result depends only on the length (translation invariance) and is
    cached. Real Hamiltonians are diagonalized in real arithmetic.
    """
    cap = DENSE_CAP if dense_cap is None else dense_cap
    dim = psi.d ** length
    if dim > cap:
        raise WindowCapError(f"dense diagonalization of dimension {dim} exceeds cap {cap}")
    key = (psi.key, length)
    hit = SPECTRUM_CACHE.get(key)
    if hit is not None:
        return hit
    H = local_hamiltonian_sparse(psi, Interval(0, length - 1)).toarray()
    E, V = np.linalg.eigh(H)
    return SPECTRUM_CACHE.put(key, (E, V))


def _mm(a, b):
    """Matrix product that keeps real factors in real arithmetic."""
    ar, br = np.isrealobj(a), np.isrealobj(b)
    if ar and not br:
        out = (a @ np.ascontiguousarray(b.real)).astype(complex)
        out.imag = a @ np.ascontiguousarray(b.imag)
        return out
    if br and not ar:
        out = (np.ascontiguousarray(a.real) @ b).astype(complex)
        out.imag = np.ascontiguousarray(a.imag) @ b
        return out
    return a @ b


def _apply_local(V, q: LocalOperator, window: Interval) -> np.ndarray:
    """``(1 x q x 1) V`` without forming the embedded matrix."""
    d = q.d
    nl = q.support.lo - window.lo
    dl, dq, dr = d ** nl, q.dim, d ** (window.hi - q.support.hi)
    D = V.shape[1]
    Vt = V.reshape(dl, dq, dr, D)
    qm = q.matrix.real if np.isrealobj(V) and not np.any(q.matrix.imag) else q.matrix
    return np.einsum("ij,ajbk->aibk", qm, Vt, optimize=True).reshape(V.shape[0], D)


def _to_eigenbasis(V, q: LocalOperator, window: Interval) -> np.ndarray:
    """``V^dagger (1 x q x 1) V``."""
    return _mm(V.conj().T, _apply_local(V, q, window))


def _from_eigenbasis(V, M) -> np.ndarray:
    return _mm(_mm(V, M), V.conj().T)


def _check(q: LocalOperator, window: Interval):
    if not window.contains(q.support):
        raise SupportError(f"support {q.support} not contained in {window}")


def evolve(q: LocalOperator, t: float, psi: Interaction, window) -> LocalOperator:
    """Heisenberg evolution ``e^{itH} q e^{-itH}`` with ``H`` the window Hamiltonian."""
    window = _as_interval(window)
    _check(q, window)
    if t == 0:
        return embed(q, window)
    E, V = spectrum(psi, window.length)
    M = _to_eigenbasis(V, q, window)
    ph = np.exp(1j * t * E)
    M = ph[:, None] * M * ph.conj()[None, :]
    return LocalOperator(window, _from_eigenbasis(V, M), q.d)


def complex_evolve(q: LocalOperator, z: complex, psi: Interaction, window,
                   beta_max: float = 10.0, overflow: float = OVERFLOW_EXPONENT) -> LocalOperator:
    """Analytic continuation ``e^{izH} q e^{-izH}`` through the spectral decomposition.

    Raises ``ValueError`` when ``|Im z|`` exceeds ``beta_max`` and warns with
    ``ConditioningWarning`` when ``|Im z|`` times the spectral width exceeds
    ``overflow`` (the entries then carry factors up to ``exp(overflow)``).
    """
    window = _as_interval(window)
    _check(q, window)
    z = complex(z)
    if abs(z.imag) > beta_max:
        raise ValueError(f"|Im z| = {abs(z.imag)} exceeds beta_max = {beta_max}")
    if z == 0:
        return embed(q, window)
    E, V, M = complex_evolve_eigenbasis(q, z, psi, window, overflow)
    return LocalOperator(window, _from_eigenbasis(V, M), q.d)


def complex_evolve_eigenbasis(q: LocalOperator, z: complex, psi: Interaction, window,
                              overflow: float = OVERFLOW_EXPONENT):
    """Matrix of ``e^{izH} q e^{-izH}`` in the eigenbasis of the window Hamiltonian.

    Returns ``(E, V, M)``; working in this basis avoids the cancellations
    that the change back to the site basis suffers for large ``|Im z|``.
    """
    window = _as_interval(window)
    _check(q, window)
    E, V = spectrum(psi, window.length)
    width = float(E[-1] - E[0])
    if abs(complex(z).imag) * width > overflow:
        warnings.warn(
            f"complex time evolution amplifies entries by up to exp({abs(complex(z).imag) * width:.1f})",
            ConditioningWarning, stacklevel=3)
    M = _to_eigenbasis(V, q, window)
    Ec = E - 0.5 * (E[0] + E[-1])
    left = np.exp(1j * z * Ec)
    right = np.exp(-1j * z * Ec)
    return E, V, left[:, None] * M * right[None, :]


# thermodynamic-limit dynamics ----------------------------------------------------

@dataclass(frozen=True)
class EvolutionResult:
    """Evolved operator on ``window`` with a bound on the distance to larger windows."""

    operator: LocalOperator
    window: Interval
    truncation_error: float
    increments: tuple = ()


def _geometric_tail(incs) -> float:
    """Extrapolated sum of the increments after the last one.

    A geometric model is fitted to the last (up to three) positive increments.
    Superexponential decay makes this conservative.
    """
    incs = [x for x in incs if x > 0]
    if not incs:
        return 0.0
    last = incs[-1]
    tail = incs[-3:]
    if len(tail) < 2:
        return last
    slope = np.polyfit(np.arange(len(tail)), np.log(tail), 1)[0]
    r = float(np.exp(slope))
    if r >= 1:
        return float("inf")
    return last * r / (1 - r)


def _diff_norm(a: LocalOperator, b: LocalOperator) -> float:
    w = a.support.hull(b.support)
    return opnorm(embed(a, w).matrix - embed(b, w).matrix)


def evolve_infinite_approx(q: LocalOperator, t: float, psi: Interaction, tol: float,
                           max_window_dim: int | None = None, step: int = 1) -> EvolutionResult:
    """Approximate the infinite-volume evolution by symmetric window growth.

    Windows ``supp(q)`` grown by ``b = 0, step, 2 step, ...`` sites per side
    are evaluated until the norm increment between consecutive windows drops
    below ``tol``. The reported error is the last increment plus a geometric
    extrapolation of the remaining ones.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    cap = DENSE_CAP if max_window_dim is None else max_window_dim
    if t == 0 or (psi.is_diagonal and np.allclose(q.matrix, np.diag(np.diag(q.matrix)))):
        return EvolutionResult(q, q.support, 0.0, ())
    b = 0
    w = q.support
    cur = evolve(q, t, psi, w)
    incs = []
    while True:
        nw = w.grow(step)
        if psi.d ** nw.length > cap:
            err = incs[-1] + _geometric_tail(incs) if incs else float("inf")
            raise WindowCapError(
                f"window {nw} exceeds dimension cap {cap} before reaching tol={tol}",
                partial=EvolutionResult(cur, w, err, tuple(incs)))
        nxt = evolve(q, t, psi, nw)
        inc = _diff_norm(nxt, cur)
        incs.append(inc)
        w, cur = nw, nxt
        b += step
        if inc < tol:
            break
    return EvolutionResult(cur, w, inc + _geometric_tail(incs), tuple(incs))


@dataclass(frozen=True)
class LocalityTable:
    buffers: tuple
    deviations: tuple
    rate: float
    intercept: float
    r2: float

    def rows(self):
        return list(zip(self.buffers, self.deviations))


def loglinear_fit(x, y, floor: float = 1e-14):
    """Least-squares fit of ``log y = a + b x`` over entries with ``y > floor``.

    Returns ``(slope, intercept, r2)``; NaNs when fewer than two points remain.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    keep = y > floor
    if keep.sum() < 2:
        return float("nan"), float("nan"), float("nan")
    res = stats.linregress(x[keep], np.log(y[keep]))
    return float(res.slope), float(res.intercept), float(res.rvalue ** 2)


def lieb_robinson_probe(q: LocalOperator, t: float, psi: Interaction, buffers,
                        max_window_dim: int | None = None) -> LocalityTable:
    """Distance of window-``b`` evolutions from the largest requested window.

    ``rate`` is minus the slope of a log-linear fit of the nonzero deviations.
    """
    buffers = [int(b) for b in buffers]
    if any(b2 <= b1 for b1, b2 in zip(buffers, buffers[1:])):
        raise ValueError("buffers must be increasing")
    cap = DENSE_CAP if max_window_dim is None else max_window_dim
    if psi.d ** q.support.grow(buffers[-1]).length > cap:
        raise WindowCapError(f"largest buffer {buffers[-1]} exceeds dimension cap {cap}")
    ref = evolve(q, t, psi, q.support.grow(buffers[-1]))
    devs = []
    for b in buffers:
        devs.append(0.0 if b == buffers[-1] else _diff_norm(evolve(q, t, psi, q.support.grow(b)), ref))
    slope, icpt, r2 = loglinear_fit(buffers[:-1], devs[:-1])
    return LocalityTable(tuple(buffers), tuple(devs), -slope, icpt, r2)
