"""Local operator arithmetic on finite windows of a spin chain.

Operators are dense matrices tagged with the lattice interval they act on.
The leftmost site of an interval is the most significant tensor factor, so
``kron(a_lo, ..., a_hi)`` is the matrix of a product operator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
import numpy as np

from .errors import InvariantError, SupportError

__all__ = [
    "Interval",
    "LocalOperator",
    "QuasiLocalObservable",
    "GENERATORS",
    "generator",
    "word",
    "pauli",
    "identity",
    "embed",
    "translate",
    "commutator",
    "anticommutator",
    "join",
    "opnorm",
    "partial_trace",
    "partial_trace_localize",
    "local_norm_profile",
    "theta_norm",
    "commutator_sum",
]


@dataclass(frozen=True)
class Interval:
    """Closed lattice interval ``[lo, hi]``."""

    lo: int
    hi: int

    def __post_init__(self):
        if int(self.lo) != self.lo or int(self.hi) != self.hi:
            raise ValueError("interval endpoints must be integers")
        object.__setattr__(self, "lo", int(self.lo))
        object.__setattr__(self, "hi", int(self.hi))
        if self.lo > self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @classmethod
    def centered(cls, n: int) -> "Interval":
        return cls(-n, n)

    @property
    def length(self) -> int:
        return self.hi - self.lo + 1

    def __len__(self):
        return self.length

    def __iter__(self):
        return iter(range(self.lo, self.hi + 1))

    def contains(self, other: "Interval | int") -> bool:
        if isinstance(other, Interval):
            return self.lo <= other.lo and other.hi <= self.hi
        return self.lo <= other <= self.hi

    def __contains__(self, other):
        return self.contains(other)

    def hull(self, other: "Interval") -> "Interval":
        return Interval(min(self.lo, other.lo), max(self.hi, other.hi))

    def intersect(self, other: "Interval") -> "Interval | None":
        lo, hi = max(self.lo, other.lo), min(self.hi, other.hi)
        return Interval(lo, hi) if lo <= hi else None

    def overlaps(self, other: "Interval") -> bool:
        return self.intersect(other) is not None

    def shift(self, j: int) -> "Interval":
        return Interval(self.lo + j, self.hi + j)

    def grow(self, b: int) -> "Interval":
        return Interval(self.lo - b, self.hi + b)

    def __repr__(self):
        return f"[{self.lo},{self.hi}]"


def _as_interval(x) -> Interval:
    if isinstance(x, Interval):
        return x
    if isinstance(x, (int, np.integer)):
        return Interval(int(x), int(x))
    lo, hi = x
    return Interval(lo, hi)


@dataclass(frozen=True, eq=False)
class LocalOperator:
    """A dense operator acting on the sites of ``support``.

    Parameters
    ----------
    support : Interval
        Sites the matrix acts on.
    matrix : ndarray
        Square complex matrix of dimension ``d**len(support)``.
    d : int
        On-site Hilbert space dimension.
    """

    support: Interval
    matrix: np.ndarray = field(repr=False)
    d: int = 2

    def __post_init__(self):
        sup = _as_interval(self.support)
        object.__setattr__(self, "support", sup)
        m = np.asarray(self.matrix, dtype=complex)
        dim = self.d ** sup.length
        if m.shape != (dim, dim):
            raise ValueError(
                f"matrix shape {m.shape} does not match d^{sup.length} = {dim}"
            )
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    # construction helpers
    @classmethod
    def identity(cls, support, d: int = 2) -> "LocalOperator":
        sup = _as_interval(support)
        return cls(sup, np.eye(d ** sup.length), d)

    @classmethod
    def zeros(cls, support, d: int = 2) -> "LocalOperator":
        sup = _as_interval(support)
        n = d ** sup.length
        return cls(sup, np.zeros((n, n)), d)

    @classmethod
    def from_word(cls, letters, site: int = 0, d: int = 2) -> "LocalOperator":
        return word(letters, site=site, d=d)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def embed(self, window) -> "LocalOperator":
        return embed(self, window)

    def translate(self, j: int) -> "LocalOperator":
        return translate(self, j)

    def adjoint(self) -> "LocalOperator":
        return LocalOperator(self.support, self.matrix.conj().T, self.d)

    @property
    def H(self) -> "LocalOperator":
        return self.adjoint()

    def norm(self) -> float:
        return opnorm(self.matrix)

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        m = self.matrix
        return np.max(np.abs(m - m.conj().T), initial=0.0) <= tol * max(1.0, np.max(np.abs(m), initial=0.0))

    def trace(self) -> complex:
        """Normalized trace."""
        return complex(np.trace(self.matrix)) / self.dim

    def expm_i(self, scale: float = 1.0) -> "LocalOperator":
        """Return ``exp(i * scale * self)`` for self-adjoint ``self``."""
        w, v = np.linalg.eigh(self.matrix)
        u = (v * np.exp(1j * scale * w)) @ v.conj().T
        return LocalOperator(self.support, u, self.d)

    # arithmetic on the joined support
    def __add__(self, other):
        if isinstance(other, LocalOperator):
            a, b = join(self, other)
            return LocalOperator(a.support, a.matrix + b.matrix, self.d)
        if np.isscalar(other):
            return LocalOperator(self.support, self.matrix + other * np.eye(self.dim), self.d)
        return NotImplemented

    __radd__ = __add__

    def __neg__(self):
        return LocalOperator(self.support, -self.matrix, self.d)

    def __sub__(self, other):
        if isinstance(other, LocalOperator) or np.isscalar(other):
            return self + (-other)
        return NotImplemented

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if np.isscalar(other):
            return LocalOperator(self.support, self.matrix * other, self.d)
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return LocalOperator(self.support, self.matrix / other, self.d)
        return NotImplemented

    def __matmul__(self, other):
        if isinstance(other, LocalOperator):
            a, b = join(self, other)
            return LocalOperator(a.support, a.matrix @ b.matrix, self.d)
        return NotImplemented

    def allclose(self, other: "LocalOperator", atol: float = 1e-12) -> bool:
        a, b = join(self, other)
        return bool(np.allclose(a.matrix, b.matrix, rtol=0.0, atol=atol))

    def __repr__(self):
        return f"LocalOperator(support={self.support!r}, dim={self.dim}, d={self.d})"


# on-site generators -------------------------------------------------------

_SQ = {
    "1": np.eye(2, dtype=complex),
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
    "+": np.array([[0, 1], [0, 0]], dtype=complex),
    "-": np.array([[0, 0], [1, 0]], dtype=complex),
}
_ALIASES = {
    "i": "1", "id": "1", "identity": "1", "I": "1",
    "pauli_x": "x", "pauli_y": "y", "pauli_z": "z",
    "X": "x", "Y": "y", "Z": "z",
    "raising": "+", "sp": "+", "lowering": "-", "sm": "-",
}
GENERATORS = tuple(_SQ)


def generator(name: str, d: int = 2) -> np.ndarray:
    """Single-site matrix of a named generator.

    For ``d > 2`` only the identity and spin-ladder operators (``+``, ``-``,
    ``z`` as twice the spin projection) are defined.
    """
    key = _ALIASES.get(name, name)
    if d == 2:
        if key not in _SQ:
            raise KeyError(f"unknown generator {name!r}")
        return _SQ[key].copy()
    s = (d - 1) / 2
    mvals = s - np.arange(d)
    if key == "1":
        return np.eye(d, dtype=complex)
    if key == "z":
        return np.diag(2 * mvals).astype(complex)
    if key in "+-":
        up = np.zeros((d, d), dtype=complex)
        for a in range(1, d):
            m = mvals[a]
            up[a - 1, a] = np.sqrt(s * (s + 1) - m * (m + 1))
        return up if key == "+" else up.conj().T
    if key in "xy":
        up = generator("+", d)
        return up + up.conj().T if key == "x" else -1j * (up - up.conj().T)
    raise KeyError(f"unknown generator {name!r}")


def _tokens(letters) -> list:
    if isinstance(letters, str):
        s = letters.strip()
        if len(s.split()) > 1:
            return s.split()
        if s in _SQ or s in _ALIASES:
            return [s]
        return list(s)
    return list(letters)


def word(letters, site: int = 0, d: int = 2, coeff: complex = 1.0) -> LocalOperator:
    """Tensor product of named generators starting at ``site``.

    >>> word("z z").support
    [0,1]
    """
    mats = [generator(t, d) for t in _tokens(letters)]
    m = reduce(np.kron, mats)
    return LocalOperator(Interval(site, site + len(mats) - 1), coeff * m, d)


def pauli(name: str, site: int = 0) -> LocalOperator:
    return word(name, site=site, d=2)


def identity(support=0, d: int = 2) -> LocalOperator:
    return LocalOperator.identity(support, d)


# structural operations -----------------------------------------------------

def opnorm(m: np.ndarray) -> float:
    """Operator norm (largest singular value)."""
    m = np.asarray(m)
    if m.size == 0:
        return 0.0
    if m.shape == (1, 1):
        return float(abs(m[0, 0]))
    if np.allclose(m, m.conj().T, rtol=0, atol=1e-14 * max(1.0, np.abs(m).max())):
        return float(np.max(np.abs(np.linalg.eigvalsh(m))))
    return float(np.linalg.norm(m, 2))


def embed(q: LocalOperator, window) -> LocalOperator:
    """Tensor ``q`` with identities so it acts on ``window``."""
    window = _as_interval(window)
    if not window.contains(q.support):
        raise SupportError(f"support {q.support} not contained in {window}")
    left = q.support.lo - window.lo
    right = window.hi - q.support.hi
    m = q.matrix
    if left:
        m = np.kron(np.eye(q.d ** left), m)
    if right:
        m = np.kron(m, np.eye(q.d ** right))
    return LocalOperator(window, m, q.d)


def translate(q: LocalOperator, j: int) -> LocalOperator:
    return LocalOperator(q.support.shift(j), q.matrix, q.d)


def join(a: LocalOperator, b: LocalOperator):
    """Embed both operators into the hull of their supports."""
    if a.support == b.support:
        return a, b
    h = a.support.hull(b.support)
    return embed(a, h), embed(b, h)


def commutator(a: LocalOperator, b: LocalOperator) -> LocalOperator:
    if not a.support.overlaps(b.support):
        return LocalOperator.zeros(a.support.hull(b.support), a.d)
    x, y = join(a, b)
    return LocalOperator(x.support, x.matrix @ y.matrix - y.matrix @ x.matrix, a.d)


def anticommutator(a: LocalOperator, b: LocalOperator) -> LocalOperator:
    x, y = join(a, b)
    return LocalOperator(x.support, x.matrix @ y.matrix + y.matrix @ x.matrix, a.d)


def partial_trace(matrix: np.ndarray, support: Interval, keep: Interval,
                  d: int = 2, normalize: bool = True) -> np.ndarray:
    """Trace out the sites of ``support`` outside ``keep``.

    With ``normalize`` the result is divided by the dimension of the traced
    factor, which makes the map unital (a conditional expectation).
    """
    if not support.contains(keep):
        raise SupportError(f"{keep} not inside {support}")
    nl = keep.lo - support.lo
    nr = support.hi - keep.hi
    dl, dm, dr = d ** nl, d ** keep.length, d ** nr
    t = np.asarray(matrix).reshape(dl, dm, dr, dl, dm, dr)
    out = np.einsum("aibajb->ij", t)
    if normalize:
        out = out / (dl * dr)
    return out


def partial_trace_localize(q: LocalOperator, n: int) -> LocalOperator:
    """Normalized partial trace of ``q`` onto the sites ``[-n, n]``.

    If ``q`` lives entirely outside ``[-n, n]`` the result is the scalar
    ``tr(q)/dim`` placed on site 0.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    keep = q.support.intersect(Interval(-n, n))
    if keep is None:
        return q.trace() * LocalOperator.identity(0, q.d)
    if keep == q.support:
        return q
    return LocalOperator(keep, partial_trace(q.matrix, q.support, keep, q.d), q.d)


# quasi-local observables -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class QuasiLocalObservable:
    """Finite approximant ladder of an exponentially localized observable.

    ``levels[n]`` is supported in ``[-n, n]``. The observable ``Q`` itself is
    known through the top level and the certificate
    ``||Q - Q_{L+j}|| <= tail_bound * theta**j`` for ``j >= 0``, where
    ``L = len(levels) - 1``.
    """

    levels: tuple
    theta: float = 0.5
    tail_bound: float = 0.0

    def __post_init__(self):
        lv = tuple(self.levels)
        if not lv:
            raise ValueError("empty ladder")
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if self.tail_bound < 0:
            raise ValueError("tail_bound must be nonnegative")
        for n, q in enumerate(lv):
            if not Interval(-n, n).contains(q.support):
                raise SupportError(f"level {n} has support {q.support}")
        herm = [q.is_hermitian(1e-10) for q in lv]
        if any(herm) and not all(herm):
            raise InvariantError("self-adjointness differs between ladder levels")
        object.__setattr__(self, "levels", lv)

    @classmethod
    def from_local(cls, q: LocalOperator, theta: float = 0.5) -> "QuasiLocalObservable":
        """Exact ladder of a strictly local operator (tail zero)."""
        L = max(abs(q.support.lo), abs(q.support.hi))
        top = embed(q, Interval(-L, L))
        levels = [partial_trace_localize(top, n) for n in range(L)] + [top]
        return cls(tuple(levels), theta, 0.0)

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def top(self) -> LocalOperator:
        return self.levels[-1]

    @property
    def d(self) -> int:
        return self.top.d

    @property
    def self_adjoint(self) -> bool:
        return self.top.is_hermitian(1e-10)

    def distance_bound(self, n: int) -> float:
        """Upper bound on ``||Q - Q_n||`` for the stored ladder."""
        L = self.depth
        if n >= L:
            return self.tail_bound * self.theta ** (n - L)
        return embed_diff_norm(self.top, self.levels[n]) + self.tail_bound


def embed_diff_norm(a: LocalOperator, b: LocalOperator) -> float:
    x, y = join(a, b)
    return opnorm(x.matrix - y.matrix)


def _profile_terms(q: QuasiLocalObservable, n_max: int) -> np.ndarray:
    """Raw surrogate values ``||Q - E_n Q||`` (upper bounds) for n = 0..n_max."""
    top = q.top
    L = q.depth
    t = q.tail_bound
    out = np.empty(n_max + 1)
    full = top.norm() + t
    out[0] = full
    for n in range(1, n_max + 1):
        if n >= L:
            # E_n Q_n = Q_n and E_n is a contraction
            out[n] = 2.0 * t * q.theta ** (n - L)
        else:
            e = partial_trace_localize(top, n)
            out[n] = embed_diff_norm(top, e) + 2.0 * t
    # the infimum profile is nonincreasing; keep the best certified bound
    out[1:] = np.minimum.accumulate(np.minimum(out[1:], full))
    return out


def local_norm_profile(q: QuasiLocalObservable, n: int) -> float:
    """Computable upper bound on the best ``[-n, n]`` approximation error.

    Uses the normalized partial trace as the approximant, which is within a
    factor 2 of the optimal one. For ``n = 0`` the full norm is returned.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    return float(_profile_terms(q, n)[n])


def theta_norm(q: QuasiLocalObservable, theta: float) -> float:
    """Weighted sum of the localization profile, ``sum_n profile(n) theta**-n``.

    Returns ``inf`` when the ladder's tail certificate decays too slowly for
    the requested ``theta``.
    """
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    L = q.depth
    prof = _profile_terms(q, L)
    total = float(np.sum(prof * theta ** (-np.arange(L + 1.0))))
    if q.tail_bound > 0:
        r = q.theta / theta
        if r >= 1:
            return float("inf")
        total += 2.0 * q.tail_bound * theta ** (-L) * r / (1 - r)
    return total


def commutator_sum(q1: QuasiLocalObservable, q2: QuasiLocalObservable,
                   k_max: int, theta: float | None = None):
    """Partial sum of ``||[tau_k(q1), q2]||`` over ``|k| <= k_max`` and a tail bound.

    The tail bound dominates the remaining terms ``|k| > k_max`` using the
    telescoping decomposition of both observables into shells; shells of total
    radius ``s`` only reach separations ``|k| <= s``. When the ladders carry a
    nonzero tail, the error made by evaluating on the ladder tops is included.
    """
    if theta is None:
        theta = max(q1.theta, q2.theta)
    a, b = q1.top, q2.top
    partial = 0.0
    reach = (max(abs(a.support.lo), abs(a.support.hi))
             + max(abs(b.support.lo), abs(b.support.hi)))
    for k in range(-k_max, k_max + 1):
        if abs(k) > reach:
            continue
        partial += commutator(translate(a, k), b).norm()
    n1, n2 = theta_norm(q1, theta), theta_norm(q2, theta)
    tail = 0.0
    if q1.tail_bound == 0 and q2.tail_bound == 0 and k_max >= reach:
        tail = 0.0
    elif np.isinf(n1) or np.isinf(n2):
        tail = float("inf")
    else:
        pref = 2.0 * (1 + 1 / theta) ** 2 * n1 * n2
        s = k_max + 1
        acc = 0.0
        while True:
            term = (s + 1) * 2 * (s - k_max) * theta ** s
            acc += term
            if term < 1e-18 * max(acc, 1e-300) or s > k_max + 100000:
                break
            s += 1
        tail = pref * acc
        tail += (2 * k_max + 1) * 2 * (q1.tail_bound * b.norm() + a.norm() * q2.tail_bound
                                       + q1.tail_bound * q2.tail_bound)
    return partial, tail
