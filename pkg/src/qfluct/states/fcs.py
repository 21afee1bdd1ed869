"""Finitely correlated (matrix product) states and their transfer operators.

A state is given by Kraus matrices ``V_1, ..., V_d`` (each ``k x k``) with
``sum_i V_i^dagger V_i = 1`` and a density ``rho`` on the bond space fixed by
``X -> sum_i V_i X V_i^dagger``. For a local operator ``a`` on ``w`` sites

    phi(a) = sum_{I,J} a_{IJ} tr(rho A_I^dagger A_J),   A_J = V_{j_w} ... V_{j_1},

with ``j_1`` the leftmost site.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..algebra import Interval, LocalOperator
from ..errors import InvariantError, MixingCertificateError
from .base import StateFunctional, gap_between

__all__ = ["FCSSpec", "FCSState", "TransferOperator", "MixingCertificate", "fcs_expect",
           "dual_transfer", "mixing_analysis", "fcs_rank_probe"]


def _fixed_point(kraus: np.ndarray) -> np.ndarray:
    d, k, _ = kraus.shape
    # predual map X -> sum V X V^dagger in row-major vec form
    T = sum(np.kron(V, V.conj()) for V in kraus)
    w, vecs = np.linalg.eig(T)
    i = int(np.argmin(np.abs(w - 1)))
    rho = vecs[:, i].reshape(k, k)
    rho = rho / np.trace(rho)
    return 0.5 * (rho + rho.conj().T)


@dataclass(frozen=True, eq=False)
class FCSSpec:
    """Kraus data and bond-space fixed point of a finitely correlated state."""

    kraus: np.ndarray
    rho: np.ndarray
    tol: float = 1e-12

    def __post_init__(self):
        K = np.asarray(self.kraus, dtype=complex)
        rho = np.asarray(self.rho, dtype=complex)
        if K.ndim != 3 or K.shape[1] != K.shape[2]:
            raise InvariantError("kraus must have shape (d, k, k)")
        k = K.shape[1]
        tol = self.tol
        unit = np.einsum("iba,ibc->ac", K.conj(), K)
        if np.abs(unit - np.eye(k)).max() > tol:
            raise InvariantError("sum_i V_i^dagger V_i differs from the identity")
        if rho.shape != (k, k) or np.abs(rho - rho.conj().T).max() > tol:
            raise InvariantError("rho must be a self-adjoint k x k matrix")
        if abs(np.trace(rho) - 1) > tol or np.linalg.eigvalsh(rho).min() < -tol:
            raise InvariantError("rho must be a density matrix")
        if np.abs(np.einsum("iab,bc,idc->ad", K, rho, K.conj()) - rho).max() > tol:
            raise InvariantError("rho is not invariant under the predual transfer map")
        K.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "kraus", K)
        object.__setattr__(self, "rho", rho)

    @property
    def bond_dim(self) -> int:
        return self.kraus.shape[1]

    @property
    def site_dim(self) -> int:
        return self.kraus.shape[0]

    @classmethod
    def from_kraus(cls, kraus, tol: float = 1e-12) -> "FCSSpec":
        K = np.asarray(kraus, dtype=complex)
        return cls(K, _fixed_point(K), tol)

    @classmethod
    def classical_chain(cls, P) -> "FCSSpec":
        """Markov chain with row-stochastic matrix ``P`` (or flip probability ``p``).

        ``V_i = sum_b sqrt(P[i, b]) |b><i|``: the bond remembers the current
        symbol, diagonal observables see the stationary chain, and the dual
        transfer map acts as ``P`` on diagonal matrices while sending
        off-diagonal ones to the diagonal, so its spectrum is that of ``P``
        padded with zeros.
        """
        if np.isscalar(P):
            p = float(P)
            P = np.array([[1 - p, p], [p, 1 - p]])
        P = np.asarray(P, dtype=float)
        d = P.shape[0]
        K = np.zeros((d, d, d))
        for i in range(d):
            K[i, :, i] = np.sqrt(P[i, :])
        return cls.from_kraus(K)

    @classmethod
    def periodic(cls) -> "FCSSpec":
        """Deterministic alternating chain; the transfer map has eigenvalue -1."""
        return cls.classical_chain(np.array([[0.0, 1.0], [1.0, 0.0]]))

    @classmethod
    def aklt(cls) -> "FCSSpec":
        """Spin-1 valence-bond solid, site basis ordered ``m = +1, 0, -1``."""
        sp_ = np.array([[0, 1], [0, 0]], dtype=float)
        sz = np.diag([1.0, -1.0])
        K = np.array([np.sqrt(2 / 3) * sp_, -np.sqrt(1 / 3) * sz, -np.sqrt(2 / 3) * sp_.T])
        return cls.from_kraus(K)

    @classmethod
    def random(cls, bond_dim: int = 2, site_dim: int = 2, seed=None) -> "FCSSpec":
        """Kraus family cut from a Haar-like random isometry."""
        rng = np.random.default_rng(seed)
        k, d = bond_dim, site_dim
        g = rng.normal(size=(d * k, k)) + 1j * rng.normal(size=(d * k, k))
        q, r = np.linalg.qr(g)
        q = q * (np.diag(r) / np.abs(np.diag(r)))[None, :]
        return cls.from_kraus(q.reshape(d, k, k), tol=1e-11)

    @classmethod
    def product(cls, vector) -> "FCSSpec":
        """Bond dimension one: the pure product state of ``vector``."""
        v = np.asarray(vector, dtype=complex)
        v = v / np.linalg.norm(v)
        return cls.from_kraus(v.conj().reshape(-1, 1, 1))

    # serialization
    def to_dict(self) -> dict:
        def enc(m):
            return [[float(z.real), float(z.imag)] for z in np.asarray(m).ravel()]
        return {"bond_dim": self.bond_dim, "site_dim": self.site_dim,
                "kraus": [enc(V) for V in self.kraus], "tol": self.tol}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "FCSSpec":
        k, d = int(doc["bond_dim"]), int(doc["site_dim"])
        mats = []
        for entry in doc["kraus"]:
            a = np.asarray(entry, dtype=float)
            if a.shape[-1] == 2 and a.size == 2 * k * k:
                m = (a[..., 0] + 1j * a[..., 1]).reshape(k, k)
            elif a.size == k * k:
                m = a.reshape(k, k).astype(complex)
            else:
                raise InvariantError(f"kraus entry of size {a.size} does not fit bond_dim {k}")
            mats.append(m)
        if len(mats) != d:
            raise InvariantError(f"expected {d} kraus matrices, got {len(mats)}")
        return cls.from_kraus(np.array(mats), tol=float(doc.get("tol", 1e-12)))

    @classmethod
    def from_json(cls, source) -> "FCSSpec":
        """Load from a JSON string or a path to a JSON file."""
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            source = Path(source).read_text()
        return cls.from_dict(json.loads(source))


@dataclass(frozen=True, eq=False)
class TransferOperator:
    """Matrix of the dual transfer map ``X -> sum_i V_i^dagger X V_i`` on row-major vectors."""

    matrix: np.ndarray
    eigenvalues: np.ndarray
    rho: np.ndarray
    bond_dim: int

    def apply(self, X: np.ndarray, n: int = 1) -> np.ndarray:
        v = np.asarray(X, dtype=complex).ravel()
        for _ in range(n):
            v = self.matrix @ v
        return v.reshape(self.bond_dim, self.bond_dim)

    @property
    def projection(self) -> np.ndarray:
        """Matrix of ``X -> tr(rho X) 1``."""
        k = self.bond_dim
        return np.outer(np.eye(k).ravel(), self.rho.T.ravel())

    @property
    def spectral_radius(self) -> float:
        return float(np.abs(self.eigenvalues[0]))


def dual_transfer(spec: FCSSpec) -> TransferOperator:
    # vec(A X B) = (A kron B^T) vec(X) for row-major vec
    L = sum(np.kron(V.conj().T, V.T) for V in spec.kraus)
    ev = np.linalg.eigvals(L)
    ev = ev[np.argsort(-np.abs(ev), kind="stable")]
    return TransferOperator(L, ev, np.array(spec.rho), spec.bond_dim)


@dataclass(frozen=True)
class MixingCertificate:
    """Exponential convergence ``||L^n(A) - tr(rho A) 1|| <= C exp(-M n) ||A||``."""

    slem: float
    rate: float
    prefactor: float
    is_mixing: bool
    peripheral: tuple = field(default=())

    def bound(self, n) -> np.ndarray:
        n = np.asarray(n, dtype=float)
        if not self.is_mixing:
            return np.full(n.shape, np.inf)
        with np.errstate(invalid="ignore"):
            e = np.where(n == 0, 1.0, np.exp(-self.rate * n))
        return self.prefactor * e


def mixing_analysis(t: TransferOperator, tol: float = 1e-9, n_max: int = 64) -> MixingCertificate:
    """Classify the peripheral spectrum and certify exponential mixing.

    The rate is ``-log`` of the second largest eigenvalue modulus. The
    prefactor is ``sqrt(k) max_n ||L^n - P||_2 exp(M n)`` over ``n <= n_max``,
    which bounds the operator-norm deviation for every ``A`` because
    ``||Y|| <= ||Y||_F`` and ``||A||_F <= sqrt(k) ||A||``.
    """
    ev = t.eigenvalues
    per = tuple(complex(z) for z in ev if abs(abs(z) - 1) <= tol)
    is_mixing = len(per) == 1 and abs(per[0] - 1) <= tol
    rest = np.abs(ev[1:]) if len(ev) > 1 else np.zeros(0)
    slem = float(rest.max()) if rest.size else 0.0
    if not is_mixing:
        return MixingCertificate(slem, 0.0, float("inf"), False, per)
    rate = float("inf") if slem < 1e-14 else -float(np.log(slem))
    k = t.bond_dim
    P = t.projection
    D = t.matrix - P
    Dn = np.eye(k * k, dtype=complex) - P
    C = np.linalg.norm(Dn, 2)
    for n in range(1, n_max + 1):
        Dn = D @ Dn
        nrm = np.linalg.norm(Dn, 2)
        if np.isinf(rate):
            if nrm > 1e-12:
                rate = float(np.log(1e12))
            else:
                continue
        C = max(C, nrm * np.exp(rate * n))
    return MixingCertificate(slem, rate, float(np.sqrt(k) * C * (1 + 1e-9)), True, per)


class FCSState(StateFunctional):
    """Translation-invariant state defined by an ``FCSSpec``."""

    def __init__(self, spec: FCSSpec):
        self.spec = spec
        self.d = spec.site_dim
        self.translation_invariant = True
        self._transfer = None
        self._cert = None
        w, U = np.linalg.eigh(spec.rho)
        self._sqrt_rho = (U * np.sqrt(np.clip(w, 0, None))) @ U.conj().T

    @property
    def transfer(self) -> TransferOperator:
        if self._transfer is None:
            self._transfer = dual_transfer(self.spec)
        return self._transfer

    @property
    def certificate(self) -> MixingCertificate:
        if self._cert is None:
            self._cert = mixing_analysis(self.transfer)
        return self._cert

    def amplitudes(self, n: int) -> np.ndarray:
        """Stack ``A_J sqrt(rho)`` for all words ``J`` of length ``n``, shape ``(d^n, k, k)``."""
        K = self.spec.kraus
        k = self.spec.bond_dim
        psi = self._sqrt_rho[None, :, :]
        for _ in range(n):
            psi = np.einsum("iab,Jbc->Jiac", K, psi).reshape(-1, k, k)
        return psi

    def reduced_density(self, sites: Interval) -> np.ndarray:
        n = sites.length
        amp = self.amplitudes(n).reshape(self.d ** n, -1)
        return amp @ amp.conj().T

    def word_map(self, q: LocalOperator, X: np.ndarray) -> np.ndarray:
        """``E_q(X) = sum_{IJ} q_{IJ} A_I^dagger X A_J``."""
        K = self.spec.kraus
        k = self.spec.bond_dim
        A = np.eye(k, dtype=complex)[None]
        for _ in range(q.support.length):
            A = np.einsum("iab,Jbc->Jiac", K, A).reshape(-1, k, k)
        return np.einsum("IJ,Iba,bc,Jcd->ad", q.matrix, A.conj(), X, A, optimize=True)

    def pair_expect(self, q1: LocalOperator, q2: LocalOperator) -> complex:
        g = gap_between(q1.support, q2.support)
        if g < 0:
            return self.expect(q1 @ q2)
        # operators on disjoint sites commute, so only the spatial order matters
        left, right = (q1, q2) if q1.support.hi < q2.support.lo else (q2, q1)
        k = self.spec.bond_dim
        Y = self.word_map(right, np.eye(k))
        Y = self.transfer.apply(Y, g)
        Y = self.word_map(left, Y)
        return complex(np.trace(self.spec.rho @ Y))

    def correlation_bound(self, q1, q2, gap: int) -> float:
        cert = self.certificate
        if not cert.is_mixing:
            raise MixingCertificateError("transfer operator has nontrivial peripheral spectrum")
        if gap < 0:
            return 2.0 * q1.norm() * q2.norm()
        return float(cert.bound(gap)) * q1.norm() * q2.norm()

    def describe(self) -> dict:
        return {"kind": "fcs", "spec": self.spec.to_dict()}


def fcs_expect(spec: FCSSpec, q: LocalOperator) -> complex:
    """Expectation through the bond-space contraction ``tr(rho E_q(1))``."""
    st = FCSState(spec)
    return complex(np.trace(spec.rho @ st.word_map(q, np.eye(spec.bond_dim))))


def fcs_rank_probe(state: StateFunctional, k_left: int, k_right: int, rtol: float = 1e-8) -> int:
    """Numerical rank of ``[phi(a_i b_j)]`` over matrix-unit bases of adjacent windows."""
    d = state.d
    dl, dr = d ** k_left, d ** k_right
    rho = state.reduced_density(Interval(0, k_left + k_right - 1))
    # phi(E_ab x E_cd) = rho[(b, d), (a, c)]
    R = rho.reshape(dl, dr, dl, dr).transpose(2, 0, 3, 1).reshape(dl * dl, dr * dr)
    s = np.linalg.svd(R, compute_uv=False)
    return int(np.sum(s > rtol * s[0]))
