"""Translation-invariant product states."""
from __future__ import annotations

from functools import reduce

import numpy as np

from ..algebra import Interval, LocalOperator
from ..errors import InvariantError
from .base import StateFunctional, gap_between


class ProductState(StateFunctional):
    """Infinite tensor power of a single-site density matrix."""

    def __init__(self, site_density, tol: float = 1e-12):
        rho = np.asarray(site_density, dtype=complex)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise InvariantError("site density must be square")
        if not np.allclose(rho, rho.conj().T, atol=tol):
            raise InvariantError("site density must be self-adjoint")
        if abs(np.trace(rho) - 1) > tol:
            raise InvariantError("site density must have unit trace")
        if np.linalg.eigvalsh(rho).min() < -tol:
            raise InvariantError("site density must be positive")
        self.rho = rho
        self.d = rho.shape[0]
        self.translation_invariant = True

    @classmethod
    def tracial(cls, d: int = 2) -> "ProductState":
        return cls(np.eye(d) / d)

    @classmethod
    def pure(cls, vector) -> "ProductState":
        v = np.asarray(vector, dtype=complex)
        v = v / np.linalg.norm(v)
        return cls(np.outer(v, v.conj()))

    @classmethod
    def z_up(cls) -> "ProductState":
        return cls.pure([1.0, 0.0])

    @classmethod
    def diagonal(cls, probs) -> "ProductState":
        p = np.asarray(probs, dtype=float)
        return cls(np.diag(p / p.sum()))

    @classmethod
    def bloch(cls, x: float, y: float, z: float) -> "ProductState":
        """Qubit state ``(1 + x X + y Y + z Z)/2``."""
        return cls(0.5 * np.array([[1 + z, x - 1j * y], [x + 1j * y, 1 - z]]))

    def reduced_density(self, sites: Interval) -> np.ndarray:
        return reduce(np.kron, [self.rho] * sites.length)

    def expect(self, q: LocalOperator) -> complex:
        # contract one site at a time instead of forming the full product density
        d, n = self.d, q.support.length
        t = q.matrix.reshape((d,) * (2 * n))
        for _ in range(n):
            # contract the leading row and column index of the remaining tensor
            t = np.tensordot(self.rho, t, axes=([0, 1], [t.ndim // 2, 0]))
        return complex(t)

    def reduce_to(self, q: LocalOperator, keep: Interval) -> np.ndarray:
        """``tr_rest((rho x ... x rho) q)`` over the sites of ``q`` outside ``keep``."""
        d, n = self.d, q.support.length
        t = q.matrix.reshape((d,) * (2 * n))
        m = n
        for idx in reversed(range(n)):
            if q.support.lo + idx in keep:
                continue
            t = np.tensordot(t, self.rho, axes=([idx, m + idx], [1, 0]))
            m -= 1
        return t.reshape(d ** m, d ** m)

    def pair_expect(self, q1: LocalOperator, q2: LocalOperator) -> complex:
        if gap_between(q1.support, q2.support) >= 0:
            return self.expect(q1) * self.expect(q2)
        # sites covered by only one factor are traced out before multiplying
        ov = q1.support.intersect(q2.support)
        a, b = self.reduce_to(q1, ov), self.reduce_to(q2, ov)
        return self.expect(LocalOperator(ov, a @ b, self.d))

    def correlation_bound(self, q1, q2, gap: int) -> float:
        return 0.0 if gap >= 0 else 2.0 * q1.norm() * q2.norm()

    def describe(self) -> dict:
        return {"kind": "product", "site_density": [[[z.real, z.imag] for z in row] for row in self.rho]}
