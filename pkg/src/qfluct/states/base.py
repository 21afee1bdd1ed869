"""Common interface of expectation oracles."""
from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from ..algebra import Interval, LocalOperator, embed, join, translate
from ..errors import MixingCertificateError


class StateFunctional(ABC):
    """Expectation functional on local operators of a spin chain.

    Subclasses provide ``reduced_density``; everything else follows from it.
    """

    d: int = 2
    translation_invariant: bool = True

    @abstractmethod
    def reduced_density(self, sites: Interval) -> np.ndarray:
        """Density matrix of the restriction to ``sites`` (trace one)."""

    def expect(self, q: LocalOperator) -> complex:
        rho = self.reduced_density(q.support)
        return complex(np.einsum("ij,ji->", rho, q.matrix))

    def expect_many(self, ops) -> np.ndarray:
        ops = list(ops)
        if not ops:
            return np.zeros(0, complex)
        hull = ops[0].support
        for q in ops[1:]:
            hull = hull.hull(q.support)
        if self.d ** hull.length <= 2 ** 12:
            rho = self.reduced_density(hull)
            return np.array([_expect_embedded(rho, hull, q) for q in ops])
        return np.array([self.expect(q) for q in ops])

    def pair_expect(self, q1: LocalOperator, q2: LocalOperator) -> complex:
        """``phi(q1 q2)`` for operators possibly far apart."""
        return self.expect(q1 @ q2)

    def truncated_correlation(self, q1: LocalOperator, q2: LocalOperator) -> complex:
        return self.pair_expect(q1, q2) - self.expect(q1) * self.expect(q2)

    def correlation_bound(self, q1: LocalOperator, q2: LocalOperator, gap: int) -> float:
        """Certified bound on the truncated correlation of operators ``gap`` sites apart.

        Raises ``MixingCertificateError`` when the state has no certificate.
        """
        raise MixingCertificateError(f"{type(self).__name__} carries no mixing certificate")

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


def _expect_embedded(rho: np.ndarray, window: Interval, q: LocalOperator) -> complex:
    """``tr(rho q)`` where ``rho`` lives on ``window`` and ``q`` inside it."""
    from ..algebra import partial_trace

    if q.support != window:
        rho = partial_trace(rho, window, q.support, q.d, normalize=False)
    return complex(np.einsum("ij,ji->", rho, q.matrix))


def gap_between(a: Interval, b: Interval) -> int:
    """Number of sites strictly between two disjoint intervals (negative if they overlap)."""
    if a.hi < b.lo:
        return b.lo - a.hi - 1
    if b.hi < a.lo:
        return a.lo - b.hi - 1
    return -1
