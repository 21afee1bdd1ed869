"""Two-point correlation tables and their exponential fits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..algebra import LocalOperator, translate
from ..dynamics import loglinear_fit
from .base import StateFunctional


@dataclass(frozen=True)
class DecayTable:
    """Truncated correlations ``|phi(q1 tau_n(q2)) - phi(q1) phi(q2)|`` and the fit ``K exp(-M n)``."""

    n: tuple
    values: tuple
    K: float
    M: float
    r2: float

    def rows(self):
        return list(zip(self.n, self.values))


def _pair_values(state: StateFunctional, q1, shifted):
    window = getattr(state, "window", None)
    if window is not None:
        ops = [q1 @ s for s in shifted]
        # one reduced density for the whole table
        vals = state.expect_many([q1] + list(shifted) + ops)
        m = len(shifted)
        return vals[0], vals[1:1 + m], vals[1 + m:]
    e1 = state.expect(q1)
    singles = np.array([state.expect(s) for s in shifted])
    pairs = np.array([state.pair_expect(q1, s) for s in shifted])
    return e1, singles, pairs


def two_point_decay(state: StateFunctional, q1: LocalOperator, q2: LocalOperator, n_list,
                    fit_min: int | None = None, floor: float = 1e-13) -> DecayTable:
    """Truncated correlation table over separations ``n_list``.

    The fit uses entries with ``n >= fit_min`` that exceed ``floor``; when
    every entry vanishes the rate is reported as ``inf``.
    """
    n_list = [int(n) for n in n_list]
    if any(n <= 0 for n in n_list) or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be positive and increasing")
    shifted = [translate(q2, n) for n in n_list]
    e1, singles, pairs = _pair_values(state, q1, shifted)
    vals = np.abs(pairs - e1 * singles)
    n = np.array(n_list, float)
    sel = n >= (fit_min if fit_min is not None else n[0])
    if np.all(vals[sel] <= floor):
        return DecayTable(tuple(n_list), tuple(map(float, vals)), 0.0, float("inf"), 1.0)
    slope, icpt, r2 = loglinear_fit(n[sel], vals[sel], floor)
    return DecayTable(tuple(n_list), tuple(map(float, vals)), float(np.exp(icpt)), -slope, r2)
