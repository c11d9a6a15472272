"""Finite-state Markov driving noise.

Transition matrices are row-stochastic ``(m, m)`` arrays. The chain object
bundles the matrix with a stationary distribution; the dual (time-reversed)
chain, path sampling and the seed-map (random mapping) representation
``g_s(t)`` of the transition kernel live here as well.
"""

from __future__ import annotations

import math
import warnings
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import NotStochastic, ZeroMassState
from .rng import make_rng

ROW_SUM_TOL = 1e-9


class NonUniqueStationaryWarning(UserWarning):
    """Raised (as a warning) when Q has several closed classes."""


def check_stochastic(Q, tol: float = ROW_SUM_TOL) -> np.ndarray:
    Q = np.array(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] == 0:
        raise NotStochastic(f"transition matrix must be square and non-empty, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise NotStochastic("transition matrix has non-finite entries")
    if Q.min() < -tol or Q.max() > 1 + tol:
        raise NotStochastic("transition probabilities must lie in [0, 1]")
    dev = np.abs(Q.sum(axis=1) - 1.0)
    if dev.max() > tol:
        bad = int(dev.argmax())
        raise NotStochastic(f"row {bad} sums to {Q[bad].sum():.15g}")
    return np.clip(Q, 0.0, 1.0)


def _graph(Q: np.ndarray) -> csr_matrix:
    return csr_matrix((Q > 0).astype(np.int8))


DENSE_SCC_MAX = 256


def _scc_labels(Q: np.ndarray) -> np.ndarray:
    """Strong-component label per state (arbitrary but consistent integers)."""
    m = Q.shape[0]
    if m > DENSE_SCC_MAX:
        return connected_components(_graph(Q), directed=True, connection="strong")[1]
    # transitive closure by repeated squaring; cheap for the small state spaces of noise chains
    R = (Q > 0) | np.eye(m, dtype=bool)
    while True:
        R2 = (R.astype(np.int64) @ R.astype(np.int64)) > 0
        if np.array_equal(R2, R):
            break
        R = R2
    # label = smallest state in the same component
    return np.argmax(R & R.T, axis=1)


def communicating_classes(Q) -> tuple[list[np.ndarray], list[bool]]:
    """Strongly connected components of the positive-entry graph.

    Returns the classes (sorted index arrays, ordered by smallest member) and
    a flag per class telling whether it is closed, i.e. has no edge leaving it.
    """
    Q = np.asarray(Q)
    labels = _scc_labels(Q)
    classes = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    classes.sort(key=lambda c: int(c[0]))
    src, dst = np.nonzero(Q > 0)
    leaving = set(labels[src[labels[src] != labels[dst]]].tolist())
    closed = [int(labels[c[0]]) not in leaving for c in classes]
    return classes, closed


def _solve_closed_class(Qc: np.ndarray) -> np.ndarray:
    k = Qc.shape[0]
    if k == 1:
        return np.ones(1)
    A = Qc.T - np.eye(k)
    A[-1, :] = 1.0
    b = np.zeros(k)
    b[-1] = 1.0
    pc = np.linalg.solve(A, b)
    pc = np.clip(pc, 0.0, None)
    return pc / pc.sum()


def stationary_distribution(Q) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix.

    Solves ``(Q^T - I) p = 0`` with ``sum(p) = 1`` on each closed communicating
    class. If ``Q`` has a single closed class the unique ``p`` (1-D) is
    returned. Otherwise a 2-D array whose rows are the extremal stationary
    distributions is returned and a :class:`NonUniqueStationaryWarning` is
    issued.
    """
    return _stationary(check_stochastic(Q))


def _stationary(Q: np.ndarray) -> np.ndarray:
    m = Q.shape[0]
    classes, closed = communicating_classes(Q)
    extremal = []
    for c, is_closed in zip(classes, closed):
        if not is_closed:
            continue
        p = np.zeros(m)
        p[c] = _solve_closed_class(Q[np.ix_(c, c)])
        extremal.append(p)
    if len(extremal) == 1:
        return extremal[0]
    warnings.warn(
        f"transition matrix has {len(extremal)} closed classes; returning all extremal solutions",
        NonUniqueStationaryWarning,
        stacklevel=3,
    )
    return np.vstack(extremal)


def is_irreducible(Q) -> bool:
    Q = np.asarray(Q)
    return bool(np.all(_scc_labels(Q) == 0))


def period(Q, state: int) -> int:
    """Period of ``state``: gcd of cycle lengths through it (0 if none).

    Uses BFS levels inside the state's communicating class: the period is the
    gcd of ``level[u] + 1 - level[v]`` over class edges ``u -> v``.
    """
    Q = np.asarray(Q)
    classes, _ = communicating_classes(Q)
    cls = next(c for c in classes if state in c)
    members = set(int(i) for i in cls)
    level = {state: 0}
    frontier = [state]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(Q[u] > 0):
                v = int(v)
                if v in members and v not in level:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    g = 0
    for u in members:
        for v in np.flatnonzero(Q[u] > 0):
            v = int(v)
            if v in members:
                g = math.gcd(g, abs(level[u] + 1 - level[v]))
    return g


def is_aperiodic(Q) -> bool:
    """True iff every state lying on a cycle has period 1."""
    Q = np.asarray(Q)
    classes, _ = communicating_classes(Q)
    periods = [period(Q, int(c[0])) for c in classes]
    return all(d in (0, 1) for d in periods) and any(d == 1 for d in periods)


@dataclass(frozen=True)
class MarkovChain:
    """Transition matrix ``Q`` with stationary distribution ``p``.

    ``p`` is computed when omitted; chains with several closed classes must
    pass the intended stationary ``p`` explicitly.
    """

    Q: np.ndarray
    p: np.ndarray | None = None
    states: tuple[str, ...] | None = None

    def __post_init__(self):
        Q = check_stochastic(self.Q)
        if self.p is None:
            with warnings.catch_warnings():
                warnings.simplefilter("error", NonUniqueStationaryWarning)
                try:
                    p = _stationary(Q)
                except NonUniqueStationaryWarning as exc:
                    raise NotStochastic(
                        "chain has several stationary distributions; pass p explicitly"
                    ) from exc
        else:
            p = np.array(self.p, dtype=float)
            if p.shape != (Q.shape[0],) or p.min() < -1e-12 or abs(p.sum() - 1) > 1e-10:
                raise NotStochastic("p must be a probability vector of length m")
            if np.abs(p @ Q - p).max() > 1e-10:
                raise NotStochastic("p is not stationary for Q")
            p = np.clip(p, 0.0, None)
        states = self.states
        if states is None:
            states = tuple(f"t{i + 1}" for i in range(Q.shape[0]))
        elif len(states) != Q.shape[0]:
            raise NotStochastic("number of state labels does not match Q")
        Q.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "states", tuple(states))

    @property
    def m(self) -> int:
        return self.Q.shape[0]

    @property
    def is_bernoulli(self) -> bool:
        return bool(np.allclose(self.Q, self.Q[0], atol=1e-12, rtol=0))

    @classmethod
    def bernoulli(cls, p: Sequence[float], states=None) -> "MarkovChain":
        p = np.asarray(p, dtype=float)
        return cls(np.tile(p, (len(p), 1)), p=p, states=states)


@dataclass(frozen=True)
class DualChain:
    """Time reversal ``q(t, s) = Q(s, t) p(s) / p(t)`` of a chain."""

    q: np.ndarray
    p: np.ndarray


def restrict_to_support(chain: MarkovChain) -> MarkovChain:
    """Delete states with zero stationary mass.

    Rows of the kept states need no renormalisation: a state with ``p(t) > 0``
    cannot move to a state with ``p = 0``.
    """
    keep = np.flatnonzero(chain.p > 0)
    if keep.size == chain.m:
        return chain
    Q = chain.Q[np.ix_(keep, keep)]
    p = chain.p[keep] / chain.p[keep].sum()
    states = tuple(chain.states[i] for i in keep)
    return MarkovChain(Q, p=p, states=states)


def dual_transition(chain: MarkovChain) -> DualChain:
    p = chain.p
    if np.any(p <= 0):
        raise ZeroMassState(
            f"state(s) {np.flatnonzero(p <= 0).tolist()} have zero mass; restrict to the support first"
        )
    q = chain.Q.T * p[None, :] / p[:, None]
    # exact row sums up to rounding; renormalise the last ulp away
    q = q / q.sum(axis=1, keepdims=True)
    return DualChain(q=q, p=p.copy())


def duality_defect(chain: MarkovChain, dual: DualChain) -> float:
    """max over state pairs of |Q(t,a) p(t) - q(a,t) p(a)|.

    The identity for arbitrary index sets A, B is a sum of these atoms, so the
    atomwise defect bounds it up to a factor m^2.
    """
    flow = chain.Q * chain.p[:, None]
    back = dual.q.T * chain.p[None, :]
    return float(np.abs(flow - back).max())


@dataclass(frozen=True)
class NoisePath:
    seq: np.ndarray
    origin: int | None = None

    def __len__(self) -> int:
        return len(self.seq)


@dataclass(frozen=True)
class SeedMap:
    """Cumulative thresholds ``F[t, k] = sum_{i<=k} Q(t, t_i)``, ``F[t, 0] = 0``.

    ``g_s(t) = t_k`` for ``F[t, k-1] < s <= F[t, k]``; ``s = 0`` is sent to the
    first state with positive mass in row ``t``.
    """

    thresholds: np.ndarray
    first_positive: np.ndarray = field(repr=False)
    # plain-float rows: bisect on lists is much faster than on numpy rows
    _rows: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if not self._rows:
            object.__setattr__(self, "_rows", tuple(row.tolist() for row in self.thresholds))

    @classmethod
    def from_chain(cls, chain: MarkovChain) -> "SeedMap":
        return cls.from_matrix(chain.Q, checked=True)

    @classmethod
    def from_matrix(cls, Q, checked: bool = False) -> "SeedMap":
        Q = np.asarray(Q, dtype=float) if checked else check_stochastic(Q)
        m = Q.shape[0]
        F = np.zeros((m, m + 1))
        F[:, 1:] = np.cumsum(Q, axis=1)
        first = np.empty(m, dtype=np.int64)
        for t in range(m):
            pos = np.flatnonzero(Q[t] > 0)
            first[t] = pos[0]
            # pin everything from the last positive entry on to exactly 1
            F[t, pos[-1] + 1:] = 1.0
        F = np.maximum.accumulate(F, axis=1)
        F.setflags(write=False)
        first.setflags(write=False)
        return cls(F, first)

    @property
    def m(self) -> int:
        return self.thresholds.shape[0]

    def cell_measure(self, t: int, a: int) -> float:
        """Lebesgue measure of ``{s : g_s(t) = a}`` read off the thresholds."""
        return float(self.thresholds[t, a + 1] - self.thresholds[t, a])

    def __call__(self, s, t):
        return seed_map_eval(self, s, t)

    def apply(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Vectorised ``g_s(t)`` over arrays of seeds and states."""
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=np.int64)
        F = self.thresholds[t, 1:]
        k = (F < s[..., None]).sum(axis=-1)
        k = np.minimum(k, self.m - 1)
        return np.where(s <= 0.0, self.first_positive[t], k)


def seed_map_eval(g: SeedMap, s: float, t: int) -> int:
    if s <= 0.0:
        return int(g.first_positive[t])
    row = g._rows[t]
    k = bisect_left(row, s, 1)
    return min(k, len(row) - 1) - 1


def _inverse_cdf(p: np.ndarray, u: float) -> int:
    F = np.cumsum(p)
    pos = np.flatnonzero(p > 0)
    F[pos[-1]:] = 1.0
    if u <= 0.0:
        return int(pos[0])
    return int(min(bisect_left(F, u), len(p) - 1))


def sample_path(chain: MarkovChain, n: int, seed: int, stream: int = 0) -> NoisePath:
    """Stationary noise path ``omega_0 ~ p``, ``omega_{i+1} ~ Q(omega_i, .)``.

    Transitions are driven through the seed map with uniform seeds, so the
    path is a deterministic function of ``(seed, stream)``.
    """
    if n < 1:
        raise ValueError("horizon n must be >= 1")
    rng = make_rng(seed, stream)
    u = rng.random(n)
    g = SeedMap.from_chain(chain)
    rows = [list(r) for r in g.thresholds]
    first = g.first_positive.tolist()
    m = chain.m
    seq = np.empty(n, dtype=np.int64)
    t = _inverse_cdf(chain.p, float(u[0]))
    seq[0] = t
    for i in range(1, n):
        s = u[i]
        if s <= 0.0:
            t = first[t]
        else:
            t = min(bisect_left(rows[t], s, 1), m) - 1
        seq[i] = t
    seq.setflags(write=False)
    return NoisePath(seq=seq, origin=seed)


def is_admissible(chain: MarkovChain, path: NoisePath) -> bool:
    s = np.asarray(path.seq)
    return bool(np.all(chain.Q[s[:-1], s[1:]] > 0))


def chain_diagnostics(chain: MarkovChain) -> dict:
    """Summary used by the ``chain-info`` report."""
    out = {
        "states": list(chain.states),
        "Q": chain.Q.tolist(),
        "p": chain.p.tolist(),
        "irreducible": is_irreducible(chain.Q),
        "aperiodic": is_aperiodic(chain.Q),
        "bernoulli": chain.is_bernoulli,
        "stationary_residual": float(np.abs(chain.p @ chain.Q - chain.p).max()),
    }
    support = restrict_to_support(chain)
    out["support"] = list(support.states)
    dual = dual_transition(support)
    out["q"] = dual.q.tolist()
    out["duality_defect"] = duality_defect(support, dual)
    out["reversible"] = bool(np.allclose(dual.q, support.Q, atol=1e-12, rtol=0))
    return out

