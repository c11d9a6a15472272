"""Ulam discretisation of the Markov kernels on ``T x X`` cells.

Cell ``(t, i)`` has global index ``t * N + i``. Both kernels factor through
single-map Ulam matrices ``U_f[i, j] = m(cell_i & f^-1(cell_j)) / m(cell_i)``:
the ``(t, a)`` block is ``Q(t, a) U_a`` for ``P^`` (the new state acts) and
``Q(t, a) U_t`` for ``P~`` (the current state acts).

Measures on cells are plain weight vectors; the fiber correspondences
``Xi``, ``Theta`` and ``Phi`` act blockwise on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .errors import ConvergenceFailure, MarginalMismatch, NonMonotoneWithoutFallback
from .maps import FiberMap, MapFamily, PhaseSpace
from .markov_chain import DualChain, MarkovChain, dual_transition
from .rng import make_rng

KERNELS = ("hat", "tilde")
SNAP_REL = 1e-9
DENSE_SOLVE_MAX = 256
BISECT_TOL = 1e-12


@dataclass(frozen=True)
class UlamPartition:
    space: PhaseSpace
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ValueError("a Ulam partition needs N >= 2 cells")

    @property
    def width(self) -> float:
        return self.space.length / self.N

    @property
    def edges(self) -> np.ndarray:
        e = self.space.a + self.space.length * np.arange(self.N + 1) / self.N
        e[-1] = self.space.b
        return e

    @property
    def midpoints(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])


@dataclass(frozen=True, eq=False)
class DiscretizedMeasure:
    """Weights over the ``m * N`` cells, state-major."""

    weights: np.ndarray
    m: int
    N: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.m * self.N,):
            raise ValueError(f"expected {self.m * self.N} weights, got shape {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def blocks(self) -> np.ndarray:
        return self.weights.reshape(self.m, self.N)

    @property
    def state_marginal(self) -> np.ndarray:
        return self.blocks.sum(axis=1)

    @property
    def x_marginal(self) -> np.ndarray:
        return self.blocks.sum(axis=0)

    def conditional(self, t: int) -> np.ndarray:
        b = self.blocks[t]
        s = b.sum()
        return b / s if s > 0 else np.zeros_like(b)


@dataclass(frozen=True, eq=False)
class UlamMatrix:
    matrix: sp.csr_matrix
    kernel: str
    partition: UlamPartition
    m: int
    cell_maps: tuple
    metadata: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.partition.N

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def row_sum_defect(self) -> float:
        return float(np.abs(np.asarray(self.matrix.sum(axis=1)).ravel() - 1.0).max())


def _bisect_preimages(f: FiberMap, targets: np.ndarray, a: float, b: float) -> np.ndarray:
    """Solve ``F(x) = y`` on ``[a, b]`` for each target, ``F`` the (lift of the) map."""
    sign = float(f.orientation)
    lo = np.full(targets.shape, a)
    hi = np.full(targets.shape, b)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        above = sign * (np.asarray(f.func(mid)) - targets) > 0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.max(hi - lo) <= BISECT_TOL * (b - a):
            break
    return 0.5 * (lo + hi)


def map_transition_matrix(f: FiberMap, partition: UlamPartition) -> sp.csr_matrix:
    """Exact ``N x N`` Ulam matrix of a monotone map.

    Preimages of all cell edges (with integer shifts on the circle) split the
    domain into pieces that each sit in one source cell and map into one
    target cell; overlaps are the piece lengths. Preimages within
    ``SNAP_REL`` cell widths of a cell edge are snapped onto it so that maps
    permuting cells give exact permutation matrices.
    """
    space = partition.space
    N, a, b = partition.N, space.a, space.b
    edges = partition.edges
    w = partition.width
    ya, yb = float(f.func(a)), float(f.func(b))
    ymin, ymax = min(ya, yb), max(ya, yb)
    if space.is_circle:
        n = np.arange(int(np.ceil(ymin * N)), int(np.floor(ymax * N)) + 1)
        targets = n / N
    else:
        targets = edges[(edges >= ymin) & (edges <= ymax)]
    pre = _bisect_preimages(f, targets, a, b) if targets.size else np.empty(0)
    near = np.clip(np.rint((pre - a) / w).astype(np.int64), 0, N)
    snap = np.abs(pre - edges[near]) <= SNAP_REL * w
    pre = np.where(snap, edges[near], pre)
    bp = np.unique(np.concatenate([edges, pre[(pre > a) & (pre < b)]]))
    lengths = np.diff(bp)
    mids = 0.5 * (bp[:-1] + bp[1:])
    keep = lengths > 0
    lengths, mids = lengths[keep], mids[keep]
    src = np.clip(np.searchsorted(edges, mids, side="right") - 1, 0, N - 1)
    y = np.asarray(f(mids), dtype=float)
    tgt = np.clip(np.searchsorted(edges, y, side="right") - 1, 0, N - 1)
    vals = lengths / (edges[src + 1] - edges[src])
    return sp.coo_matrix((vals, (src, tgt)), shape=(N, N)).tocsr()


def monte_carlo_transition_matrix(f: FiberMap, partition: UlamPartition, K: int, seed: int, stream: int = 0) -> sp.csr_matrix:
    N = partition.N
    edges = partition.edges
    rng = make_rng(seed, stream)
    x = edges[:-1, None] + partition.width * rng.random((N, K))
    y = np.asarray(f(x.ravel()), dtype=float)
    tgt = np.clip(np.searchsorted(edges, y, side="right") - 1, 0, N - 1)
    src = np.repeat(np.arange(N), K)
    return sp.coo_matrix((np.full(src.size, 1.0 / K), (src, tgt)), shape=(N, N)).tocsr()


def build_ulam(
    chain: MarkovChain,
    family: MapFamily,
    N: int,
    kernel_tag: str = "hat",
    mc_samples: int | None = None,
    seed: int = 0,
    cell_maps=None,
) -> UlamMatrix:
    """Ulam matrix of ``P^`` (``kernel_tag='hat'``) or ``P~`` (``'tilde'``).

    Non-monotone families need ``mc_samples``: each cell is then sampled with
    that many uniform points and the count is kept in the metadata.
    """
    if kernel_tag not in KERNELS:
        raise ValueError(f"kernel_tag must be one of {KERNELS}")
    if len(family) != chain.m:
        raise ValueError(f"{len(family)} fiber maps for {chain.m} chain states")
    part = UlamPartition(family.space, int(N))
    meta = {"method": "exact", "snap_rel": SNAP_REL, "bisect_tol": BISECT_TOL}
    if cell_maps is None:
        if family.all_monotone:
            cell_maps = tuple(map_transition_matrix(f, part) for f in family.maps)
        elif mc_samples:
            cell_maps = tuple(
                monte_carlo_transition_matrix(f, part, int(mc_samples), seed, stream=t)
                for t, f in enumerate(family.maps)
            )
            meta = {"method": "monte_carlo", "samples_per_cell": int(mc_samples), "seed": seed}
        else:
            raise NonMonotoneWithoutFallback(
                "family has non-monotone maps; pass mc_samples to use the Monte-Carlo fallback"
            )
    Q = chain.Q
    m = chain.m
    zero = sp.csr_matrix((part.N, part.N))
    blocks = [
        [
            (Q[t, a] * cell_maps[a if kernel_tag == "hat" else t]) if Q[t, a] > 0 else zero
            for a in range(m)
        ]
        for t in range(m)
    ]
    M = sp.bmat(blocks, format="csr", dtype=float)
    M.sum_duplicates()
    M.eliminate_zeros()
    M.sort_indices()
    return UlamMatrix(M, kernel_tag, part, m, tuple(cell_maps), meta)


def left_multiply(v: np.ndarray, A: sp.csr_matrix) -> np.ndarray:
    """``v @ A`` straight from the CSR arrays, without building a transpose."""
    if getattr(A, "format", None) != "csr":
        A = sp.csr_matrix(A)
    rows = np.repeat(np.arange(A.shape[0]), np.diff(A.indptr))
    return np.bincount(A.indices, weights=v[rows] * A.data, minlength=A.shape[1])


def closed_cell_classes(M: UlamMatrix) -> list[np.ndarray]:
    """Closed communicating classes of the cell-level chain, by smallest member."""
    A = M.matrix
    ncomp, labels = connected_components(A, directed=True, connection="strong")
    src, dst = A.nonzero()
    leaving = np.zeros(ncomp, dtype=bool)
    leaving[labels[src][labels[src] != labels[dst]]] = True
    classes = [np.flatnonzero(labels == c) for c in range(ncomp) if not leaving[c]]
    classes.sort(key=lambda c: int(c[0]))
    return classes


def stationary_vectors(M: UlamMatrix, k_max: int | None = None, tol: float = 1e-9) -> list[DiscretizedMeasure]:
    """Extremal left fixed vectors, one per closed class of the cell chain.

    Each class carries a unique invariant probability vector, found by a
    direct solve of ``v (M_CC - I) = 0`` with one equation replaced by the
    normalisation (dense for small classes, sparse otherwise). Transient
    cells get zero weight.
    """
    A = M.matrix
    n = A.shape[0]
    dense = A.toarray() if n <= DENSE_SOLVE_MAX else None
    out = []
    for c in closed_cell_classes(M):
        if k_max is not None and len(out) >= k_max:
            break
        v = np.zeros(n)
        if c.size == 1:
            v[c] = 1.0
        elif c.size <= DENSE_SOLVE_MAX:
            sub = dense[np.ix_(c, c)] if dense is not None else A[c][:, c].toarray()
            lhs = sub.T - np.eye(c.size)
            lhs[-1, :] = 1.0
            rhs = np.zeros(c.size)
            rhs[-1] = 1.0
            x = np.clip(np.linalg.solve(lhs, rhs), 0.0, None)
            v[c] = x / x.sum()
        else:
            sub = A[c][:, c]
            lhs = (sub.T - sp.identity(c.size, format="csr")).tolil()
            lhs[c.size - 1, :] = np.ones(c.size)
            rhs = np.zeros(c.size)
            rhs[-1] = 1.0
            x = spsolve(lhs.tocsc(), rhs)
            x = np.clip(x, 0.0, None)
            v[c] = x / x.sum()
        resid = np.abs(left_multiply(v, A) - v).sum()
        if not np.isfinite(resid) or resid > tol:
            raise ConvergenceFailure(f"stationary solve residual {resid:.3g} exceeds {tol:g}")
        out.append(DiscretizedMeasure(v, M.m, M.N))
    return out


@dataclass(frozen=True)
class SpectralReport:
    """Top eigenvalues by modulus.

    ``unit_count`` counts moduli above ``1 - eps``; ``eigenvalue_one_count``
    counts eigenvalues within ``eps`` of 1 itself, which matches the number
    of invariant densities also for periodic cell chains.
    """

    moduli: tuple[float, ...]
    eigenvalues: tuple[complex, ...]
    unit_count: int
    eigenvalue_one_count: int
    gap: float
    eps: float
    iterations: int
    method: str

    def to_dict(self) -> dict:
        return {
            "moduli": list(self.moduli),
            "eigenvalues_re": [z.real for z in self.eigenvalues],
            "eigenvalues_im": [z.imag for z in self.eigenvalues],
            "unit_count": self.unit_count,
            "eigenvalue_one_count": self.eigenvalue_one_count,
            "gap": self.gap,
            "eps": self.eps,
            "iterations": self.iterations,
            "method": self.method,
        }


def _top(eigs, k: int, eps: float, iterations: int) -> SpectralReport:
    eigs = np.asarray(eigs, dtype=complex)
    # sort by modulus, ties by argument, so conjugate pairs come out in a fixed order
    order = np.lexsort((np.round(np.angle(eigs), 12), -np.round(np.abs(eigs), 12)))
    eigs = eigs[order][:k]
    moduli = np.abs(eigs)
    unit = moduli > 1.0 - eps
    rest = moduli[~unit]
    gap = float(1.0 - rest.max()) if rest.size else 0.0
    return SpectralReport(
        tuple(float(x) for x in moduli),
        tuple(complex(z) for z in eigs),
        int(unit.sum()),
        int((np.abs(eigs - 1.0) < eps).sum()),
        gap,
        eps,
        iterations,
        "subspace",
    )


def spectral_report(
    M: UlamMatrix | sp.spmatrix,
    k: int = 8,
    eps: float = 0.01,
    seed: int = 0,
    max_iter: int = 5000,
    tol: float = 1e-10,
    floor: float = 0.05,
) -> SpectralReport:
    """Top-``k`` eigenvalues by orthogonal iteration on ``M^T``.

    The block carries ``k + 4`` extra columns; Ritz values of the projected
    matrix are checked every few sweeps until the top ``k`` moduli above
    ``floor`` settle. Smaller moduli are not required to settle: Ulam
    matrices often have large nilpotent parts whose Ritz values wander at
    the ``eps_mach^(1/J)`` level for Jordan blocks of size ``J``.
    When the block would cover the whole space the Ritz values are the full
    spectrum after one sweep.
    """
    if k > 16:
        raise ValueError("spectral_report supports k <= 16")
    A = M.matrix if isinstance(M, UlamMatrix) else sp.csr_matrix(M)
    At = A.T.tocsr()
    n = A.shape[0]
    k = min(k, n)
    b = min(n, 2 * k + 4)
    V = make_rng(seed, 0).standard_normal((n, b))
    V, _ = np.linalg.qr(V)
    if b == n:
        return _top(np.linalg.eigvals(V.T @ (At @ V)), k, eps, 1)
    prev = None
    for it in range(1, max_iter + 1):
        V, _ = np.linalg.qr(At @ V)
        if it % 5 == 0:
            ev = np.linalg.eigvals(V.T @ (At @ V))
            mod = np.sort(np.abs(ev))[::-1][:k]
            if prev is not None:
                live = (mod > floor) | (prev > floor)
                if not live.any() or np.abs(mod - prev)[live].max() < tol:
                    return _top(ev, k, eps, it)
            prev = mod
    raise ConvergenceFailure(f"subspace iteration did not settle in {max_iter} sweeps")


@dataclass(frozen=True, eq=False)
class FEDReport:
    densities: list
    overlap: np.ndarray
    maximal_support_ok: bool
    steps: int | None
    history: tuple[float, ...]
    tol: float

    def to_dict(self) -> dict:
        return {
            "n_densities": len(self.densities),
            "overlap": self.overlap.tolist(),
            "maximal_support_ok": self.maximal_support_ok,
            "steps": self.steps,
            "final_distance": self.history[-1],
            "tol": self.tol,
        }


def fed_report(M: UlamMatrix, tol: float = 1e-12, n_iter: int = 1000, target: float = 1e-6) -> FEDReport:
    """Extremal densities, pairwise support overlaps and the maximal-support check.

    ``overlap[i, j]`` is the mass of density ``i`` on the cells where density
    ``j`` exceeds ``tol``. The check iterates ``u <- M u`` from the indicator
    of the union support; ``1 - min u`` is nonincreasing and must fall below
    ``target`` within ``n_iter`` steps.
    """
    dens = stationary_vectors(M)
    r = len(dens)
    supports = [d.weights > tol for d in dens]
    overlap = np.eye(r)
    for i in range(r):
        for j in range(r):
            if i != j:
                overlap[i, j] = float(dens[i].weights[supports[j]].sum())
    u = np.zeros(M.shape[0])
    for s in supports:
        u[s] = 1.0
    A = M.matrix
    history = [float(1.0 - u.min())]
    steps = 0 if history[0] < target else None
    for step in range(1, n_iter + 1):
        if steps is not None:
            break
        u = A @ u
        history.append(float(1.0 - u.min()))
        if history[-1] < target:
            steps = step
    return FEDReport(dens, overlap, steps is not None, steps, tuple(history), tol)


@dataclass(frozen=True, eq=False)
class FiberFamily:
    """One cell probability vector per state, plus the state weights ``p``."""

    fibers: np.ndarray
    p: np.ndarray


def _conditionals(mu: DiscretizedMeasure) -> tuple[np.ndarray, np.ndarray]:
    blocks = mu.blocks
    marg = blocks.sum(axis=1)
    cond = np.divide(blocks, marg[:, None], out=np.zeros_like(blocks), where=marg[:, None] > 0)
    return cond, marg


def xi_fibers(mu_hat: DiscretizedMeasure, dual: DualChain, tol: float = 1e-6) -> FiberFamily:
    """``mubar_t = sum_s q(t, s) muhat_s`` from the state conditionals of ``muhat``."""
    cond, marg = _conditionals(mu_hat)
    if marg.shape != dual.p.shape or np.abs(marg - dual.p).max() > tol:
        raise MarginalMismatch(f"state marginal {marg.tolist()} differs from p {dual.p.tolist()}")
    return FiberFamily(dual.q @ cond, dual.p.copy())


def _cell_maps(family: MapFamily, partition: UlamPartition, cell_maps=None):
    if cell_maps is not None:
        return cell_maps
    return tuple(map_transition_matrix(f, partition) for f in family.maps)


def theta_fibers(fibers: FiberFamily, family: MapFamily, partition: UlamPartition, cell_maps=None) -> DiscretizedMeasure:
    """``muhat'`` with state weights ``p`` and conditionals ``f_t`` pushing ``mubar_t``."""
    U = _cell_maps(family, partition, cell_maps)
    m, N = fibers.fibers.shape
    blocks = np.vstack([fibers.p[t] * left_multiply(fibers.fibers[t], U[t]) for t in range(m)])
    return DiscretizedMeasure(blocks.ravel(), m, N)


def roundtrip_check(mu_hat: DiscretizedMeasure, chain: MarkovChain, family: MapFamily, partition: UlamPartition, dual: DualChain | None = None, cell_maps=None) -> float:
    dual = dual or dual_transition(chain)
    back = theta_fibers(xi_fibers(mu_hat, dual), family, partition, cell_maps)
    return float(np.abs(back.weights - mu_hat.weights).sum())


def phi_map(mu_hat: DiscretizedMeasure, dual: DualChain) -> DiscretizedMeasure:
    """``mutilde`` with state weights ``p`` and conditionals ``mubar_t``."""
    fib = xi_fibers(mu_hat, dual)
    m, N = fib.fibers.shape
    return DiscretizedMeasure((fib.p[:, None] * fib.fibers).ravel(), m, N)


def phi_inverse(mu_tilde: DiscretizedMeasure, family: MapFamily, partition: UlamPartition, cell_maps=None) -> DiscretizedMeasure:
    cond, marg = _conditionals(mu_tilde)
    return theta_fibers(FiberFamily(cond, marg), family, partition, cell_maps)


def cdf_distance_cells(w1: np.ndarray, w2: np.ndarray, space: PhaseSpace) -> float:
    """``int |F1 - F2| dx`` for cell masses with uniform density inside each cell.

    The two vectors may have different lengths; both CDFs are piecewise
    linear on the union of their grids, so the integral is exact.
    """
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    e1 = UlamPartition(space, len(w1)).edges
    e2 = UlamPartition(space, len(w2)).edges
    grid = np.unique(np.concatenate([e1, e2]))
    F1 = np.interp(grid, e1, np.concatenate([[0.0], np.cumsum(w1)]))
    F2 = np.interp(grid, e2, np.concatenate([[0.0], np.cumsum(w2)]))
    d = F1 - F2
    h = np.diff(grid)
    d0, d1 = d[:-1], d[1:]
    same = d0 * d1 >= 0
    s = np.abs(d0) + np.abs(d1)
    cross = np.divide(d0**2 + d1**2, 2 * s, out=np.zeros_like(s), where=s > 0)
    seg = np.where(same, 0.5 * s, cross) * h
    return float(seg.sum())


def export_triplets(M: UlamMatrix, fh: IO[str]) -> None:
    """Sparse triplet text: a ``#`` header, ``rows cols nnz``, then ``row col value`` lines."""
    A = M.matrix.tocoo()
    fh.write(f"# ulam kernel={M.kernel} m={M.m} N={M.N} space={M.partition.space.kind}\n")
    fh.write(f"{A.shape[0]} {A.shape[1]} {A.nnz}\n")
    order = np.lexsort((A.col, A.row))
    for r, c, v in zip(A.row[order], A.col[order], A.data[order]):
        fh.write(f"{int(r)} {int(c)} {float(v)!r}\n")


def read_triplets(fh: IO[str]) -> sp.csr_matrix:
    lines = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
    rows, cols, _ = (int(x) for x in lines[0].split())
    data = np.array([ln.split() for ln in lines[1:]], dtype=float).reshape(-1, 3)
    return sp.coo_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=(rows, cols)).tocsr()
