"""Finite invariant orbits of at most two points per state.

A family ``{A_t}`` with ``f_t(A_t) = A_a`` on every edge ``Q(t, a) > 0`` is
the obstruction to mostly contracting behaviour for interval maps. Writing
``A_t = {x_t, y_t}`` with ``x_t <= y_t``, a spanning tree of the transition
graph expresses every ``A_t`` through the root's pair; each non-tree edge is
then an equation in the root pair alone.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import NotIrreducible, PhaseSpaceMismatch
from .maps import MapFamily
from .markov_chain import MarkovChain, is_irreducible, restrict_to_support

TOL_ACCEPT = 1e-9
GRID = 4096
STARTS = 64
BISECT_TOL = 1e-12


@dataclass(frozen=True)
class OrbitCandidate:
    points: tuple
    residual: float
    method: str
    metadata: dict = field(default_factory=dict)

    found = True

    def to_dict(self) -> dict:
        return {
            "found": True,
            "points": [list(p) for p in self.points],
            "residual": self.residual,
            "method": self.method,
            **self.metadata,
        }


@dataclass(frozen=True)
class NotFound:
    grid: int
    starts: int
    best_residual: float
    method: str
    metadata: dict = field(default_factory=dict)

    found = False

    def to_dict(self) -> dict:
        return {
            "found": False,
            "grid": self.grid,
            "starts": self.starts,
            "best_residual": self.best_residual,
            "method": self.method,
            "note": "numerical search; absence of a candidate is evidence, not proof",
            **self.metadata,
        }


def constraint_edges(chain: MarkovChain) -> list[tuple[int, int]]:
    return [(int(t), int(a)) for t, a in zip(*np.nonzero(chain.Q > 0))]


def spanning_tree(chain: MarkovChain, root: int = 0):
    """BFS tree along out-edges; returns (parent per state, tree edges, non-tree edges, BFS order)."""
    m = chain.m
    parent = [-1] * m
    parent[root] = root
    order = [root]
    tree = set()
    queue = deque([root])
    while queue:
        t = queue.popleft()
        for a in np.flatnonzero(chain.Q[t] > 0):
            a = int(a)
            if parent[a] == -1:
                parent[a] = t
                tree.add((t, a))
                order.append(a)
                queue.append(a)
    rest = [e for e in constraint_edges(chain) if e not in tree]
    return parent, sorted(tree), rest, order


def _hausdorff(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    d = np.abs(p[:, None] - q[None, :])
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def verify_orbit(candidate, chain: MarkovChain, family: MapFamily) -> float:
    """Max over edges of the Hausdorff distance between ``f_t(A_t)`` and ``A_a``."""
    pts = candidate.points if isinstance(candidate, OrbitCandidate) else candidate
    worst = 0.0
    for t, a in constraint_edges(chain):
        f = family.maps[t]
        img = [float(f(pts[t][0])), float(f(pts[t][1]))]
        worst = max(worst, _hausdorff(img, pts[a]))
    return worst


def _check_scope(chain: MarkovChain, family: MapFamily) -> MarkovChain:
    if family.space.is_circle:
        raise PhaseSpaceMismatch("invariant-orbit detection is an interval statement; circle input refused")
    if len(family) != chain.m:
        raise ValueError(f"{len(family)} fiber maps for {chain.m} chain states")
    support = restrict_to_support(chain)
    if not is_irreducible(support.Q):
        raise NotIrreducible("transition graph is not strongly connected on the support")
    return support


def _restrict_family(chain: MarkovChain, support: MarkovChain, family: MapFamily) -> MapFamily:
    if support.m == chain.m:
        return family
    keep = [chain.states.index(s) for s in support.states]
    return MapFamily(family.space, tuple(family.maps[i] for i in keep))


def _propagate_points(family: MapFamily, parent, order, x) -> list:
    """``h_t(x)`` for every state along the tree; ``x`` may be an array."""
    h = [None] * len(parent)
    h[order[0]] = x
    for a in order[1:]:
        t = parent[a]
        h[a] = family.maps[t](h[t])
    return h


def _edge_defects(family: MapFamily, h, edges) -> np.ndarray:
    return np.array([np.asarray(family.maps[t](h[t])) - np.asarray(h[a]) for t, a in edges])


def _detect_preserving(chain, family, grid, tol_accept):
    parent, _, rest, order = spanning_tree(chain)
    space = family.space
    xs = np.linspace(space.a, space.b, grid)
    h = _propagate_points(family, parent, order, xs)
    if not rest:
        roots = xs
        best = 0.0
    else:
        D = _edge_defects(family, h, rest)
        worst = np.abs(D).max(axis=0)
        best = float(worst.min())
        d0 = D[0]
        cand = list(xs[np.abs(d0) <= tol_accept])
        flips = np.flatnonzero(np.sign(d0[:-1]) * np.sign(d0[1:]) < 0)
        e0 = rest[0]
        for i in flips:
            cand.append(_bisect_edge(family, parent, order, e0, xs[i], xs[i + 1]))
        roots = []
        for x in sorted(cand):
            hx = _propagate_points(family, parent, order, float(x))
            res = float(np.abs(_edge_defects(family, hx, rest)).max())
            best = min(best, res)
            if res < tol_accept and (not roots or x - roots[-1] > tol_accept):
                roots.append(float(x))
        roots = np.array(roots)
    meta = {"grid": grid, "tree_root": int(order[0]), "non_tree_edges": len(rest)}
    if roots.size == 0:
        return NotFound(grid, 0, best, "grid-bisection", meta)
    lo = _propagate_points(family, parent, order, float(roots.min()))
    hi = _propagate_points(family, parent, order, float(roots.max()))
    pts = tuple((float(min(l, u)), float(max(l, u))) for l, u in zip(lo, hi))
    meta["root_solutions"] = [float(r) for r in roots[:16]]
    meta["n_root_solutions"] = int(roots.size)
    return OrbitCandidate(pts, verify_orbit(pts, chain, family), "grid-bisection", meta)


def _bisect_edge(family, parent, order, edge, lo, hi) -> float:
    t, a = edge

    def d(x):
        h = _propagate_points(family, parent, order, x)
        return float(family.maps[t](h[t])) - float(h[a])

    dlo = d(lo)
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        dm = d(mid)
        if dm == 0.0:
            return mid
        if (dm < 0) == (dlo < 0):
            lo, dlo = mid, dm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _pair_points(family, parent, order, xr, yr):
    pts = [None] * len(parent)
    pts[order[0]] = (min(xr, yr), max(xr, yr))
    for a in order[1:]:
        t = parent[a]
        f = family.maps[t]
        u, v = float(f(pts[t][0])), float(f(pts[t][1]))
        pts[a] = (min(u, v), max(u, v))
    return pts


def _detect_mixed(chain, family, grid, starts, tol_accept):
    parent, _, rest, order = spanning_tree(chain)
    space = family.space
    a, b = space.a, space.b

    def residuals(z):
        pts = _pair_points(family, parent, order, float(z[0]), float(z[1]))
        out = []
        for t, s in rest:
            f = family.maps[t]
            u, v = float(f(pts[t][0])), float(f(pts[t][1]))
            out.extend([min(u, v) - pts[s][0], max(u, v) - pts[s][1]])
        return np.array(out) if out else np.zeros(1)

    k = int(np.ceil(np.sqrt(starts)))
    seeds = a + (b - a) * (np.arange(k) + 0.5) / k
    best, best_pts = np.inf, None
    n_starts = 0
    for i in range(k):
        for j in range(k):
            if n_starts >= starts:
                break
            n_starts += 1
            sol = least_squares(residuals, [seeds[i], seeds[j]], bounds=([a, a], [b, b]), method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15)
            pts = _pair_points(family, parent, order, float(sol.x[0]), float(sol.x[1]))
            res = verify_orbit(pts, chain, family)
            if res < best:
                best, best_pts = res, pts
    meta = {"grid": grid, "starts": n_starts, "tree_root": int(order[0]), "non_tree_edges": len(rest)}
    if best < tol_accept:
        return OrbitCandidate(tuple(best_pts), best, "gauss-newton", meta)
    return NotFound(grid, n_starts, float(best), "gauss-newton", meta)


def detect_invariant_orbit(
    chain: MarkovChain,
    family: MapFamily,
    tol_accept: float = TOL_ACCEPT,
    grid: int = GRID,
    starts: int = STARTS,
):
    """Search for ``{A_t}`` with ``f_t(A_t) = A_a`` on every edge.

    Orientation-preserving families reduce to single points (an increasing
    map keeps the order of a pair), found by a grid scan plus bisection on
    the first non-tree equation and filtered against all others. Families
    with a reversing map are searched over the root pair by multi-start
    bounded least squares. Returns an :class:`OrbitCandidate` or
    :class:`NotFound`.
    """
    support = _check_scope(chain, family)
    fam = _restrict_family(chain, support, family)
    if all(f.orientation > 0 for f in fam.maps):
        return _detect_preserving(support, fam, grid, tol_accept)
    return _detect_mixed(support, fam, grid, starts, tol_accept)


def mostly_contracting_precondition(chain: MarkovChain, family: MapFamily, **kwargs) -> dict:
    """Irreducibility plus orbit search, and what they imply."""
    if family.space.is_circle:
        raise PhaseSpaceMismatch("the orbit criterion applies to interval maps only")
    support = restrict_to_support(chain)
    irreducible = is_irreducible(support.Q)
    if not irreducible:
        return {"irreducible": False, "orbit": None, "implication": "chain not irreducible: no conclusion"}
    res = detect_invariant_orbit(chain, family, **kwargs)
    if res.found:
        implication = "hypothesis fails: no conclusion (the criterion is sufficient, not necessary)"
    else:
        implication = "no finite invariant orbit found: mostly contracting predicted"
    return {"irreducible": True, "orbit": res.to_dict(), "implication": implication}
