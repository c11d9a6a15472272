"""Empirical measures on ``T x X`` and physical-measure candidates.

Orbits are summarised by the empirical distribution of the pairs
``(omega_j, x_j)``, which approximates the ``(omega_0, x)`` marginal of a
Markovian measure. Measures are compared with

    D(mu, nu) = sum_t int |F_{mu,t}(x) - F_{nu,t}(x)| dx

over per-state sub-CDFs; on the circle each state's term is minimised over
an additive constant (weighted median), which is the circular transport
distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform

from .errors import DerivativeUnderflow, NotBernoulli, PhaseSpaceMismatch
from .lyapunov import DERIV_FLOOR, N_BATCHES, LyapunovEstimate
from .maps import MapFamily, PhaseSpace, compose_orbit
from .markov_chain import MarkovChain, NoisePath, SeedMap, _inverse_cdf, sample_path
from .rng import make_rng
from .skew import iterate_h, pi_project, sample_seed_path


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Atoms ``positions[t][k]`` with masses ``weights[t][k]``; total mass one."""

    positions: tuple
    weights: tuple
    space: PhaseSpace
    metadata: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.positions)

    @property
    def state_mass(self) -> np.ndarray:
        return np.array([w.sum() for w in self.weights])

    def conditional(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        w = self.weights[t]
        s = w.sum()
        return self.positions[t], (w / s if s > 0 else w)

    def mean_position(self) -> float:
        return float(sum(np.dot(p, w) for p, w in zip(self.positions, self.weights)))

    @classmethod
    def from_samples(cls, states, xs, m: int, space: PhaseSpace, weights=None, metadata=None) -> "EmpiricalMeasure":
        states = np.asarray(states, dtype=np.int64)
        xs = np.asarray(xs, dtype=float)
        if weights is None:
            weights = np.full(xs.shape, 1.0 / xs.size)
        weights = np.asarray(weights, dtype=float)
        pos, wts = [], []
        for t in range(m):
            sel = states == t
            u, inv = np.unique(xs[sel], return_inverse=True)
            pos.append(u)
            wts.append(np.bincount(inv, weights=weights[sel], minlength=u.size))
        return cls(tuple(pos), tuple(wts), space, dict(metadata or {}))

    @classmethod
    def from_histogram(cls, hist: np.ndarray, space: PhaseSpace, metadata=None) -> "EmpiricalMeasure":
        """Atoms at bin centres of an ``(m, G)`` mass array."""
        m, G = hist.shape
        centres = space.a + space.length * (np.arange(G) + 0.5) / G
        pos = tuple(centres[hist[t] > 0] for t in range(m))
        wts = tuple(hist[t][hist[t] > 0].astype(float) for t in range(m))
        return cls(pos, wts, space, dict(metadata or {}))


def average_measures(measures, space: PhaseSpace, weights=None) -> EmpiricalMeasure:
    k = len(measures)
    weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
    m = measures[0].m
    pos, wts = [], []
    for t in range(m):
        p = np.concatenate([mu.positions[t] for mu in measures])
        w = np.concatenate([c * mu.weights[t] for c, mu in zip(weights, measures)])
        u, inv = np.unique(p, return_inverse=True)
        pos.append(u)
        wts.append(np.bincount(inv, weights=w, minlength=u.size))
    return EmpiricalMeasure(tuple(pos), tuple(wts), space)


def weighted_median_l1(d: np.ndarray, L: np.ndarray) -> np.ndarray:
    """``min_c sum_k L_k |d_k - c|`` row-wise; the minimiser is a weighted median."""
    d = np.atleast_2d(d)
    order = np.argsort(d, axis=1, kind="stable")
    ds = np.take_along_axis(d, order, axis=1)
    cum = np.cumsum(L[order], axis=1)
    idx = np.argmax(cum >= 0.5 * L.sum(), axis=1)
    c = ds[np.arange(d.shape[0]), idx]
    return (np.abs(d - c[:, None]) * L).sum(axis=1)


def _state_distance(p1, w1, p2, w2, space: PhaseSpace) -> float:
    z = np.union1d(p1, p2)
    if z.size == 0:
        return 0.0
    F1 = np.concatenate([[0.0], np.cumsum(w1)])[np.searchsorted(p1, z, side="right")]
    F2 = np.concatenate([[0.0], np.cumsum(w2)])[np.searchsorted(p2, z, side="right")]
    d = F1 - F2
    L = np.diff(np.append(z, space.b))
    if not space.is_circle:
        return float(np.dot(np.abs(d), L))
    d = np.concatenate([[0.0], d])
    L = np.concatenate([[z[0] - space.a], L])
    return float(weighted_median_l1(d, L)[0])


def measure_distance(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    if mu.space != nu.space:
        raise PhaseSpaceMismatch("measures live on different phase spaces")
    if mu.m != nu.m:
        raise PhaseSpaceMismatch("measures have different state counts")
    return float(
        sum(
            _state_distance(mu.positions[t], mu.weights[t], nu.positions[t], nu.weights[t], mu.space)
            for t in range(mu.m)
        )
    )


def empirical_measure(
    chain: MarkovChain,
    family: MapFamily,
    omega: NoisePath,
    x0: float,
    n_burn: int,
    n_tail: int,
) -> EmpiricalMeasure:
    """Uniform weights on the pairs ``(omega_j, x_j)``, ``n_burn <= j < n_burn + n_tail``."""
    if n_tail < 1:
        raise ValueError("n_tail must be >= 1")
    n = n_burn + n_tail
    traj, _ = compose_orbit(family, omega, x0, n)
    seq = np.asarray(omega.seq if isinstance(omega, NoisePath) else omega)
    return EmpiricalMeasure.from_samples(
        seq[n_burn:n],
        traj[n_burn:n],
        chain.m,
        family.space,
        metadata={"x0": float(x0), "n_burn": n_burn, "n_tail": n_tail},
    )


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Binned tail measures for a grid of initial points times noise paths.

    ``hist_full[k]`` holds the ``(m, G)`` masses of member ``k`` over the
    tail of length ``2 n_tail``; ``hist_half[k]`` over its first ``n_tail``
    steps. Member ``k`` starts at ``x0[k]`` on noise path ``path[k]``.
    """

    space: PhaseSpace
    m: int
    G: int
    hist_full: np.ndarray
    hist_half: np.ndarray
    x0: np.ndarray
    path: np.ndarray
    lyap_value: np.ndarray
    lyap_stderr: np.ndarray
    n_burn: int
    n_tail: int
    seed: int
    p: np.ndarray

    @property
    def size(self) -> int:
        return self.hist_full.shape[0]

    def stratified(self, hist: np.ndarray) -> np.ndarray:
        """Rescale each state's block to mass ``p(t)``; unvisited states are left empty."""
        mass = hist.sum(axis=-1, keepdims=True)
        scale = np.divide(self.p[:, None], mass, out=np.zeros_like(mass), where=mass > 0)
        return hist * scale

    def state_marginal_deviation(self) -> float:
        return float(np.abs(self.hist_full.sum(axis=-1) - self.p).max())

    def member(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure.from_histogram(
            self.hist_full[k], self.space, {"x0": float(self.x0[k]), "path": int(self.path[k])}
        )

    def segment_lengths(self) -> np.ndarray:
        # CDF of bin-centre atoms is constant on [c_k, c_{k+1}) and [c_{G-1}, b]
        L = np.full(self.G, self.space.length / self.G)
        L[-1] *= 0.5
        return L

    def metadata(self) -> dict:
        return {
            "members": self.size,
            "grid_points": int(np.unique(self.x0).size),
            "noise_paths": int(np.unique(self.path).size),
            "bins": self.G,
            "n_burn": self.n_burn,
            "n_tail": self.n_tail,
            "seed": self.seed,
        }


def simulate_ensemble(
    chain: MarkovChain,
    family: MapFamily,
    n_x: int = 64,
    n_paths: int = 16,
    n_burn: int = 500,
    n_tail: int = 2000,
    bins: int = 256,
    seed: int = 0,
    chunk: int = 256,
) -> Ensemble:
    """Run ``n_x * n_paths`` orbits at once and bin their tail pairs.

    Initial points are cell midpoints of a uniform grid; noise paths are
    stationary chain paths on streams ``0 .. n_paths - 1``. The Lyapunov
    average of each member uses the same ``2 n_tail`` tail steps.
    """
    space = family.space
    m, G = chain.m, int(bins)
    total = n_burn + 2 * n_tail
    grid = space.a + space.length * (np.arange(n_x) + 0.5) / n_x
    omegas = np.stack([sample_path(chain, total, seed, stream=p).seq for p in range(n_paths)])
    K = n_x * n_paths
    pidx = np.repeat(np.arange(n_paths), n_x)
    x = np.tile(grid, n_paths)
    x0 = x.copy()
    base = np.arange(K, dtype=np.int64) * (m * G)
    counts = [np.zeros(K * m * G), np.zeros(K * m * G)]
    bsize = (2 * n_tail) // N_BATCHES
    batch_sums = np.zeros((K, N_BATCHES))
    log_total = np.zeros(K)
    buf = np.empty((chunk, K), dtype=np.int64)
    fill = 0
    seg = 0
    for j in range(total):
        st = omegas[pidx, j]
        y, der = family.apply(st, x)
        if j >= n_burn:
            s = 0 if j < n_burn + n_tail else 1
            if s != seg and fill:
                counts[seg] += np.bincount(buf[:fill].ravel(), minlength=K * m * G)
                fill = 0
            seg = s
            b = np.clip(((x - space.a) * (G / space.length)).astype(np.int64), 0, G - 1)
            buf[fill] = base + st * G + b
            fill += 1
            if fill == chunk:
                counts[seg] += np.bincount(buf.ravel(), minlength=K * m * G)
                fill = 0
            ad = np.abs(der)
            if ad.min() < DERIV_FLOOR:
                raise DerivativeUnderflow(f"|f'| below {DERIV_FLOOR:g} in the ensemble at step {j}")
            lg = np.log(ad)
            log_total += lg
            bi = (j - n_burn) // bsize if bsize else N_BATCHES
            if bi < N_BATCHES:
                batch_sums[:, bi] += lg
        x = y
    if fill:
        counts[seg] += np.bincount(buf[:fill].ravel(), minlength=K * m * G)
    half = counts[0].reshape(K, m, G) / n_tail
    full = (counts[0] + counts[1]).reshape(K, m, G) / (2 * n_tail)
    value = log_total / (2 * n_tail)
    if bsize:
        means = batch_sums / bsize
        stderr = means.std(axis=1, ddof=1) / math.sqrt(N_BATCHES)
    else:
        stderr = np.full(K, np.nan)
    return Ensemble(space, m, G, full, half, x0, pidx, value, stderr, n_burn, n_tail, seed, chain.p.copy())


def _hist_pair_distance(A: np.ndarray, B: np.ndarray, space: PhaseSpace, L: np.ndarray) -> np.ndarray:
    """Row-wise ``D`` between two stacks of ``(m, G)`` histograms."""
    d = np.cumsum(A, axis=-1) - np.cumsum(B, axis=-1)
    if not space.is_circle:
        return (np.abs(d) * L).sum(axis=(-1, -2))
    P, m, G = d.shape
    d = np.concatenate([np.zeros((P, m, 1)), d], axis=-1).reshape(P * m, G + 1)
    Lc = np.concatenate([[L[-1]], L])
    return weighted_median_l1(d, Lc).reshape(P, m).sum(axis=1)


class _HistogramMembers:
    def __init__(self, ens: Ensemble, stratify: bool):
        self.ens = ens
        self.L = ens.segment_lengths()
        self.H = ens.stratified(ens.hist_full) if stratify else ens.hist_full

    def __len__(self):
        return self.H.shape[0]

    def pairwise(self) -> np.ndarray:
        K = len(self)
        if not self.ens.space.is_circle:
            E = (np.cumsum(self.H, axis=-1) * self.L).reshape(K, -1)
            return squareform(pdist(E, metric="cityblock"))
        D = np.zeros((K, K))
        iu, ju = np.triu_indices(K, 1)
        step = max(1, 200000 // (self.ens.m * self.ens.G))
        for s in range(0, iu.size, step):
            i, j = iu[s:s + step], ju[s:s + step]
            D[i, j] = _hist_pair_distance(self.H[i], self.H[j], self.ens.space, self.L)
        return D + D.T

    def average(self, idx):
        return self.H[idx].mean(axis=0)

    def dist_to(self, rep, idx) -> np.ndarray:
        R = np.broadcast_to(rep, self.H[idx].shape)
        return _hist_pair_distance(self.H[idx], R, self.ens.space, self.L)

    def rep_distance(self, r1, r2) -> float:
        return float(_hist_pair_distance(r1[None], r2[None], self.ens.space, self.L)[0])

    def to_measure(self, rep) -> EmpiricalMeasure:
        return EmpiricalMeasure.from_histogram(rep, self.ens.space)


class _ListMembers:
    def __init__(self, measures):
        self.items = list(measures)
        self.space = self.items[0].space

    def __len__(self):
        return len(self.items)

    def pairwise(self) -> np.ndarray:
        K = len(self)
        D = np.zeros((K, K))
        for i in range(K):
            for j in range(i + 1, K):
                D[i, j] = D[j, i] = measure_distance(self.items[i], self.items[j])
        return D

    def average(self, idx):
        return average_measures([self.items[i] for i in idx], self.space)

    def dist_to(self, rep, idx) -> np.ndarray:
        return np.array([measure_distance(self.items[i], rep) for i in idx])

    def rep_distance(self, r1, r2) -> float:
        return measure_distance(r1, r2)

    def to_measure(self, rep) -> EmpiricalMeasure:
        return rep


def quantile_hull(pos: np.ndarray, w: np.ndarray, delta: float) -> tuple[float, float] | None:
    """Smallest ``[lo, hi]`` leaving at most ``delta`` of the conditional mass on each side."""
    s = w.sum()
    if s <= 0:
        return None
    cum = np.cumsum(w) / s
    lo = pos[min(int(np.searchsorted(cum, delta, side="right")), len(pos) - 1)]
    hi = pos[min(int(np.searchsorted(cum, 1.0 - delta, side="left")), len(pos) - 1)]
    return float(lo), float(hi)


@dataclass(frozen=True, eq=False)
class ClusterReport:
    r: int
    representatives: list
    basin_fractions: list
    unassigned_fraction: float
    pairwise_distances: np.ndarray
    support_intervals: list
    labels: np.ndarray
    tau: float
    lyapunov: list
    non_convergent: bool | None
    nonconvergent_fraction: float | None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "basin_fractions": list(self.basin_fractions),
            "unassigned_fraction": self.unassigned_fraction,
            "pairwise_distances": self.pairwise_distances.tolist(),
            "support_intervals": self.support_intervals,
            "tau": self.tau,
            "lyapunov": [e.to_dict() for e in self.lyapunov],
            "non_convergent": self.non_convergent,
            "nonconvergent_fraction": self.nonconvergent_fraction,
            "representative_state_mass": [rep.state_mass.tolist() for rep in self.representatives],
            "representative_mean": [rep.mean_position() for rep in self.representatives],
            **self.metadata,
        }


DEFAULT_HULL_DELTA = 1e-3


def cluster_physical_measures(
    ensemble,
    tau: float | None = None,
    hull_delta: float = DEFAULT_HULL_DELTA,
    stratify: bool = True,
) -> ClusterReport:
    """Single-linkage clusters of an ensemble at threshold ``tau``.

    ``ensemble`` is an :class:`Ensemble` or a list of empirical measures.
    Clusters are the connected components of ``{D <= tau}``; members
    farther than ``tau`` from their cluster average are unassigned, and
    clusters whose averages are within ``tau`` are merged. Clusters are
    ordered by the mean position of their representative, which makes the
    report independent of the member order.
    """
    if isinstance(ensemble, Ensemble):
        members = _HistogramMembers(ensemble, stratify)
        space = ensemble.space
    else:
        if not len(ensemble):
            raise ValueError("ensemble is empty")
        members = _ListMembers(ensemble)
        space = members.space
    tau = 0.02 * space.diameter if tau is None else float(tau)
    K = len(members)
    D = members.pairwise()
    _, comp = connected_components(csr_matrix(D <= tau), directed=False)
    groups = [np.flatnonzero(comp == c) for c in np.unique(comp)]
    while True:
        reps = [members.average(g) for g in groups]
        n = len(groups)
        parent = list(range(n))

        def root(i):
            while parent[i] != i:
                i = parent[i]
            return i

        merged = False
        for i in range(n):
            for j in range(i + 1, n):
                if root(i) != root(j) and members.rep_distance(reps[i], reps[j]) <= tau:
                    parent[root(j)] = root(i)
                    merged = True
        if not merged:
            break
        new = {}
        for i in range(n):
            new.setdefault(root(i), []).append(groups[i])
        groups = [np.sort(np.concatenate(v)) for v in new.values()]
    labels = np.full(K, -1, dtype=np.int64)
    kept = []
    for g, rep in zip(groups, reps):
        ok = g[members.dist_to(rep, g) <= tau]
        if ok.size:
            kept.append((rep, members.to_measure(rep), ok))
    kept.sort(key=lambda item: (item[1].mean_position(), -item[2].size))
    reps_out, fractions, hulls, lyap = [], [], [], []
    for c, (_, rep, ok) in enumerate(kept):
        labels[ok] = c
        reps_out.append(rep)
        fractions.append(ok.size / K)
        hulls.append([quantile_hull(*rep.conditional(t), hull_delta) for t in range(rep.m)])
        lyap.append(_cluster_lyapunov(ensemble, ok))
    r = len(reps_out)
    pair = np.zeros((r, r))
    for i in range(r):
        for j in range(i + 1, r):
            pair[i, j] = pair[j, i] = members.rep_distance(kept[i][0], kept[j][0])
    nc, ncf = None, None
    meta = {"distance_proxy": "sum of per-state CDF L1 distances on T x X marginals"}
    if isinstance(ensemble, Ensemble):
        L = ensemble.segment_lengths()
        half, full = ensemble.hist_half, ensemble.hist_full
        if stratify:
            half, full = ensemble.stratified(half), ensemble.stratified(full)
        drift = _hist_pair_distance(half, full, space, L)
        ncf = float(np.mean(drift > 0.5 * tau))
        nc = bool(ncf > 0.5)
        meta.update(ensemble.metadata())
        meta["stratified"] = bool(stratify)
        meta["state_marginal_deviation"] = ensemble.state_marginal_deviation()
    return ClusterReport(
        r=r,
        representatives=reps_out,
        basin_fractions=fractions,
        unassigned_fraction=float(1.0 - sum(fractions)),
        pairwise_distances=pair,
        support_intervals=hulls,
        labels=labels,
        tau=tau,
        lyapunov=[e for e in lyap if e is not None],
        non_convergent=nc,
        nonconvergent_fraction=ncf,
        metadata=meta,
    )


def _cluster_lyapunov(ensemble, idx) -> LyapunovEstimate | None:
    """Mean member exponent; the error bar treats members on one noise path as one sample."""
    if isinstance(ensemble, Ensemble):
        v = ensemble.lyap_value[idx]
        paths = ensemble.path[idx]
        ids = np.unique(paths)
        if ids.size >= 2:
            means = np.array([v[paths == q].mean() for q in ids])
            se = float(means.std(ddof=1) / math.sqrt(ids.size))
        else:
            se = float(ensemble.lyap_stderr[idx].mean())
        return LyapunovEstimate(
            float(v.mean()),
            se,
            2 * ensemble.n_tail,
            int(ids.size),
            "orbit",
            metadata={"n_burn": ensemble.n_burn, "members": int(idx.size)},
        )
    vals = [ensemble[i].metadata.get("lyapunov") for i in idx]
    if any(v is None for v in vals):
        return None
    return LyapunovEstimate(float(np.mean(vals)), float(np.std(vals) / math.sqrt(len(vals))), 0, len(vals), "orbit")


def support_disjointness(report: ClusterReport, delta_mass: float = DEFAULT_HULL_DELTA) -> np.ndarray:
    """``overlap[i, j]``: mass of representative ``i`` inside the quantile hulls of ``j``."""
    reps = report.representatives
    r = len(reps)
    if r < 2:
        return np.zeros((0, 0))
    hulls = [[quantile_hull(*rep.conditional(t), delta_mass) for t in range(rep.m)] for rep in reps]
    out = np.zeros((r, r))
    for i, rep in enumerate(reps):
        for j in range(r):
            mass = 0.0
            for t in range(rep.m):
                h = hulls[j][t]
                if h is None:
                    continue
                p, w = rep.positions[t], rep.weights[t]
                mass += float(w[(p >= h[0]) & (p <= h[1])].sum())
            out[i, j] = mass
    return out


def bernoulli_fiber_check(measures, chain: MarkovChain) -> float:
    """Max over measures of the ``D`` distance between state conditionals.

    ``measures`` is a :class:`ClusterReport`, a list of empirical measures
    or a single one.
    """
    if not chain.is_bernoulli:
        raise NotBernoulli("transition rows differ; conditionals need not coincide")
    if isinstance(measures, ClusterReport):
        measures = measures.representatives
    elif isinstance(measures, EmpiricalMeasure):
        measures = [measures]
    worst = 0.0
    for mu in measures:
        live = [t for t in range(mu.m) if mu.weights[t].sum() > 0]
        for i, t in enumerate(live):
            for s in live[i + 1:]:
                p1, w1 = mu.conditional(t)
                p2, w2 = mu.conditional(s)
                worst = max(worst, _state_distance(p1, w1, p2, w2, mu.space))
    return worst


def basin_projection_check(
    chain: MarkovChain,
    family: MapFamily,
    g: SeedMap | None,
    n: int,
    reps: int,
    seed: int,
    tau: float | None = None,
) -> dict:
    """Empirical measures of ``H``-orbits against those of their projected ``F``-orbits.

    The ``H``-orbit pair ``(t_{j+1}, x_j)`` is the ``F``-orbit pair
    ``(omega_j, x_j)``, so the two tail measures must coincide.
    """
    g = g or SeedMap.from_chain(chain)
    space = family.space
    tail = max(1, n // 2)
    h_measures, f_measures = [], []
    worst = 0.0
    for r in range(reps):
        xi = sample_seed_path(n + 1, seed, stream=2 * r)
        u = make_rng(seed, 2 * r + 1).random(2)
        t0 = _inverse_cdf(chain.p, float(u[0]))
        x0 = space.a + space.length * float(u[1])
        traj = iterate_h(g, family, xi, (t0, x0), n + 1)
        hs = np.array([traj[j + 1].state for j in range(n - tail, n)])
        hx = np.array([traj[j].x for j in range(n - tail, n)])
        omega, x = pi_project(g, xi, (t0, x0), n + 1)
        mu_f = empirical_measure(chain, family, omega, x, n - tail, tail)
        mu_h = EmpiricalMeasure.from_samples(hs, hx, chain.m, space)
        worst = max(worst, measure_distance(mu_h, mu_f))
        h_measures.append(mu_h)
        f_measures.append(mu_f)
    rep = cluster_physical_measures(h_measures + f_measures, tau)
    lab = rep.labels
    co = float(np.mean(lab[:reps] == lab[reps:]))
    return {"distance": worst, "co_assignment": co, "r": rep.r}
