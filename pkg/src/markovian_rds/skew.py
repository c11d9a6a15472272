"""Skew products over noise paths and their iid representation.

The iid representation of the Markovian iteration is the Bernoulli random
map ``h_s(t, x) = (g_s(t), f_{g_s(t)}(x))`` driven by uniform seeds ``s``.
``pi_project`` turns a seed path into the noise path it induces so that the
``H``-orbit and the ``F``-orbit can be compared step by step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .maps import MapFamily
from .markov_chain import MarkovChain, NoisePath, SeedMap, seed_map_eval
from .rng import make_rng


class ExtendedPoint(NamedTuple):
    state: int
    x: float


@dataclass(frozen=True)
class SeedPath:
    seq: np.ndarray
    origin: int | None = None

    def __len__(self) -> int:
        return len(self.seq)


def sample_seed_path(n: int, seed: int, stream: int = 0) -> SeedPath:
    seq = make_rng(seed, stream).random(n)
    seq.setflags(write=False)
    return SeedPath(seq=seq, origin=seed)


def h_step(g: SeedMap, family: MapFamily, s: float, point) -> ExtendedPoint:
    t, x = point
    a = seed_map_eval(g, s, t)
    return ExtendedPoint(a, float(family.maps[a](x)))


def iterate_h(g: SeedMap, family: MapFamily, xi: SeedPath, point, n: int, return_log: bool = False):
    """``n`` steps of ``h`` along the seed path ``xi``.

    Returns the list of extended points ``[(t, x), h_{xi_0}(t, x), ...]``;
    with ``return_log`` also the fiber log-derivative sum
    ``sum_j log|f'_{t_{j+1}}(x_j)|``, which is ``log L h^n_xi(t, x)``.
    """
    seq = xi.seq
    if n > len(seq):
        raise ValueError(f"horizon {n} exceeds seed path length {len(seq)}")
    t, x = int(point[0]), float(point[1])
    maps = family.maps
    traj = [ExtendedPoint(t, x)]
    total = 0.0
    for j in range(n):
        t = seed_map_eval(g, seq[j], t)
        f = maps[t]
        if return_log:
            total += math.log(abs(f.deriv(x)))
        x = float(f(x))
        traj.append(ExtendedPoint(t, x))
    if return_log:
        return traj, total
    return traj


def pi_project(g: SeedMap, xi: SeedPath, point, n: int):
    """Noise path ``omega_k = g_{xi_k} o ... o g_{xi_0}(t)``, ``k < n``, and ``x``."""
    seq = xi.seq
    if n > len(seq):
        raise ValueError(f"horizon {n} exceeds seed path length {len(seq)}")
    t = int(point[0])
    omega = np.empty(n, dtype=np.int64)
    for k in range(n):
        t = seed_map_eval(g, seq[k], t)
        omega[k] = t
    omega.setflags(write=False)
    return NoisePath(seq=omega, origin=xi.origin), float(point[1])


def kernel_Phat(chain: MarkovChain, family: MapFamily, point) -> list[tuple[ExtendedPoint, float]]:
    """Atoms of ``P^((t, x), .)``: the state moves to ``a``, then ``f_a`` acts."""
    t, x = point
    return [
        (ExtendedPoint(a, float(family.maps[a](x))), float(q))
        for a, q in enumerate(chain.Q[t])
        if q > 0
    ]


def kernel_Ptilde(chain: MarkovChain, family: MapFamily, point) -> list[tuple[ExtendedPoint, float]]:
    """Atoms of ``P~((t, x), .)``: ``f_t`` acts, then the state moves to ``a``."""
    t, x = point
    y = float(family.maps[t](x))
    return [(ExtendedPoint(a, y), float(q)) for a, q in enumerate(chain.Q[t]) if q > 0]


def h_step_vec(g: SeedMap, family: MapFamily, s: np.ndarray, states: np.ndarray, x: np.ndarray):
    """One ``h`` step for an ensemble; returns ``(new_states, new_x, f'(x))``."""
    new_states = g.apply(s, states)
    new_x, der = family.apply(new_states, x)
    return new_states, new_x, der


def extended_distance(p, q, family: MapFamily) -> float:
    """Metric on ``T x X``: discrete metric on states plus the phase-space metric."""
    return float((p[0] != q[0]) + family.space.distance(p[1], q[1]))
