"""Phase spaces and C^1 fiber maps with analytic derivatives.

Circle maps are stored through a lift ``F: R -> R`` with
``F(x + 1) = F(x) + deg``; points on the circle are coordinates in ``[0, 1)``.
Interval maps act on ``[a, b]`` and must be monotone diffeomorphisms onto
their image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DomainViolation, PhaseSpaceMismatch
from .markov_chain import NoisePath

TWO_PI = 2.0 * math.pi
DOMAIN_TOL = 1e-12


@dataclass(frozen=True)
class PhaseSpace:
    kind: str = "interval"
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("interval", "circle"):
            raise ValueError(f"unknown phase space kind {self.kind!r}")
        if self.kind == "circle":
            object.__setattr__(self, "a", 0.0)
            object.__setattr__(self, "b", 1.0)
        if not (math.isfinite(self.a) and math.isfinite(self.b) and self.a < self.b):
            raise ValueError("interval endpoints must be finite with a < b")

    @classmethod
    def interval(cls, a: float = 0.0, b: float = 1.0) -> "PhaseSpace":
        return cls("interval", float(a), float(b))

    @classmethod
    def circle(cls) -> "PhaseSpace":
        return cls("circle")

    @property
    def is_circle(self) -> bool:
        return self.kind == "circle"

    @property
    def length(self) -> float:
        return self.b - self.a

    @property
    def diameter(self) -> float:
        # arc-length metric on the unit-circumference circle
        return 0.5 if self.is_circle else self.length

    def distance(self, x, y):
        d = np.abs(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))
        if self.is_circle:
            d = d % 1.0
            d = np.minimum(d, 1.0 - d)
        return d

    def probe_points(self, n: int) -> np.ndarray:
        return self.a + self.length * (np.arange(n) + 0.5) / n

    def to_dict(self) -> dict:
        if self.is_circle:
            return {"kind": "circle"}
        return {"kind": "interval", "a": self.a, "b": self.b}


@dataclass(frozen=True, eq=False)
class FiberMap:
    """One fiber map ``f_t``.

    ``func`` and ``deriv`` must accept floats and numpy arrays. For circle
    phase spaces ``func`` is the lift; use :meth:`__call__` for the map
    reduced mod 1.
    """

    label: str
    func: Callable
    deriv: Callable
    space: PhaseSpace
    orientation: int
    lipschitz: float
    monotone: bool = True
    params: dict | None = None

    def __call__(self, x):
        y = self.func(x)
        if self.space.is_circle:
            return y % 1.0
        return _confine(y, self.space)

    def lift(self, x):
        return self.func(x)

    @property
    def degree(self) -> int:
        if not self.space.is_circle:
            return 0
        return int(round(float(self.func(0.5) - self.func(-0.5))))


def _confine(y, space: PhaseSpace):
    a, b = space.a, space.b
    if type(y) is float or np.ndim(y) == 0:
        y = float(y)
        if y < a:
            if y < a - DOMAIN_TOL:
                raise DomainViolation(f"image {y!r} below interval [{a}, {b}]")
            return a
        if y > b:
            if y > b + DOMAIN_TOL:
                raise DomainViolation(f"image {y!r} above interval [{a}, {b}]")
            return b
        return y
    y = np.asarray(y, dtype=float)
    if y.size and (y.min() < a - DOMAIN_TOL or y.max() > b + DOMAIN_TOL):
        raise DomainViolation(f"image escapes interval [{a}, {b}]")
    return np.clip(y, a, b)


def _constant(c: float) -> Callable:
    def deriv(x):
        if type(x) is not float and np.ndim(x):
            return np.full(np.shape(x), c)
        return c

    return deriv


def eval_deriv(f: FiberMap, x):
    """``(f(x), f'(x))``; the derivative is the analytic one."""
    return f(x), f.deriv(x)


def affine(alpha: float, beta: float, space: PhaseSpace | None = None, label: str | None = None) -> FiberMap:
    space = space or PhaseSpace.interval()
    if alpha == 0:
        raise ValueError("affine map with zero slope is not a diffeomorphism")
    alpha = float(alpha)
    beta = float(beta)
    return FiberMap(
        label=label or f"affine({alpha:g},{beta:g})",
        func=lambda x: alpha * x + beta,
        deriv=_constant(alpha),
        space=space,
        orientation=1 if alpha > 0 else -1,
        lipschitz=abs(alpha),
        params={"type": "affine", "alpha": alpha, "beta": beta},
    )


def rotation(theta: float, label: str | None = None) -> FiberMap:
    theta = float(theta)
    return FiberMap(
        label=label or f"rotation({theta:g})",
        func=lambda x: x + theta,
        deriv=_constant(1.0),
        space=PhaseSpace.circle(),
        orientation=1,
        lipschitz=1.0,
        params={"type": "rotation", "theta": theta},
    )


def pinched_sine(a: float, space: PhaseSpace | None = None, label: str | None = None) -> FiberMap:
    """``x - a sin(2 pi x) / (2 pi)``; fixes 0, 1/2 and 1, ``f'(0) = 1 - a``."""
    space = space or PhaseSpace.interval()
    a = float(a)
    if not abs(a) < 1:
        raise ValueError("pinched-sine parameter must satisfy |a| < 1")
    if not space.is_circle and (space.a, space.b) != (0.0, 1.0):
        raise ValueError("pinched-sine map is defined on [0, 1] or the circle")

    def func(x):
        return x - a * np.sin(TWO_PI * x) / TWO_PI

    def deriv(x):
        return 1.0 - a * np.cos(TWO_PI * x)

    return FiberMap(
        label=label or f"pinched_sine({a:g})",
        func=func,
        deriv=deriv,
        space=space,
        orientation=1,
        lipschitz=1.0 + abs(a),
        params={"type": "pinched_sine", "a": a},
    )


def additive_circle(base: FiberMap, c: float, label: str | None = None) -> FiberMap:
    """``f_0(x) + c mod 1`` for a circle diffeomorphism ``f_0``."""
    if not base.space.is_circle:
        raise PhaseSpaceMismatch("additive noise needs a circle base map")
    c = float(c)
    f0, d0 = base.func, base.deriv
    return FiberMap(
        label=label or f"{base.label}+{c:g}",
        func=lambda x: f0(x) + c,
        deriv=d0,
        space=base.space,
        orientation=base.orientation,
        lipschitz=base.lipschitz,
        params={"type": "additive_circle", "base": base.params, "c": c},
    )


def identity(space: PhaseSpace | None = None) -> FiberMap:
    space = space or PhaseSpace.interval()
    if space.is_circle:
        return rotation(0.0, label="identity")
    return affine(1.0, 0.0, space, label="identity")


def map_from_spec(spec: dict, space: PhaseSpace) -> FiberMap:
    kind = spec.get("type")
    label = spec.get("label")
    if kind == "affine":
        return affine(spec["alpha"], spec.get("beta", 0.0), space, label)
    if kind == "rotation":
        if not space.is_circle:
            raise PhaseSpaceMismatch("rotations live on the circle")
        return rotation(spec["theta"], label)
    if kind == "pinched_sine":
        return pinched_sine(spec["a"], space, label)
    if kind == "additive_circle":
        return additive_circle(map_from_spec(spec["base"], space), spec["c"], label)
    if kind == "identity":
        return identity(space)
    raise ValueError(f"unknown map type {kind!r}")


@dataclass(frozen=True, eq=False)
class MapFamily:
    """One fiber map per chain state, all on the same phase space.

    Construction validates each map at probe points: analytic derivative
    against a central difference, constant derivative sign matching the
    orientation flag, declared Lipschitz constant, and (on intervals)
    invariance of the interval.
    """

    space: PhaseSpace
    maps: tuple[FiberMap, ...]
    allow_nonmonotone: bool = False

    def __post_init__(self):
        maps = tuple(self.maps)
        if not maps:
            raise ValueError("a map family needs at least one map")
        for f in maps:
            if f.space != self.space:
                raise PhaseSpaceMismatch(f"map {f.label} lives on {f.space}, family on {self.space}")
            if not f.monotone and not self.allow_nonmonotone:
                raise ValueError(f"map {f.label} is not monotone")
            validate_map(f)
        object.__setattr__(self, "maps", maps)

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, t: int) -> FiberMap:
        return self.maps[t]

    @property
    def lipschitz(self) -> float:
        return max(f.lipschitz for f in self.maps)

    @property
    def all_monotone(self) -> bool:
        return all(f.monotone for f in self.maps)

    def apply(self, states: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Apply ``f_{states[k]}`` to ``x[k]`` elementwise; returns images and derivatives."""
        out = np.empty_like(x)
        der = np.empty_like(x)
        for t, f in enumerate(self.maps):
            mask = states == t
            if mask.any():
                xm = x[mask]
                out[mask] = f(xm)
                der[mask] = f.deriv(xm)
        return out, der

    def permuted(self, perm: Sequence[int]) -> "MapFamily":
        return MapFamily(self.space, tuple(self.maps[i] for i in perm), self.allow_nonmonotone)

    def to_dict(self) -> dict:
        return {"space": self.space.to_dict(), "maps": [f.params for f in self.maps]}

    @classmethod
    def from_spec(cls, spec: dict) -> "MapFamily":
        sp = spec.get("space", {"kind": "interval"})
        if sp.get("kind", "interval") == "circle":
            space = PhaseSpace.circle()
        else:
            space = PhaseSpace.interval(sp.get("a", 0.0), sp.get("b", 1.0))
        return cls(space, tuple(map_from_spec(m, space) for m in spec["maps"]))


def _validate_affine(f: FiberMap) -> None:
    # exact checks: the derivative is the slope and the image of [a, b] is spanned by its endpoints
    alpha, beta = f.params["alpha"], f.params["beta"]
    space = f.space
    if f.orientation != (1 if alpha > 0 else -1):
        raise ValueError(f"map {f.label}: derivative sign is not constantly {f.orientation:+d}")
    if abs(alpha) > f.lipschitz * (1 + 1e-12):
        raise ValueError(f"map {f.label}: declared Lipschitz constant {f.lipschitz} too small")
    ya, yb = alpha * space.a + beta, alpha * space.b + beta
    if min(ya, yb) < space.a - DOMAIN_TOL or max(ya, yb) > space.b + DOMAIN_TOL:
        raise ValueError(f"map {f.label}: image leaves [{space.a}, {space.b}]")


def validate_map(f: FiberMap, n_probe: int = 64, n_sample: int = 256, h: float = 1e-6) -> None:
    space = f.space
    if (f.params or {}).get("type") == "affine" and not space.is_circle:
        return _validate_affine(f)
    x = space.probe_points(n_probe)
    if not space.is_circle:
        # keep central differences inside the interval
        x = np.clip(x, space.a + 2 * h, space.b - 2 * h)
    fd = (np.asarray(f.func(x + h)) - np.asarray(f.func(x - h))) / (2 * h)
    d = np.asarray(f.deriv(x), dtype=float)
    if np.abs(fd - d).max() > 1e-6:
        raise ValueError(f"map {f.label}: derivative disagrees with finite differences")
    xs = np.linspace(space.a, space.b, n_sample)
    ds = np.broadcast_to(np.asarray(f.deriv(xs), dtype=float), xs.shape)
    if f.monotone:
        if np.any(ds == 0) or np.any(np.sign(ds) != f.orientation):
            raise ValueError(f"map {f.label}: derivative sign is not constantly {f.orientation:+d}")
    if np.abs(ds).max() > f.lipschitz * (1 + 1e-12):
        raise ValueError(f"map {f.label}: declared Lipschitz constant {f.lipschitz} too small")
    if space.is_circle:
        shift = np.asarray(f.func(x + 1.0)) - np.asarray(f.func(x))
        if np.abs(np.abs(shift) - 1.0).max() > 1e-9 or np.ptp(shift) > 1e-9:
            raise ValueError(f"map {f.label}: lift is not of degree +-1")
    else:
        y = np.asarray(f.func(xs), dtype=float)
        if y.min() < space.a - DOMAIN_TOL or y.max() > space.b + DOMAIN_TOL:
            raise ValueError(f"map {f.label}: image leaves [{space.a}, {space.b}]")


def compose_orbit(family: MapFamily, omega: NoisePath | Sequence[int], x0: float, n: int):
    """Orbit ``x_{j+1} = f_{omega_j}(x_j)`` and ``sum_j log|f'_{omega_j}(x_j)|``.

    Returns ``(trajectory, log_deriv_sum)`` with ``trajectory[0] = x0``.
    """
    seq = omega.seq if isinstance(omega, NoisePath) else omega
    if n > len(seq):
        raise ValueError(f"horizon {n} exceeds noise path length {len(seq)}")
    maps = family.maps
    traj = np.empty(n + 1)
    x = float(x0)
    traj[0] = x
    total = 0.0
    for j in range(n):
        f = maps[seq[j]]
        total += math.log(abs(f.deriv(x)))
        x = float(f(x))
        traj[j + 1] = x
    return traj, total


def lipschitz_bound_M(family: MapFamily) -> float:
    """``max{sup_t Lip(f_t), 1 + diam(X), 2}``: a Lipschitz bound for ``h_s``."""
    return max(family.lipschitz, 1.0 + family.space.diameter, 2.0)
