"""Approximation-theory checks for piecewise-linear models.

Two independent results are made executable here: the O(1/n^2) uniform-error
rate of the best n-segment piecewise-linear approximation to a strictly
convex univariate function, and the closed-form upper bound on the number of
linear regions a scalar rectifier network can realize, together with an
exact region counter for small nets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class TheoryError(ValueError):
    pass


_FUNCTIONS = {
    "square": np.square,
    "exp": np.exp,
    "softplus": lambda x: np.logaddexp(0.0, x),
    "linear": lambda x: np.asarray(x, dtype=np.float64) + 0.0,
}


@dataclass(frozen=True)
class ConvexFn1D:
    """A named univariate function on a closed interval.

    The three convex names (square, exp, softplus) must pass a sampled
    second-difference positivity check; "linear" is accepted as a degenerate
    sanity case and flagged via strictly_convex == False.
    """

    name: str
    domain: tuple[float, float]

    def __post_init__(self):
        if self.name not in _FUNCTIONS:
            raise TheoryError(f"unknown function {self.name!r}; "
                              f"choose from {sorted(_FUNCTIONS)}")
        a, b = self.domain
        if not (math.isfinite(a) and math.isfinite(b) and a < b):
            raise TheoryError("domain must be a finite interval a < b")
        if self.name != "linear" and not self.strictly_convex:
            raise TheoryError(f"{self.name} failed the convexity check on {self.domain}")

    def __call__(self, x):
        return _FUNCTIONS[self.name](np.asarray(x, dtype=np.float64))

    @property
    def strictly_convex(self) -> bool:
        xs = np.linspace(self.domain[0], self.domain[1], 257)
        fs = self(xs)
        second = fs[2:] - 2.0 * fs[1:-1] + fs[:-2]
        return bool(np.all(second > 0))


@dataclass(frozen=True)
class PiecewiseLinear:
    breakpoints: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.breakpoints) < 2 or len(self.breakpoints) != len(self.values):
            raise TheoryError("need matching breakpoints and values, at least two")
        if not all(u < v for u, v in zip(self.breakpoints, self.breakpoints[1:])):
            raise TheoryError("breakpoints must be strictly increasing")

    @property
    def n_segments(self) -> int:
        return len(self.breakpoints) - 1

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=np.float64),
                         self.breakpoints, self.values)


# -- best piecewise-linear approximation ---------------------------------------

def _segment_error(xs, fs, i: int, j: int) -> float:
    """Uniform error of the best linear fit to f on [xs[i], xs[j]].

    For convex f the chord lies above the function; shifting it down by half
    the largest chord-function gap equioscillates, so the optimal uniform
    error is half that gap.  Grid maxima stand in for the true supremum.
    """
    x0, x1 = xs[i], xs[j]
    t = (xs[i:j + 1] - x0) / (x1 - x0)
    chord = fs[i] + t * (fs[j] - fs[i])
    return 0.5 * float(np.max(chord - fs[i:j + 1]))


def _farthest(xs, fs, i: int, t: float) -> int:
    """Largest j with segment error(i, j) <= t; error is monotone in j."""
    lo, hi = i + 1, len(xs) - 1
    if _segment_error(xs, fs, i, hi) <= t:
        return hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _segment_error(xs, fs, i, mid) <= t:
            lo = mid
        else:
            hi = mid
    return lo


def _greedy_partition(xs, fs, n: int, t: float):
    """Cover the grid with <= n maximal segments of error <= t, or None."""
    cuts = [0]
    i = 0
    for _ in range(n):
        i = _farthest(xs, fs, i, t)
        cuts.append(i)
        if i == len(xs) - 1:
            return cuts
    return None


def best_pwl_error(f: ConvexFn1D, n: int, grid: int | None = None) -> dict:
    """Minimal uniform error over n-segment continuous piecewise-linear fits.

    Breakpoints are restricted to a uniform grid, so the reported error
    carries an O(((b-a)/grid)^2) resolution uncertainty.  The minimax
    partition is found by bisecting on the target error and greedily
    extending each segment as far as the target allows; for convex costs
    monotone in segment width this greedy feasibility test is exact.
    """
    if n < 1:
        raise TheoryError("need at least one segment")
    if grid is None:
        grid = 1000 * n
    if grid < 1000 * n:
        raise TheoryError(f"grid too coarse: need at least {1000 * n} intervals for n={n}")
    a, b = f.domain
    xs = np.linspace(a, b, grid + 1)
    fs = f(xs)

    hi = _segment_error(xs, fs, 0, grid)
    if hi == 0.0 or _greedy_partition(xs, fs, n, 0.0) is not None:
        cuts = _greedy_partition(xs, fs, n, 0.0)
        return {"error": 0.0, "breakpoints": [float(xs[c]) for c in cuts]}
    lo = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _greedy_partition(xs, fs, n, mid) is not None:
            hi = mid
        else:
            lo = mid
    cuts = _greedy_partition(xs, fs, n, hi)
    error = max(_segment_error(xs, fs, i, j) for i, j in zip(cuts, cuts[1:]))
    return {"error": float(error), "breakpoints": [float(xs[c]) for c in cuts]}


def exhaustive_pwl_error(f: ConvexFn1D, n: int, grid: int) -> float:
    """Brute-force minimax over all grid breakpoint placements (test oracle)."""
    from itertools import combinations
    if grid > 60 or n > 3:
        raise TheoryError("exhaustive search is for tiny instances only")
    a, b = f.domain
    xs = np.linspace(a, b, grid + 1)
    fs = f(xs)
    best = math.inf
    for inner in combinations(range(1, grid), n - 1):
        cuts = (0, *inner, grid)
        err = max(_segment_error(xs, fs, i, j) for i, j in zip(cuts, cuts[1:]))
        best = min(best, err)
    return best


def rate_check(f: ConvexFn1D, ns: list[int]) -> dict:
    """Least-squares slope of log(best error) vs log(n) for geometric ns."""
    if len(ns) < 4:
        raise TheoryError("need at least four segment counts")
    ratios = {ns[i + 1] / ns[i] for i in range(len(ns) - 1)}
    if len(ratios) != 1 or ns[0] < 1:
        raise TheoryError("segment counts must be geometric")
    errors = [best_pwl_error(f, n)["error"] for n in ns]
    if any(e <= 0 for e in errors):
        raise TheoryError("zero error encountered; function is not strictly convex")
    slope = float(np.polyfit(np.log(ns), np.log(errors), 1)[0])
    return {"slope": slope, "errors": errors}


def pwl_residual(pwl: PiecewiseLinear, f: ConvexFn1D, grid: int) -> float:
    """Sup-norm distance between a piecewise-linear function and f on a grid."""
    a, b = f.domain
    if pwl.breakpoints[0] > a or pwl.breakpoints[-1] < b:
        raise TheoryError("piecewise-linear domain does not cover the function domain")
    xs = np.linspace(a, b, grid + 1)
    return float(np.max(np.abs(pwl(xs) - f(xs))))


# -- linear region counting ------------------------------------------------------

@dataclass(frozen=True)
class ScalarReluNet:
    """A scalar-input scalar-output dense net with per-unit 0/1 gates.

    weights[l] maps layer l-1 activations (input for l=0) to layer l
    pre-activations; the final pair maps the last hidden layer to the output.
    gates[l][u] == 1 means unit u of hidden layer l rectifies, 0 means it is
    the identity.
    """

    widths: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    gates: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise TheoryError("need at least one hidden layer with width >= 1")
        dims = (1, *self.widths, 1)
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise TheoryError("weight/bias count must match layer count")
        for l, (fi, fo) in enumerate(zip(dims, dims[1:])):
            if self.weights[l].shape != (fi, fo) or self.biases[l].shape != (fo,):
                raise TheoryError(f"layer {l} expects weights ({fi}, {fo})")
        if len(self.gates) != len(self.widths):
            raise TheoryError("one gate tuple per hidden layer")
        for l, w in enumerate(self.widths):
            if len(self.gates[l]) != w or any(g not in (0, 1) for g in self.gates[l]):
                raise TheoryError("gates must be 0/1, one per hidden unit")

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def total_units(self) -> int:
        return sum(self.widths)

    @classmethod
    def random(cls, widths: tuple[int, ...], seed: int,
               gates: tuple[tuple[int, ...], ...] | None = None) -> "ScalarReluNet":
        rng = np.random.Generator(np.random.PCG64(seed))
        dims = (1, *widths, 1)
        weights = tuple(rng.standard_normal((fi, fo))
                        for fi, fo in zip(dims, dims[1:]))
        biases = tuple(rng.standard_normal(fo) for fo in dims[1:])
        if gates is None:
            gates = tuple(tuple(1 for _ in range(w)) for w in widths)
        return cls(tuple(widths), weights, biases, gates)

    def with_gate(self, layer: int, unit: int, value: int) -> "ScalarReluNet":
        gates = [list(g) for g in self.gates]
        gates[layer][unit] = value
        return ScalarReluNet(self.widths, self.weights, self.biases,
                             tuple(tuple(g) for g in gates))

    def _prefix(self, x: float, upto: int) -> np.ndarray:
        """Pre-activations of hidden layer `upto` at scalar input x."""
        a = np.array([x], dtype=np.float64)
        for l in range(upto):
            z = a @ self.weights[l] + self.biases[l]
            g = np.asarray(self.gates[l], dtype=np.float64)
            a = g * np.maximum(z, 0.0) + (1.0 - g) * z
        return a @ self.weights[upto] + self.biases[upto]

    def __call__(self, x: float) -> float:
        return float(self._prefix(x, self.depth)[0])


def count_linear_regions(net: ScalarReluNet, domain: tuple[float, float],
                         merge_tol: float = 1e-10) -> int:
    """Exact number of maximal intervals on which the net is affine.

    Within each current interval every pre-activation is affine, so a
    rectified unit can introduce at most one new breakpoint there (a strict
    sign change of its pre-activation).  Breakpoints are accumulated layer by
    layer; the final partition is merged where slope and intercept agree, so
    rectifications that never flip sign do not inflate the count.
    """
    a, b = domain
    if not a < b:
        raise TheoryError("domain must satisfy a < b")
    if net.total_units > 64:
        raise TheoryError("region counting is budgeted at 64 units")

    points = [float(a), float(b)]
    for layer in range(net.depth):
        rectified = [u for u, g in enumerate(net.gates[layer]) if g == 1]
        if not rectified:
            continue
        zl = np.array([net._prefix(x, layer) for x in points])
        new = []
        for i in range(len(points) - 1):
            u, v = points[i], points[i + 1]
            for unit in rectified:
                z0, z1 = zl[i, unit], zl[i + 1, unit]
                if z0 * z1 < 0.0:
                    new.append(u + (v - u) * z0 / (z0 - z1))
        if new:
            merged = sorted(set(points) | set(new))
            # drop near-duplicates produced by float crossings at existing points
            points = [merged[0]]
            span = b - a
            for x in merged[1:]:
                if x - points[-1] > 1e-12 * span:
                    points.append(x)
            if points[-1] != b:
                points[-1] = float(b)

    ys = np.array([net(x) for x in points])
    xs = np.array(points)
    slopes = np.diff(ys) / np.diff(xs)
    intercepts = ys[:-1] - slopes * xs[:-1]
    count = 1
    for i in range(1, len(slopes)):
        if (abs(slopes[i] - slopes[i - 1]) > merge_tol
                or abs(intercepts[i] - intercepts[i - 1]) > merge_tol):
            count += 1
    return count


def region_upper_bound(widths: tuple[int, ...]) -> int:
    """Closed-form cap on scalar-net linear regions: 2^(k-1) (w1+1) w2 ... wk."""
    if len(widths) < 1 or any(w < 1 for w in widths):
        raise TheoryError("need at least one hidden layer with width >= 1")
    bound = 2 ** (len(widths) - 1) * (widths[0] + 1)
    for w in widths[1:]:
        bound *= w
    return bound
