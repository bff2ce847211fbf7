"""Approximation-rate and region-count results against brute-force oracles.

The greedy minimax fit is compared with exhaustive breakpoint search on tiny
grids, the 1/(8n^2) law for x^2 is asserted with its closed form, and the
exact region counter is cross-checked by dense slope sampling on random nets
plus hand-built fixtures whose counts are known geometrically.
"""

import numpy as np
import pytest

from relufair.theory import (ConvexFn1D, PiecewiseLinear, ScalarReluNet,
                             TheoryError, _greedy_partition, _segment_error,
                             best_pwl_error, count_linear_regions,
                             exhaustive_pwl_error, pwl_residual, rate_check,
                             region_upper_bound)


class TestConvexFn:
    def test_known_names_validate(self):
        for name in ("square", "exp", "softplus"):
            f = ConvexFn1D(name, (-1.0, 2.0))
            assert f.strictly_convex

    def test_linear_allowed_but_flagged(self):
        f = ConvexFn1D("linear", (0.0, 1.0))
        assert not f.strictly_convex
        assert f(0.25) == 0.25

    def test_unknown_name(self):
        with pytest.raises(TheoryError, match="unknown function"):
            ConvexFn1D("cube", (0.0, 1.0))

    def test_bad_domain(self):
        with pytest.raises(TheoryError, match="interval"):
            ConvexFn1D("square", (1.0, 1.0))
        with pytest.raises(TheoryError, match="interval"):
            ConvexFn1D("square", (0.0, np.inf))

    def test_evaluation(self):
        f = ConvexFn1D("softplus", (-2.0, 2.0))
        np.testing.assert_allclose(f([0.0]), [np.log(2.0)])


class TestPiecewiseLinear:
    def test_interpolates(self):
        p = PiecewiseLinear((0.0, 1.0, 3.0), (0.0, 2.0, 0.0))
        assert p.n_segments == 2
        np.testing.assert_allclose(p([0.5, 2.0]), [1.0, 1.0])

    def test_validation(self):
        with pytest.raises(TheoryError, match="at least two"):
            PiecewiseLinear((0.0,), (1.0,))
        with pytest.raises(TheoryError, match="at least two"):
            PiecewiseLinear((0.0, 1.0), (1.0,))
        with pytest.raises(TheoryError, match="increasing"):
            PiecewiseLinear((0.0, 0.0), (1.0, 2.0))


def greedy_minimax(f, n, grid):
    """Bisection over the greedy cover on an explicit grid (mirrors the
    production routine but without its resolution floor, so tiny instances
    can be compared against exhaustive search on the same breakpoints)."""
    a, b = f.domain
    xs = np.linspace(a, b, grid + 1)
    fs = f(xs)
    lo, hi = 0.0, _segment_error(xs, fs, 0, grid)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _greedy_partition(xs, fs, n, mid) is not None:
            hi = mid
        else:
            lo = mid
    cuts = _greedy_partition(xs, fs, n, hi)
    return max(_segment_error(xs, fs, i, j) for i, j in zip(cuts, cuts[1:]))


class TestBestPwlError:
    def test_square_single_segment_is_exactly_one_eighth(self):
        f = ConvexFn1D("square", (0.0, 1.0))
        out = best_pwl_error(f, 1)
        assert out["error"] == pytest.approx(0.125, rel=1e-6)
        assert out["breakpoints"] == [0.0, 1.0]

    def test_square_follows_closed_form(self):
        f = ConvexFn1D("square", (0.0, 1.0))
        for n in (1, 2, 4, 8):
            out = best_pwl_error(f, n)
            assert out["error"] == pytest.approx(1.0 / (8.0 * n * n), rel=1e-2)
            bp = out["breakpoints"]
            assert len(bp) == n + 1
            assert bp[0] == 0.0 and bp[-1] == 1.0
            assert all(u < v for u, v in zip(bp, bp[1:]))

    def test_greedy_matches_exhaustive_search(self):
        for name, dom in (("square", (0.0, 1.0)), ("exp", (0.0, 1.0)),
                          ("softplus", (-2.0, 2.0))):
            f = ConvexFn1D(name, dom)
            for n, grid in ((2, 40), (3, 30)):
                want = exhaustive_pwl_error(f, n, grid)
                got = greedy_minimax(f, n, grid)
                assert got == pytest.approx(want, rel=1e-9, abs=1e-15)

    def test_linear_reaches_zero_error(self):
        out = best_pwl_error(ConvexFn1D("linear", (0.0, 2.0)), 3)
        assert out["error"] == 0.0
        assert out["breakpoints"] == [0.0, 2.0]

    def test_input_validation(self):
        f = ConvexFn1D("square", (0.0, 1.0))
        with pytest.raises(TheoryError, match="at least one segment"):
            best_pwl_error(f, 0)
        with pytest.raises(TheoryError, match="too coarse"):
            best_pwl_error(f, 2, grid=500)
        with pytest.raises(TheoryError, match="tiny"):
            exhaustive_pwl_error(f, 4, grid=20)
        with pytest.raises(TheoryError, match="tiny"):
            exhaustive_pwl_error(f, 2, grid=100)


class TestRateCheck:
    def test_square_slope_near_minus_two(self):
        out = rate_check(ConvexFn1D("square", (0.0, 1.0)), [1, 2, 4, 8])
        assert -2.05 <= out["slope"] <= -1.95
        assert len(out["errors"]) == 4
        assert all(a > b for a, b in zip(out["errors"], out["errors"][1:]))

    def test_exp_and_softplus_slopes(self):
        out = rate_check(ConvexFn1D("exp", (0.0, 1.0)), [1, 2, 4, 8])
        assert -2.15 <= out["slope"] <= -1.85
        out = rate_check(ConvexFn1D("softplus", (-2.0, 2.0)), [1, 2, 4, 8])
        assert -2.15 <= out["slope"] <= -1.85

    def test_requires_four_geometric_counts(self):
        f = ConvexFn1D("square", (0.0, 1.0))
        with pytest.raises(TheoryError, match="four"):
            rate_check(f, [1, 2, 4])
        with pytest.raises(TheoryError, match="geometric"):
            rate_check(f, [1, 2, 3, 4])

    def test_linear_rejected_via_zero_error(self):
        with pytest.raises(TheoryError, match="zero error"):
            rate_check(ConvexFn1D("linear", (0.0, 1.0)), [1, 2, 4, 8])


class TestPwlResidual:
    def test_chord_of_square(self):
        f = ConvexFn1D("square", (0.0, 1.0))
        chord = PiecewiseLinear((0.0, 1.0), (0.0, 1.0))
        # max of t - t^2 is 1/4 at t = 1/2, which the even grid contains
        assert pwl_residual(chord, f, grid=100) == pytest.approx(0.25)

    def test_domain_must_be_covered(self):
        f = ConvexFn1D("square", (0.0, 1.0))
        inner = PiecewiseLinear((0.1, 0.9), (0.0, 1.0))
        with pytest.raises(TheoryError, match="cover"):
            pwl_residual(inner, f, grid=50)


def two_unit_pair():
    """relu(x-1) + relu(-x-1): three regions; one gate off leaves two."""
    rectified = ScalarReluNet(
        (2,),
        (np.array([[1.0, -1.0]]), np.array([[1.0], [1.0]])),
        (np.array([-1.0, -1.0]), np.array([0.0])),
        ((1, 1),))
    return rectified, rectified.with_gate(0, 1, 0)


class TestScalarReluNet:
    def test_forward_hand_value(self):
        net, _ = two_unit_pair()
        # relu(x-1) + relu(-x-1) at x = 2 is 1, at x = -3 is 2, at 0 is 0
        assert net(2.0) == pytest.approx(1.0)
        assert net(-3.0) == pytest.approx(2.0)
        assert net(0.0) == pytest.approx(0.0)

    def test_partially_gated_forward(self):
        _, mixed = two_unit_pair()
        # second unit passes -x-1 straight through
        assert mixed(0.0) == pytest.approx(-1.0)
        assert mixed(2.0) == pytest.approx(1.0 + (-3.0))

    def test_random_construction(self):
        net = ScalarReluNet.random((3, 2), seed=0)
        assert net.depth == 2 and net.total_units == 5
        assert net.weights[0].shape == (1, 3)
        assert net.weights[1].shape == (3, 2)
        assert net.weights[2].shape == (2, 1)
        assert net.gates == ((1, 1, 1), (1, 1))
        again = ScalarReluNet.random((3, 2), seed=0)
        assert all(np.array_equal(a, b) for a, b in zip(net.weights, again.weights))

    def test_with_gate_flips_one_unit(self):
        net = ScalarReluNet.random((3,), seed=1)
        off = net.with_gate(0, 1, 0)
        assert off.gates == ((1, 0, 1),)
        assert net.gates == ((1, 1, 1),)

    def test_validation(self):
        with pytest.raises(TheoryError, match="hidden layer"):
            ScalarReluNet((), (), (), ())
        with pytest.raises(TheoryError, match="weight/bias count"):
            ScalarReluNet((2,), (np.zeros((1, 2)),), (np.zeros(2),), ((1, 1),))
        with pytest.raises(TheoryError, match="expects weights"):
            ScalarReluNet((2,), (np.zeros((2, 2)), np.zeros((2, 1))),
                          (np.zeros(2), np.zeros(1)), ((1, 1),))
        with pytest.raises(TheoryError, match="gate"):
            ScalarReluNet((2,), (np.zeros((1, 2)), np.zeros((2, 1))),
                          (np.zeros(2), np.zeros(1)), ((1, 2),))


def sampled_region_count(net, domain, samples=20001):
    """Slope-run counting on a dense grid; single transitional samples that
    straddle a kink are dropped before runs are counted."""
    xs = np.linspace(domain[0], domain[1], samples)
    ys = np.array([net(x) for x in xs])
    slopes = np.diff(ys) / np.diff(xs)
    scale = max(1.0, np.max(np.abs(slopes)))
    runs = []  # (slope, length)
    for s in slopes:
        if runs and abs(s - runs[-1][0]) <= 1e-7 * scale:
            runs[-1][1] += 1
        else:
            runs.append([s, 1])
    return sum(1 for s, length in runs if length > 1)


class TestRegionCounting:
    def test_two_unit_fixture(self):
        rectified, mixed = two_unit_pair()
        assert count_linear_regions(rectified, (-3.0, 3.0)) == 3
        assert count_linear_regions(mixed, (-3.0, 3.0)) == 2

    def test_all_linear_is_one_region(self):
        net, _ = two_unit_pair()
        linear = net.with_gate(0, 0, 0).with_gate(0, 1, 0)
        assert count_linear_regions(linear, (-3.0, 3.0)) == 1

    def test_inactive_rectifier_does_not_split(self):
        # relu(x + 10) is affine on [-3, 3]; the gate must not add a region
        net = ScalarReluNet((1,), (np.array([[1.0]]), np.array([[1.0]])),
                            (np.array([10.0]), np.array([0.0])), ((1,),))
        assert count_linear_regions(net, (-3.0, 3.0)) == 1

    def test_constant_net(self):
        net = ScalarReluNet((2,), (np.zeros((1, 2)), np.zeros((2, 1))),
                            (np.zeros(2), np.array([3.0])), ((1, 1),))
        assert count_linear_regions(net, (-1.0, 1.0)) == 1

    def test_matches_dense_sampling_on_random_nets(self):
        cases = [((3,), s) for s in range(4)] + \
                [((2, 2), s) for s in range(4, 8)] + \
                [((4,), 8), ((3, 2), 9)]
        for widths, seed in cases:
            net = ScalarReluNet.random(widths, seed=seed)
            exact = count_linear_regions(net, (-3.0, 3.0))
            assert exact == sampled_region_count(net, (-3.0, 3.0))
            assert exact <= region_upper_bound(widths)

    def test_domain_and_size_guards(self):
        net, _ = two_unit_pair()
        with pytest.raises(TheoryError, match="domain"):
            count_linear_regions(net, (1.0, 1.0))
        with pytest.raises(TheoryError, match="64"):
            count_linear_regions(ScalarReluNet.random((65,), seed=0), (-1.0, 1.0))


class TestRegionUpperBound:
    def test_hand_values(self):
        assert region_upper_bound((2,)) == 3
        assert region_upper_bound((1,)) == 2
        assert region_upper_bound((3, 2)) == 16
        assert region_upper_bound((4, 3, 2)) == 120

    def test_validation(self):
        with pytest.raises(TheoryError):
            region_upper_bound(())
        with pytest.raises(TheoryError):
            region_upper_bound((0,))

    def test_soundness_over_random_nets(self):
        rng = np.random.Generator(np.random.PCG64(42))
        shapes = [(2,), (3,), (4,), (2, 2), (3, 2), (2, 3)]
        for trial in range(50):
            widths = shapes[trial % len(shapes)]
            net = ScalarReluNet.random(widths, seed=1000 + trial)
            if trial % 3 == 0:
                layer = int(rng.integers(net.depth))
                unit = int(rng.integers(net.widths[layer]))
                net = net.with_gate(layer, unit, 0)
            assert count_linear_regions(net, (-3.0, 3.0)) <= region_upper_bound(widths)

    def test_single_layer_gate_monotonicity(self):
        # with one hidden layer, silencing a rectifier cannot add regions
        for seed in range(200):
            net = ScalarReluNet.random((4,), seed=seed)
            full = count_linear_regions(net, (-3.0, 3.0))
            for unit in range(4):
                off = count_linear_regions(net.with_gate(0, unit, 0), (-3.0, 3.0))
                assert off <= full
