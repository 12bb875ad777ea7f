"""Influence bumps, grid snapping, and design-variable gradients."""

import numpy as np
import pytest

from stso.actuation import (ActuatorDesign, influence, init_actuators,
                            placement_gradient, snap_to_grid, width_gradient)
from stso.fields import make_grid


def design_1d(positions, widths):
    pos = np.asarray(positions, dtype=float)[:, None]
    return ActuatorDesign(pos, pos.copy(), np.asarray(widths, dtype=float))


class TestInfluence:
    def test_gaussian_profile(self):
        g = make_grid(1, 1.0, 11)
        rows = influence(design_1d([0.5], [0.1]), g).rows
        k = np.arange(11) - 5
        np.testing.assert_allclose(rows[0], np.exp(-(k**2) / 2.0), rtol=1e-12)
        assert rows[0, 5] == 1.0

    def test_wide_limit_is_flat(self):
        g = make_grid(1, 1.0, 11)
        rows = influence(design_1d([0.5], [1e9]), g).rows
        np.testing.assert_allclose(rows[0], 1.0)

    def test_gram_matches_quadrature_loop(self):
        g = make_grid(1, 1.0, 101)
        des = design_1d([0.3, 0.6], [0.1, 0.1])
        infl = influence(des, g)
        gram = infl.gram(g.quadrature_weights)
        # dense per-node quadrature oracle
        w = np.full(101, g.cell_volume)
        w[0] *= 0.5
        w[-1] *= 0.5
        x = g.axis_coords(0)
        m0 = np.exp(-((x - 0.3) ** 2) / 0.02)
        m1 = np.exp(-((x - 0.6) ** 2) / 0.02)
        expected = sum(m0[i] * m1[i] * w[i] for i in range(101))
        assert gram[0, 1] == pytest.approx(expected, abs=1e-10)
        assert gram[0, 1] == gram[1, 0]

    def test_apply_is_linear_combination(self):
        g = make_grid(1, 1.0, 21)
        infl = influence(design_1d([0.3, 0.7], [0.15, 0.1]), g)
        assert np.all(infl.apply(np.zeros(2)) == 0.0)
        np.testing.assert_array_equal(infl.apply(np.array([1.0, 0.0])), infl.rows[0])
        combo = infl.apply(np.array([1.0, 1.0]))
        for node in range(21):
            assert combo[node] == pytest.approx(infl.rows[0, node] + infl.rows[1, node])

    def test_apply_rejects_wrong_length(self):
        g = make_grid(1, 1.0, 21)
        infl = influence(design_1d([0.3, 0.7], [0.15, 0.1]), g)
        with pytest.raises(ValueError):
            infl.apply(np.zeros(3))

    def test_2d_peak_at_snapped_node(self):
        g = make_grid(2, (1.0, 1.0), 11)
        pos = np.array([[0.3, 0.7]])
        des = ActuatorDesign(pos, pos.copy(), np.array([0.2]))
        rows = influence(des, g).rows
        peak = np.argmax(rows[0])
        np.testing.assert_allclose(g.node_coords[peak], [0.3, 0.7])
        assert rows[0, peak] == 1.0


class TestSnapToGrid:
    def test_rounding_examples(self):
        g = make_grid(1, 1.0, 11)
        assert snap_to_grid(g, [[0.24]])[0, 0] == pytest.approx(0.2)
        assert snap_to_grid(g, [[0.25]])[0, 0] == pytest.approx(0.3)  # tie rounds up
        assert snap_to_grid(g, [[1.37]])[0, 0] == pytest.approx(1.0)  # clamped
        assert snap_to_grid(g, [[-0.2]])[0, 0] == 0.0

    def test_idempotent_and_within_half_spacing(self):
        g = make_grid(1, 2.0, 17)
        vs = np.linspace(-0.3, 2.3, 113)[:, None]
        snapped = snap_to_grid(g, vs)
        np.testing.assert_allclose(snap_to_grid(g, snapped), snapped, atol=1e-14)
        clamped = np.clip(vs, 0.0, 2.0)
        assert np.all(np.abs(snapped - clamped) <= g.spacing[0] / 2 + 1e-12)

    def test_2d_snaps_per_axis(self):
        g = make_grid(2, (1.0, 1.0), 11)
        out = snap_to_grid(g, [[0.24, 0.75]])
        np.testing.assert_allclose(out[0], [0.2, 0.8])

    def test_virtual_accumulation_crosses_node(self):
        # sub-rounding gradient: each step alone is swallowed by snapping,
        # but the virtual variable accumulates and crosses after exactly
        # ceil(spacing / (2 step)) iterations
        g = make_grid(1, 1.0, 9)  # spacing 0.125, binary-exact
        step = g.spacing[0] / 8.0
        v = np.array([[0.5]])
        crossings = 0
        expected_iters = int(np.ceil(g.spacing[0] / (2 * step)))
        for it in range(1, 13):
            v = v + step
            snapped = snap_to_grid(g, v)
            if snapped[0, 0] != 0.5 and crossings == 0:
                crossings = it
        assert crossings == expected_iters == 4
        # accumulated virtual motion is exactly the sum of the steps
        assert v[0, 0] == 0.5 + 12 * step


class TestDesignGradients:
    def test_zero_upstream(self):
        g = make_grid(1, 1.0, 21)
        des = design_1d([0.4], [0.1])
        zero = np.zeros((1, 21))
        assert np.all(placement_gradient(zero, des, g) == 0.0)
        assert np.all(width_gradient(zero, des, g) == 0.0)

    def test_peak_node_upstream_vanishes(self):
        g = make_grid(1, 1.0, 21)
        des = design_1d([0.5], [0.1])
        upstream = np.zeros((1, 21))
        upstream[0, 10] = 1.0  # the bump's own peak
        assert placement_gradient(upstream, des, g)[0, 0] == 0.0
        assert width_gradient(upstream, des, g)[0] == 0.0

    @pytest.mark.parametrize("dim,points", [(1, 41), (2, 13)])
    def test_matches_finite_differences(self, dim, points):
        g = make_grid(dim, (1.0,) * dim, points)
        gen = np.random.Generator(np.random.Philox(key=42))
        pos = gen.uniform(0.3, 0.7, size=(3, dim))
        des = ActuatorDesign(pos, pos.copy(), gen.uniform(0.08, 0.2, size=3))
        upstream = gen.standard_normal((3, g.n_nodes))

        def total(d):
            return float(np.sum(upstream * influence(d, g).rows))

        grad_p = placement_gradient(upstream, des, g)
        grad_w = width_gradient(upstream, des, g)
        h = 1e-6
        for i in range(3):
            for ax in range(dim):
                dp = des.snapped.copy()
                dm = des.snapped.copy()
                dp[i, ax] += h
                dm[i, ax] -= h
                fd = (total(ActuatorDesign(dp, dp, des.widths))
                      - total(ActuatorDesign(dm, dm, des.widths))) / (2 * h)
                assert abs(grad_p[i, ax] - fd) / (abs(fd) + 1e-12) < 1e-5
            wp, wm = des.widths.copy(), des.widths.copy()
            wp[i] += h
            wm[i] -= h
            fd = (total(ActuatorDesign(des.snapped, des.snapped, wp))
                  - total(ActuatorDesign(des.snapped, des.snapped, wm))) / (2 * h)
            assert abs(grad_w[i] - fd) / (abs(fd) + 1e-12) < 1e-5


class TestInitActuators:
    def test_within_range_and_snapped(self):
        g = make_grid(1, 1.0, 33)
        des = init_actuators(g, 5, [[0.4, 0.6]], 0.05, seed=3)
        assert des.count == 5
        assert np.all(des.virtual >= 0.4) and np.all(des.virtual <= 0.6)
        np.testing.assert_allclose(des.snapped, snap_to_grid(g, des.virtual))
        # deterministic given the seed
        again = init_actuators(g, 5, [[0.4, 0.6]], 0.05, seed=3)
        np.testing.assert_array_equal(des.virtual, again.virtual)

    def test_rejects_bad_widths(self):
        with pytest.raises(ValueError):
            ActuatorDesign(np.zeros((2, 1)), np.zeros((2, 1)), np.array([0.1, -0.2]))
