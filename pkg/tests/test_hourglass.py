import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pyranet.graph import GraphError, backward, forward
from pyranet.hourglass import (HourglassConfig, KeypointSet, build_hourglass, decode_keypoints, make_target,
                               make_targets, mse_loss, pck, skip_sum_nodes)
from pyranet.init import InitScheme, apply_init
from pyranet.prm import PRMConfig, param_count
from pyranet.variance import hourglass_skipsum_variance


@pytest.fixture(scope="module")
def small_net():
    cfg = HourglassConfig(stacks=2, depth=2, channels=8, joints=3)
    g = build_hourglass(cfg)
    return cfg, g, apply_init(g, InitScheme("msr"), seed=0, dtype=np.float64)


class TestBuild:
    def test_one_stack_depth_one(self):
        cfg = HourglassConfig(stacks=1, depth=1, channels=8, joints=5)
        g = build_hourglass(cfg)
        p = apply_init(g, InitScheme("msr"), seed=0)
        outs, _ = forward(g, p, [np.zeros((1, 1, 32, 32), np.float32)])
        assert len(outs) == 1 and outs[0].shape == (1, 5, 8, 8)

    def test_two_stacks_two_outputs(self, small_net):
        cfg, g, p = small_net
        outs, _ = forward(g, p, [np.random.default_rng(0).standard_normal((2, 1, 32, 32))])
        assert len(g.outputs) == 2 and all(o.shape == (2, 3, 8, 8) for o in outs)

    def test_indivisible_input(self):
        with pytest.raises(GraphError):
            HourglassConfig(depth=3).check_input(48, 64)

    def test_variance_fix_param_delta(self):
        base = HourglassConfig(stacks=2, depth=3, channels=16)
        plain = param_count(build_hourglass(base))
        fixed = param_count(build_hourglass(HourglassConfig(stacks=2, depth=3, channels=16, variance_fix=True)))
        c = 16
        per_sum = (c * c + c) + 2 * c  # 1x1 conv with bias, plus BN gamma/beta
        n_sums = len(skip_sum_nodes(build_hourglass(base)))
        assert n_sums == 2 * 3
        assert fixed - plain == n_sums * per_sum

    def test_prm_block_builds(self):
        cfg = HourglassConfig(stacks=1, depth=2, channels=8, block=PRMConfig("Bstar", branch_channels=2))
        g = build_hourglass(cfg)
        p = apply_init(g, InitScheme("branch"), seed=0)
        outs, _ = forward(g, p, [np.zeros((2, 1, 16, 16), np.float32)])
        assert outs[0].shape == (2, 5, 4, 4)

    def test_config_roundtrip(self):
        cfg = HourglassConfig(block=PRMConfig("C", levels=3), variance_fix=True)
        assert HourglassConfig.from_dict(cfg.to_dict()) == cfg

    def test_each_stack_loss_head_is_live(self, small_net):
        cfg, g, p = small_net
        x = np.random.default_rng(1).standard_normal((2, 1, 32, 32))
        outs, cache = forward(g, p, [x])
        # detach the last stack: the first stack's parameters still get gradient
        pg, _ = backward(g, p, cache, [np.ones_like(outs[0]), None])
        # the inter-stack projections only feed stack 1, so they are excluded
        first = [k for k in pg if k.startswith("hg0.") and k.endswith("weight")
                 and not k.startswith(("hg0.ll_", "hg0.score_"))]
        assert first and all(np.any(pg[k] != 0) for k in first)
        assert np.all(pg["hg0.ll_.weight"] == 0)
        last = [k for k in pg if k.startswith("hg1.")]
        assert all(np.all(pg[k] == 0) for k in last)


class TestTargets:
    def test_peak_one(self):
        t = make_target(KeypointSet([[3.2, 4.7]]), 8, 8)
        assert t[0, 5, 3] == 1.0 and t.max() == 1.0

    def test_one_pixel_away(self):
        t = make_target(KeypointSet([[3, 4]]), 8, 8, sigma=1.0)
        assert t[0, 4, 4] == pytest.approx(math.exp(-0.5), abs=1e-15)
        assert round(t[0, 4, 4], 5) == 0.60653

    def test_symmetric(self):
        t = make_target(KeypointSet([[4, 4]]), 9, 9, sigma=1.3)[0]
        for dy in range(-4, 5):
            for dx in range(-4, 5):
                assert t[4 + dy, 4 + dx] == t[4 - dy, 4 - dx]

    def test_invisible_all_zero(self):
        t = make_target(KeypointSet([[1, 1], [2, 2]], [True, False]), 4, 4)
        assert np.all(t[1] == 0) and t[0].max() == 1

    def test_nonnegative(self):
        assert make_targets([KeypointSet(np.random.default_rng(0).uniform(0, 15, (5, 2)))], 16, 16).min() >= 0

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            make_target(KeypointSet([[1, 1]]), 4, 4, sigma=0)


class TestLoss:
    def test_zero_at_target(self):
        t = make_targets([KeypointSet([[1, 2]])], 4, 4)
        assert mse_loss([t, t], t)[0] == 0

    def test_constant_offset(self):
        t = np.zeros((1, 1, 2, 2))
        total, per, _ = mse_loss(t + 0.3, t)
        assert total == pytest.approx(0.5 * 4 * 0.09)

    def test_sum_over_stacks(self, rng):
        t = rng.standard_normal((2, 3, 4, 4))
        a, b = rng.standard_normal((2, 2, 3, 4, 4))
        total, per, _ = mse_loss([a, b], t)
        assert total == pytest.approx(sum(per))

    def test_gradient_matches_finite_differences(self, rng):
        t = rng.standard_normal((1, 2, 3, 3))
        p = rng.standard_normal((1, 2, 3, 3))
        _, _, (g,) = mse_loss(p, t)
        h = 1e-6
        for idx in np.ndindex(p.shape):
            q = p.copy()
            q[idx] += h
            up = mse_loss(q, t)[0]
            q[idx] -= 2 * h
            down = mse_loss(q, t)[0]
            assert abs((up - down) / (2 * h) - g[idx]) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))

    @given(st.integers(0, 10**6))
    def test_nonnegative_zero_iff_equal(self, seed):
        r = np.random.default_rng(seed)
        t = r.standard_normal((1, 2, 3, 3))
        p = t.copy()
        p[0, r.integers(2), r.integers(3), r.integers(3)] += r.choice([-1, 1]) * r.uniform(1e-3, 1)
        assert mse_loss(p, t)[0] > 0 and mse_loss(t, t)[0] == 0


class TestDecode:
    def test_roundtrip_every_grid_point(self):
        for y in range(16):
            for x in range(16):
                k = decode_keypoints(make_target(KeypointSet([[x, y]]), 16, 16))
                assert tuple(k.joints[0]) == (x, y)

    @given(st.floats(0, 15.49), st.floats(0, 15.49))
    def test_roundtrip_real_positions(self, x, y):
        k = decode_keypoints(make_target(KeypointSet([[x, y]]), 16, 16))
        assert tuple(k.joints[0]) == (math.floor(x + 0.5), math.floor(y + 0.5))

    def test_all_equal_picks_origin(self):
        assert tuple(decode_keypoints(np.ones((1, 5, 5))).joints[0]) == (0, 0)

    @pytest.mark.parametrize("order", [0, 1])
    def test_higher_peak_wins(self, order):
        m = np.zeros((1, 6, 6))
        spots = [(1, 4), (4, 2)]
        m[0][spots[order]] = 0.9
        m[0][spots[1 - order]] = 1.0
        y, x = spots[1 - order]
        assert tuple(decode_keypoints(m).joints[0]) == (x, y)

    def test_batch(self):
        out = decode_keypoints(np.zeros((3, 2, 4, 4)))
        assert len(out) == 3 and len(out[0]) == 2


class TestPCK:
    def test_perfect(self):
        g = [KeypointSet([[1, 1], [2, 3]])]
        per, mean = pck(g, g, 0.2, 10.0)
        assert np.all(per == 1) and mean == 1

    def test_closed_boundary(self):
        per, mean = pck([KeypointSet([[3.0, 4.0]])], [KeypointSet([[0.0, 0.0]])], 0.5, 10.0)
        assert mean == 1.0

    def test_hand_count(self):
        gt = [KeypointSet([[0, 0], [5, 5], [9, 9], [2, 7]])]
        pr = [KeypointSet([[0.5, 0], [5, 8], [9, 9.9], [7, 7]])]
        per, mean = pck(pr, gt, 0.1, 10.0)
        assert list(per) == [1, 0, 1, 0] and mean == 0.5

    def test_invisible_excluded(self):
        gt = [KeypointSet([[0, 0], [5, 5]], [True, False])]
        per, mean = pck([KeypointSet([[0, 0], [9, 9]])], gt, 0.1, 1.0)
        assert mean == 1.0 and np.isnan(per[1])

    def test_nonpositive_normalizer(self):
        g = [KeypointSet([[0, 0]])]
        with pytest.raises(ValueError):
            pck(g, g, 0.2, 0.0)


def test_variance_fix_shrinks_skip_sum_variance():
    kw = dict(stacks=2, depth=3, channels=16)
    plain = hourglass_skipsum_variance(HourglassConfig(**kw), trials=100, seed=0)
    fixed = hourglass_skipsum_variance(HourglassConfig(**kw, variance_fix=True), trials=100, seed=0)
    ratios = [f.variance / p.variance for f, p in zip(fixed.records, plain.records)]
    assert max(ratios) <= 0.6, ratios
