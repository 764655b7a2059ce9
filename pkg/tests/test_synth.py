import numpy as np
import pytest
from scipy import stats

from pyranet.synth import (FLIP_PERMUTATION, JOINT_NAMES, FigureSpec, generate, image_to_heatmap, load_dataset,
                           render_figure, save_dataset, skeleton)


@pytest.fixture(scope="module")
def big():
    return generate(2000, seed=3)


class TestGenerate:
    def test_same_seed_bitwise(self):
        a, b = generate(20, seed=9), generate(20, seed=9)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.joints.tobytes() == b.joints.tobytes()

    def test_order_independent(self):
        whole = generate(10, seed=4)
        tail = generate(4, seed=4, start=6)
        np.testing.assert_array_equal(whole.images[6:], tail.images)

    def test_joints_in_bounds(self, big):
        assert big.joints.min() >= 0 and big.joints.max() <= 63

    def test_joint_on_figure_pixels(self, big):
        for i in range(200):
            for x, y in np.floor(big.joints[i] + 0.5).astype(int):
                assert big.images[i, 0, y, x] > 0

    def test_blob_centroid_recovers_label(self, big):
        spec = big.spec
        ys, xs = np.mgrid[0:64, 0:64]
        for i in range(100):
            img = big.images[i, 0].astype(np.float64)
            d2 = np.stack([(xs - j[0]) ** 2 + (ys - j[1]) ** 2 for j in big.joints[i]])
            owner = d2.argmin(axis=0)
            for k, j in enumerate(big.joints[i]):
                # pixels within 2 px that are closer to this joint than to any other
                near = (d2[k] <= 4) & (owner == k)
                w = np.where(near, np.clip(img - spec.limb_intensity, 0, None), 0)
                c = np.array([np.sum(w * xs), np.sum(w * ys)]) / np.sum(w)
                assert np.hypot(*(c - j)) <= 1.0

    def test_count_must_be_positive(self):
        with pytest.raises(ValueError):
            generate(0)

    @pytest.mark.parametrize("limb", ["left_arm", "right_arm", "left_leg", "right_leg"])
    def test_angles_uniform(self, big, limb):
        lo, hi = big.spec.angle_range(limb)
        a = np.array([p[f"{limb}_angle"] for p in big.poses])
        assert stats.kstest(a, stats.uniform(loc=lo, scale=hi - lo).cdf).statistic < 0.1

    def test_foreshortening_range_sampled(self, big):
        f = np.array([p["left_arm_foreshortening"] for p in big.poses])
        assert f.min() >= 0.4 and f.max() <= 1.0
        assert stats.kstest(f, stats.uniform(loc=0.4, scale=0.6).cdf).statistic < 0.1


class TestFigure:
    @staticmethod
    def _arm_extent(factor):
        spec = FigureSpec()
        pose = {"center": [31.5, 31.5], "tilt": 0.0}
        for limb in ("left_arm", "right_arm", "left_leg", "right_leg"):
            pose[f"{limb}_angle"] = np.mean(spec.angle_range(limb))
            pose[f"{limb}_foreshortening"] = factor
        joints, segs = skeleton(pose, spec)
        neck, hand = segs[2]
        img = render_figure(joints, [segs[2]], spec, blobs=False)
        ys, xs = np.nonzero(img >= 0.5 * spec.limb_intensity)
        d = (hand - neck) / np.linalg.norm(hand - neck)
        proj = (xs - neck[0]) * d[0] + (ys - neck[1]) * d[1]
        return proj.max() - proj.min()

    def test_foreshortening_halves_limb_length(self):
        assert self._arm_extent(1.0) >= 2 * self._arm_extent(0.4)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            FigureSpec(foreshortening=(0.2, 1.0))
        with pytest.raises(ValueError):
            FigureSpec(limb_intensity=1.0, joint_intensity=1.0)

    def test_right_ranges_mirror_left(self):
        s = FigureSpec()
        for a in np.linspace(*s.left_arm, 7):
            assert s.right_arm[0] <= 180 - a <= s.right_arm[1]

    def test_flip_permutation_swaps_sides(self):
        names = [JOINT_NAMES[i] for i in FLIP_PERMUTATION]
        for a, b in zip(JOINT_NAMES, names):
            assert a.replace("left", "X").replace("right", "left").replace("X", "right") == b

    def test_heatmap_mapping(self):
        np.testing.assert_allclose(image_to_heatmap([[1.5, 63.5]]), [[0.0, 15.5]])


class TestStorage:
    def test_roundtrip(self, tmp_path):
        tr, va = generate(5, seed=1), generate(3, seed=1, start=5)
        save_dataset(tmp_path, {"train": tr, "val": va})
        back = load_dataset(tmp_path)
        assert back["train"].images.tobytes() == tr.images.tobytes()
        np.testing.assert_allclose(back["val"].joints, va.joints, atol=1e-6)
        assert back["val"].poses == va.poses
        assert back["train"].spec == tr.spec

    def test_truncated_blob_rejected(self, tmp_path):
        save_dataset(tmp_path, {"train": generate(2, seed=0)})
        blob = tmp_path / "train.f32"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(ValueError, match="expected"):
            load_dataset(tmp_path)

    def test_missing_index(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)
