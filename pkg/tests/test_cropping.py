import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from patchattn import cropping as crp

HAM_SIZE = (600, 450)


def covered(grid):
    w, h = grid.image_size
    seen = np.zeros((h, w), bool)
    for x0, y0, x1, y1 in grid.rectangles():
        seen[y0:y1, x0:x1] = True
    return seen


class TestMakeGrid:
    def test_five_crops(self):
        g = crp.make_grid(HAM_SIZE, 224, 5)
        assert g.offsets == ((0, 0), (376, 0), (0, 226), (376, 226), (188, 113))

    def test_nine_crops(self):
        g = crp.make_grid(HAM_SIZE, 224, 9)
        assert g.offsets == tuple((x, y) for y in (0, 113, 226) for x in (0, 188, 376))

    def test_sixteen_crops_round_half_up(self):
        g = crp.make_grid(HAM_SIZE, 224, 16)
        xs = sorted({x for x, _ in g.offsets})
        ys = sorted({y for _, y in g.offsets})
        # 376/3 = 125.33, 752/3 = 250.67; 226/3 = 75.33, 452/3 = 150.67
        assert xs == [0, 125, 251, 376]
        assert ys == [0, 75, 151, 226]

    def test_round_half_up_tie(self):
        # 3 crops per axis over span 5: offsets 0, 2.5 -> 3, 5
        g = crp.make_grid((15, 15), 10, 9)
        assert sorted({x for x, _ in g.offsets}) == [0, 3, 5]

    @pytest.mark.parametrize("n", [5, 9, 16])
    def test_inside_and_unique(self, n):
        g = crp.make_grid(HAM_SIZE, 224, n)
        assert len(set(g.offsets)) == n
        for x, y in g.offsets:
            assert 0 <= x <= 600 - 224 and 0 <= y <= 450 - 224

    @pytest.mark.parametrize("n", [9, 16])
    def test_full_coverage(self, n):
        assert covered(crp.make_grid(HAM_SIZE, 224, n)).all()

    def test_five_crops_leave_gaps(self):
        seen = covered(crp.make_grid(HAM_SIZE, 224, 5))
        assert not seen[0, 300]  # top edge between the two upper corners
        assert seen.mean() > 0.8

    def test_overlap_for_dense_grids(self):
        for n in (9, 16):
            g = crp.make_grid(HAM_SIZE, 224, n)
            xs = sorted({x for x, _ in g.offsets})
            assert all(b - a < 224 for a, b in zip(xs, xs[1:]))

    def test_degenerate_crop(self):
        with pytest.raises(crp.GridError):
            crp.make_grid((224, 224), 224, 5)

    def test_crop_too_large(self):
        with pytest.raises(crp.GridError):
            crp.make_grid((100, 100), 120, 9)

    def test_bad_count(self):
        with pytest.raises(crp.GridError):
            crp.make_grid(HAM_SIZE, 224, 7)

    def test_stable(self):
        assert crp.make_grid(HAM_SIZE, 224, 16) == crp.make_grid(HAM_SIZE, 224, 16)


class TestExtract:
    def test_lossless(self):
        rng = np.random.default_rng(0)
        img = rng.random((45, 60, 3)).astype(np.float32)
        g = crp.make_grid((60, 45), 22, 9)
        pb = crp.extract_patches(img, g)
        assert pb.data.shape == (1, 9, 22, 22, 3)
        for p, (x, y) in enumerate(g.offsets):
            assert np.array_equal(pb.data[0, p].numpy(), img[y : y + 22, x : x + 22])

    def test_constant_image(self):
        img = np.full((45, 60, 3), 0.3, np.float32)
        pb = crp.extract_patches(img, crp.make_grid((60, 45), 22, 5))
        assert torch.all(pb.data == pb.data.flatten()[0])

    def test_marker_pixel(self):
        img = np.zeros((45, 60, 3), np.float32)
        img[0, 0] = 1.0
        g = crp.make_grid((60, 45), 22, 9)
        pb = crp.extract_patches(img, g)
        hits = [p for p in range(9) if pb.data[0, p].max() > 0]
        expected = [p for p, (x0, y0, x1, y1) in enumerate(g.rectangles()) if x0 <= 0 < x1 and y0 <= 0 < y1]
        assert hits == expected == [0]

    def test_ordered_twice_identical(self):
        img = np.random.default_rng(1).random((45, 60, 3)).astype(np.float32)
        g = crp.make_grid((60, 45), 22, 16)
        assert torch.equal(crp.strategy_ordered(img, g).data, crp.strategy_ordered(img, g).data)

    def test_size_mismatch(self):
        with pytest.raises(crp.GridError):
            crp.extract_patches(np.zeros((10, 10, 3)), crp.make_grid((60, 45), 22, 9))


def _batch(n_b, n_c, fill=1.0):
    return crp.PatchBatch(torch.full((n_b, n_c, 2, 2, 3), fill), None, np.ones((n_b, n_c), bool))


class TestPatchDropout:
    def test_zero_rate(self):
        b = _batch(3, 9)
        out = crp.patch_dropout(b, 0.0, np.random.default_rng(0))
        assert torch.equal(out.data, b.data) and out.dropout_mask.all()

    @pytest.mark.parametrize("p_d", [0.1, 0.3, 0.5])
    def test_binomial_rate(self, p_d):
        out = crp.patch_dropout(_batch(1000, 10), p_d, np.random.default_rng(42))
        n = out.dropout_mask.size
        rate = 1 - out.dropout_mask.mean()
        assert abs(rate - p_d) <= 3 * np.sqrt(p_d * (1 - p_d) / n)

    def test_zeroed_patches_are_zero(self):
        out = crp.patch_dropout(_batch(50, 9, 0.7), 0.5, np.random.default_rng(3))
        for b in range(50):
            for p in range(9):
                expected = 0.7 if out.dropout_mask[b, p] else 0.0
                assert torch.all(out.data[b, p] == expected)

    def test_never_all_dropped(self):
        out = crp.patch_dropout(_batch(2000, 2), 0.9, np.random.default_rng(5))
        assert out.dropout_mask.any(axis=1).all()
        assert (out.data.reshape(2000, -1).abs().sum(dim=1) > 0).all()

    def test_seeded(self):
        a = crp.patch_dropout(_batch(20, 9), 0.3, np.random.default_rng(9))
        b = crp.patch_dropout(_batch(20, 9), 0.3, np.random.default_rng(9))
        assert np.array_equal(a.dropout_mask, b.dropout_mask)

    def test_commutes_with_batching(self):
        rng_a, rng_b = np.random.default_rng(11), np.random.default_rng(11)
        batched = crp.patch_dropout(_batch(30, 5), 0.6, rng_a)
        singles = crp.stack_batches([crp.patch_dropout(_batch(1, 5), 0.6, rng_b) for _ in range(30)])
        assert np.array_equal(batched.dropout_mask, singles.dropout_mask)
        assert torch.equal(batched.data, singles.data)

    @pytest.mark.parametrize("p_d", [1.0, -0.1])
    def test_invalid_rate(self, p_d):
        with pytest.raises(ValueError):
            crp.patch_dropout(_batch(1, 5), p_d, np.random.default_rng(0))


class TestStrategies:
    def test_center_crop_box(self):
        assert crp.center_crop_box(HAM_SIZE) == (45, 34, 510, 382)

    def test_downsample_constant(self):
        img = np.full((450, 600, 3), 0.25, np.float32)
        out = crp.strategy_downsample(img, (64, 64))
        assert out.shape == (64, 64, 3)
        np.testing.assert_allclose(out, 0.25, atol=1e-7)

    def test_bilinear_golden(self):
        # align_corners=False upsampling of a 2x2 ramp to 4x4
        img = np.array([[0.0, 1.0], [2.0, 3.0]], np.float32)[..., None]
        out = crp.resize_bilinear(img, (4, 4))[..., 0]
        expected = np.array(
            [[0.0, 0.25, 0.75, 1.0], [0.5, 0.75, 1.25, 1.5], [1.5, 1.75, 2.25, 2.5], [2.0, 2.25, 2.75, 3.0]]
        )
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_single_crop_eval_region(self):
        img = np.zeros((450, 600, 3), np.float32)
        img[34 : 34 + 382, 45 : 45 + 510] = 1.0
        out = crp.strategy_single_crop_eval(img, (64, 64))
        np.testing.assert_allclose(out, 1.0)

    def test_single_crop_train_shape(self):
        img = np.random.default_rng(0).random((90, 120, 3)).astype(np.float32)
        rng = np.random.default_rng(1)
        for _ in range(20):
            assert crp.strategy_single_crop_train(img, (32, 32), rng).shape == (32, 32, 3)

    def test_random_crops_in_bounds(self):
        img = np.arange(45 * 60 * 3, dtype=np.float32).reshape(45, 60, 3)
        pb = crp.strategy_random_crops_train(img, (22, 22), 7, np.random.default_rng(0))
        assert pb.data.shape == (1, 7, 22, 22, 3)
        for p in range(7):
            v = pb.data[0, p, 0, 0, 0].item()
            y, x = divmod(int(v) // 3, 60)
            assert np.array_equal(pb.data[0, p].numpy(), img[y : y + 22, x : x + 22])


class TestAveragePredictions:
    def test_identical(self):
        p = [0.2, 0.5, 0.3]
        np.testing.assert_allclose(crp.average_predictions([p, p, p]), p, atol=1e-15)

    def test_two_opposites(self):
        np.testing.assert_array_equal(crp.average_predictions([[1, 0], [0, 1]]), [0.5, 0.5])

    @given(st.integers(1, 12), st.integers(2, 8), st.integers(0, 10_000))
    @settings(max_examples=40)
    def test_mean_oracle(self, n_c, c, seed):
        probs = np.random.default_rng(seed).dirichlet(np.ones(c), size=n_c)
        avg = crp.average_predictions(probs)
        oracle = [sum(probs[p, k] for p in range(n_c)) / n_c for k in range(c)]
        np.testing.assert_allclose(avg, oracle, atol=1e-12)
        assert abs(avg.sum() - 1) < 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            crp.average_predictions(np.zeros((0, 3)))
