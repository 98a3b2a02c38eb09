import numpy as np
import pytest

import inktrace.ink_model as ink_model
from inktrace.ink_model import (ModelParams, PredictionImage, Region,
                                TrainConfig, TrainingDiverged, bce_loss,
                                count_in_rect, extract_training_set, forward,
                                gather_patches, grad_check, init_params,
                                load_params, load_prediction, make_folds,
                                normalize_patches, predict_image,
                                read_loss_trace, save_params,
                                save_prediction, train, training_index,
                                write_loss_trace)
from inktrace.labeling import LabelImage
from inktrace.unwrap import SurfaceVolume

from conftest import synth_surface_volume


def all_valid_region(rid="r", h=20, w=30, d=9, rect=None, ink=None):
    sv = SurfaceVolume(data=np.full((h, w, d), 0.5 * 65535.0),
                       validity=np.ones((h, w, d), dtype=bool), step=1.0,
                       px_per_voxel=1.0, uv_origin=np.zeros(2),
                       voxel_size=4.0)
    if ink is None:
        ink = np.zeros((h, w), dtype=bool)
        ink[5:10, 5:10] = True
    labels = LabelImage(ink=ink, region=np.ones((h, w), dtype=bool))
    return Region(id=rid, sv=sv, labels=labels,
                  rect=rect or (0, 0, w, h))


class TestForward:
    def test_zero_weights_answer_half(self):
        params = init_params((3, 3, 5), hidden=(8,), seed=0)
        for w in params.weights:
            w[:] = 0.0
        assert forward(params, np.zeros((3, 3, 5))) == 0.5

    def test_single_layer_by_hand(self):
        params = ModelParams(layer_sizes=[2, 1],
                             weights=[np.array([[0.3], [-0.7]])],
                             biases=[np.array([0.1])],
                             input_shape=(1, 1, 2), normalization=False)
        p = forward(params, np.array([2.0, 1.0]))
        z = 0.3 * 2.0 - 0.7 * 1.0 + 0.1
        assert p == pytest.approx(1.0 / (1.0 + np.exp(-z)), abs=1e-12)

    def test_patch_shape_checked(self):
        params = init_params((3, 3, 5))
        with pytest.raises(ValueError, match="shape"):
            forward(params, np.zeros((3, 3, 4)))

    def test_nan_rejected(self):
        params = init_params((1, 1, 2))
        with pytest.raises(ValueError, match="NaN"):
            forward(params, np.array([0.0, np.nan]))


class TestBceLoss:
    def test_half_probability_is_ln2(self):
        p = np.full(10, 0.5)
        y = (np.arange(10) % 2).astype(float)
        assert bce_loss(p, y) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_clamp_keeps_loss_finite(self):
        assert np.isfinite(bce_loss(np.array([0.0, 1.0]),
                                    np.array([1.0, 0.0])))


class TestGradCheck:
    def test_backprop_matches_central_differences(self):
        params = init_params((5, 5, 5), hidden=(12, 6), seed=1)
        rng = np.random.default_rng(2)
        patch = rng.uniform(-1, 1, size=(5, 5, 5))
        assert grad_check(params, patch, 1.0, num_weights=120) < 1e-4

    def test_corrupted_gradient_is_caught(self, monkeypatch):
        params = init_params((3, 3, 3), hidden=(6,), seed=1)
        true_backward = ink_model._backward_batch

        def skewed(params, cache, p, y):
            gw, gb = true_backward(params, cache, p, y)
            return [g * 1.05 for g in gw], [g * 1.05 for g in gb]

        monkeypatch.setattr(ink_model, "_backward_batch", skewed)
        patch = np.random.default_rng(3).uniform(-1, 1, size=(3, 3, 3))
        assert grad_check(params, patch, 0.0, num_weights=60) > 1e-2


class TestNormalizePatches:
    def test_rows_become_standard(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 65535, size=(5, 40))
        out = normalize_patches(x)
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-9)

    def test_flat_rows_stay_zero(self):
        out = normalize_patches(np.full((2, 8), 3.0))
        np.testing.assert_array_equal(out, 0.0)


class TestTrainingIndex:
    def test_stride_arithmetic(self):
        r = all_valid_region(rect=(3, 2, 13, 9))
        centers, labels = training_index(r, stride=3)
        # u in {3, 6, 9, 12}, v in {2, 5, 8}
        assert len(centers) == 12
        assert {tuple(c) for c in centers} == {
            (u, v) for u in (3, 6, 9, 12) for v in (2, 5, 8)}
        np.testing.assert_array_equal(
            labels, r.labels.ink[centers[:, 1], centers[:, 0]])

    def test_invalid_pixels_skipped(self):
        r = all_valid_region()
        r.sv.validity[4, 7, :] = False
        centers, _ = training_index(r)
        assert (7, 4) not in {tuple(c) for c in centers}

    def test_stride_must_be_positive(self):
        with pytest.raises(ValueError, match="stride"):
            training_index(all_valid_region(), stride=0)

    def test_count_in_rect(self):
        centers = np.array([[1, 1], [4, 4], [5, 5]])
        assert count_in_rect(centers, (0, 0, 5, 5)) == 2
        assert count_in_rect(np.empty((0, 2)), (0, 0, 5, 5)) == 0


class TestPatchGather:
    def test_patch_depth_limited(self):
        r = all_valid_region(d=9)
        with pytest.raises(ValueError, match="depth"):
            gather_patches(r.sv, np.array([[5, 5]]), (3, 3, 11),
                           normalize=False)

    def test_center_value_preserved(self):
        r = all_valid_region(d=9)
        r.sv.data[6, 7, :] = np.arange(9) * 1000.0
        x = gather_patches(r.sv, np.array([[7, 6]]), (3, 3, 5),
                           normalize=False)
        # central channel offset: (9 - 5) // 2 = 2
        patch = x.reshape(3, 3, 5)
        np.testing.assert_allclose(patch[1, 1], [2000.0, 3000.0, 4000.0,
                                                 5000.0, 6000.0])

    def test_extract_training_set_order_is_seeded(self):
        r = all_valid_region()
        a = [(x.sum(), y) for x, y in
             extract_training_set(r, patch=(3, 3, 5), seed=4)]
        b = [(x.sum(), y) for x, y in
             extract_training_set(r, patch=(3, 3, 5), seed=4)]
        c = [(x.sum(), y) for x, y in
             extract_training_set(r, patch=(3, 3, 5), seed=5)]
        assert a == b
        assert a != c


class TestFolds:
    def test_leave_one_out_structure(self):
        regions = [all_valid_region(rid=f"r{i}", rect=(i * 3, 0, i * 3 + 3, 20))
                   for i in range(8)]
        plan = make_folds(regions)
        assert plan.k == 8
        held = [f[1].id for f in plan.folds]
        assert held == [r.id for r in regions]
        for train_regions, holdout in plan.folds:
            assert len(train_regions) == 7
            assert holdout.id not in {r.id for r in train_regions}

    def test_two_regions_minimum(self):
        with pytest.raises(ValueError, match=">= 2"):
            make_folds([all_valid_region()])

    def test_duplicate_ids_rejected(self):
        a = all_valid_region(rid="dup", rect=(0, 0, 10, 20))
        b = all_valid_region(rid="dup", rect=(10, 0, 20, 20))
        with pytest.raises(ValueError, match="duplicate"):
            make_folds([a, b])

    def test_overlapping_rects_rejected(self):
        sv, labels = synth_surface_volume()
        a = Region(id="a", sv=sv, labels=labels, rect=(0, 0, 40, 40))
        b = Region(id="b", sv=sv, labels=labels, rect=(30, 0, 64, 40))
        with pytest.raises(ValueError, match="overlap"):
            make_folds([a, b])


class TestRegionValidation:
    def test_labels_must_match_raster(self):
        sv, _ = synth_surface_volume(h=20, w=20, d=5)
        bad = LabelImage(ink=np.zeros((10, 10), bool),
                         region=np.ones((10, 10), bool))
        with pytest.raises(ValueError, match="match"):
            Region(id="r", sv=sv, labels=bad, rect=(0, 0, 10, 10))

    def test_rect_must_fit(self):
        with pytest.raises(ValueError, match="rect"):
            all_valid_region(rect=(0, 0, 31, 20))


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [
        {"learning_rate": -0.1},
        {"batch_size": 1},
        {"batch_size": 33},               # odd with balance
        {"total_batches": 0},
        {"eval_every": 0},
    ])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_odd_batch_ok_without_balance(self):
        assert TrainConfig(batch_size=33, balance=False).batch_size == 33


class TestTraining:
    def test_separable_set_learned(self, labeled_halves):
        left, right = labeled_halves
        cfg = TrainConfig(learning_rate=0.01, batch_size=32,
                          total_batches=1500, seed=3, eval_every=300)
        params, trace = train([left], cfg, patch=(5, 5, 9), hidden=(16, 8),
                              holdout=right)
        pred = predict_image(params, right)
        m = pred.mask
        acc = ((pred.prob[m] >= 0.5) == right.labels.ink[m]).mean()
        assert acc >= 0.95
        assert trace[-1]["batch"] == 1500
        assert trace[-1]["holdout_bce"] < 0.2
        assert trace[-1]["loss"] < trace[0]["loss"]

    def test_training_is_deterministic(self, labeled_halves):
        left, _ = labeled_halves
        cfg = TrainConfig(total_batches=60, batch_size=16, seed=9,
                          eval_every=20)
        p1, t1 = train([left], cfg, patch=(3, 3, 5), hidden=(8,))
        p2, t2 = train([left], cfg, patch=(3, 3, 5), hidden=(8,))
        for a, b in zip(p1.weights, p2.weights):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(p1.biases, p2.biases):
            np.testing.assert_array_equal(a, b)
        assert t1 == t2

    def test_zero_learning_rate_freezes_weights(self, labeled_halves):
        left, _ = labeled_halves
        short = train([left], TrainConfig(learning_rate=0.0, total_batches=2,
                                          batch_size=16, seed=9),
                      patch=(3, 3, 5), hidden=(8,))[0]
        long = train([left], TrainConfig(learning_rate=0.0, total_batches=50,
                                         batch_size=16, seed=9),
                     patch=(3, 3, 5), hidden=(8,))[0]
        for a, b in zip(short.weights, long.weights):
            np.testing.assert_array_equal(a, b)

    def test_balance_needs_both_classes(self):
        r = all_valid_region(ink=np.zeros((20, 30), dtype=bool))
        with pytest.raises(ValueError, match="both classes"):
            train([r], TrainConfig(total_batches=2, batch_size=8))

    def test_unbalanced_training_allowed(self):
        r = all_valid_region(ink=np.zeros((20, 30), dtype=bool))
        params, _ = train([r], TrainConfig(total_batches=5, batch_size=8,
                                           balance=False),
                          patch=(3, 3, 5), hidden=(8,))
        # all-clear labels push predictions toward zero
        assert forward(params, np.zeros(45)) < 0.5

    def test_divergence_carries_trace(self, labeled_halves):
        left, _ = labeled_halves
        cfg = TrainConfig(learning_rate=1e3, batch_size=32,
                          total_batches=400, seed=2, eval_every=1)
        with np.errstate(all="ignore"):
            with pytest.raises(TrainingDiverged) as err:
                train([left], cfg, patch=(5, 5, 9), hidden=(16, 8))
        assert isinstance(err.value.trace, list)
        assert len(err.value.trace) >= 1
        assert all("loss" in row for row in err.value.trace)

    def test_fold_hygiene_violation_raises(self):
        sv, labels = synth_surface_volume()
        h, w = labels.ink.shape
        whole = Region(id="all", sv=sv, labels=labels, rect=(0, 0, w, h))
        holdout = Region(id="hold", sv=sv, labels=labels,
                         rect=(10, 5, 20, 15))
        with pytest.raises(ValueError, match="fold hygiene violated"):
            train([whole], TrainConfig(total_batches=1, batch_size=8),
                  patch=(3, 3, 5), holdout=holdout)

    def test_disjoint_regions_pass_hygiene(self, labeled_halves):
        left, right = labeled_halves
        params, _ = train([left], TrainConfig(total_batches=3, batch_size=8),
                          patch=(3, 3, 5), hidden=(8,), holdout=right)
        assert params is not None


@pytest.fixture(scope="module")
def trained():
    sv, labels = synth_surface_volume()
    h, w = labels.ink.shape
    left = Region(id="left", sv=sv, labels=labels, rect=(0, 0, w // 2, h))
    right = Region(id="right", sv=sv, labels=labels, rect=(w // 2, 0, w, h))
    cfg = TrainConfig(learning_rate=0.01, batch_size=32,
                      total_batches=1200, seed=3, eval_every=400)
    params, _ = train([left], cfg, patch=(5, 5, 9), hidden=(16, 8))
    return params, right


class TestPredictImage:
    def test_outside_rect_is_zero(self, trained):
        params, right = trained
        pred = predict_image(params, right)
        assert not pred.mask[:, :right.rect[0]].any()
        assert np.all(pred.prob[~pred.mask] == 0.0)
        assert pred.prob[pred.mask].max() > 0.5

    def test_stride_blend_agrees_on_lattice(self, trained):
        params, right = trained
        p1 = predict_image(params, right, stride=1)
        p2 = predict_image(params, right, stride=2)
        u0, v0, u1, v1 = right.rect
        np.testing.assert_allclose(p2.prob[v0:v1:2, u0:u1:2],
                                   p1.prob[v0:v1:2, u0:u1:2], atol=1e-12)
        m = p1.mask
        agree = ((p2.prob[m] >= 0.5) == (p1.prob[m] >= 0.5)).mean()
        assert agree >= 0.9
        assert np.abs(p2.prob[m] - p1.prob[m]).mean() < 0.15

    def test_thread_count_does_not_change_bytes(self, trained):
        params, right = trained
        one = predict_image(params, right, threads=1)
        three = predict_image(params, right, threads=3)
        np.testing.assert_array_equal(one.prob, three.prob)
        np.testing.assert_array_equal(one.mask, three.mask)

    def test_stride_must_be_positive(self, trained):
        params, right = trained
        with pytest.raises(ValueError, match="stride"):
            predict_image(params, right, stride=0)


class TestParamsIO:
    def test_round_trip(self, tmp_path):
        params = init_params((7, 9, 5), hidden=(10, 4), seed=6,
                             normalization=False)
        save_params(params, tmp_path / "m.bin")
        back = load_params(tmp_path / "m.bin")
        assert back.layer_sizes == params.layer_sizes
        assert back.input_shape == params.input_shape
        assert back.normalization is False
        for a, b in zip(params.weights, back.weights):
            np.testing.assert_array_equal(a.astype(np.float32), b)

    def test_trailing_bytes_rejected(self, tmp_path):
        params = init_params((3, 3, 3), hidden=(4,))
        save_params(params, tmp_path / "m.bin")
        with open(tmp_path / "m.bin", "ab") as fh:
            fh.write(b"xx")
        with pytest.raises(ValueError, match="trailing"):
            load_params(tmp_path / "m.bin")

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "m.bin").write_bytes(b"NOTMAGIC" + b"\0" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_params(tmp_path / "m.bin")


class TestPredictionIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        mask = rng.uniform(size=(15, 18)) < 0.7
        prob = np.where(mask, rng.uniform(size=(15, 18)), 0.0)
        save_prediction(PredictionImage(prob=prob, mask=mask),
                        tmp_path / "pred")
        back = load_prediction(tmp_path / "pred")
        np.testing.assert_array_equal(back.mask, mask)
        np.testing.assert_allclose(back.prob, prob, atol=0.51 / 65535.0)

    def test_dims_must_match(self):
        with pytest.raises(ValueError, match="dims"):
            PredictionImage(prob=np.zeros((2, 2)), mask=np.ones((2, 3), bool))


class TestLossTraceIO:
    def test_round_trip(self, tmp_path):
        trace = [{"batch": 200, "loss": 0.53,
                  "holdout_bce": 0.61, "holdout_dice": 0.40},
                 {"batch": 400, "loss": 0.22}]
        write_loss_trace(tmp_path / "t.csv", trace)
        back = read_loss_trace(tmp_path / "t.csv")
        assert back[0]["batch"] == 200
        assert back[0]["holdout_dice"] == pytest.approx(0.40)
        assert back[1] == {"batch": 400, "loss": pytest.approx(0.22)}
