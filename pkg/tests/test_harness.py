import csv

import numpy as np
import pytest

from comatch.data import Corpus, DataConfig, Scene, eval_corpus, gen_corpus, read_pgm
from comatch.errors import DataError, NumericAbort, ParameterError
from comatch.harness import (THRESHOLDS, TrainConfig, ablate, confusion, emit_masks,
                             eval_partners, eval_seed_miou, lr_schedule, miou, seed_prediction,
                             sweep, train, upsample)
from comatch.network import ModelParams, load_checkpoint
from comatch.tensor_core import rng_stream

TINY_DATA = DataConfig(scenes=12, eval_scenes=6)
TINY = TrainConfig(max_iters=4, batch_pairs=2)


@pytest.fixture(scope="module")
def tiny():
    return gen_corpus(TINY_DATA), eval_corpus(TINY_DATA)


class TestSchedule:
    def test_start(self):
        assert lr_schedule(0, TrainConfig()) == 0.1

    def test_half_way(self):
        assert lr_schedule(1000, TrainConfig()) == pytest.approx(0.1 * 0.5 ** 0.9)
        assert lr_schedule(1000, TrainConfig()) == pytest.approx(0.05359, abs=1e-5)

    def test_tends_to_zero(self):
        assert lr_schedule(1999, TrainConfig()) < 1e-3

    def test_strictly_decreasing(self):
        cfg = TrainConfig(max_iters=50)
        lrs = [lr_schedule(i, cfg) for i in range(50)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            lr_schedule(2000, TrainConfig())
        with pytest.raises(ParameterError):
            lr_schedule(-1, TrainConfig())

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            TrainConfig(lr_init=0.0)
        with pytest.raises(ParameterError):
            TrainConfig(rho=1.5)
        with pytest.raises(ParameterError):
            TrainConfig(metric="l1")


class TestMiou:
    def test_identical(self):
        gt = rng_stream(0, 40).integers(0, 3, (6, 6))
        assert miou([gt], [gt], 2) == 1.0

    def test_all_background_on_half_covered_scene(self):
        gt = np.zeros((4, 4), dtype=int)
        gt[:, :2] = 1
        # background: TP 8, FP 8, FN 0 -> 1/2; class 1: TP 0 -> 0
        assert miou([np.zeros((4, 4), dtype=int)], [gt], 1) == 0.25

    def test_hand_confusion(self):
        gt = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [0, 2, 2, 2], [0, 0, 0, 0]])
        pred = np.array([[0, 1, 1, 1], [0, 0, 1, 0], [0, 2, 2, 0], [0, 0, 0, 0]])
        conf = confusion(pred, gt, 3)
        assert conf[0, 0] == 8 and conf[0, 1] == 1 and conf[1, 0] == 1 and conf[2, 0] == 1
        bg, c1, c2 = 8 / 11, 3 / 5, 2 / 3
        assert miou([pred], [gt], 2) == pytest.approx((bg + c1 + c2) / 3)

    def test_absent_class_skipped(self):
        gt = np.array([[0, 1], [1, 0]])
        pred = np.array([[0, 1], [3, 0]])
        # class 3 never in ground truth: only its false positive counts (against class 1)
        assert miou([pred], [gt], 3) == pytest.approx((1.0 + 0.5) / 2)

    def test_order_invariant(self):
        rng = rng_stream(1, 40)
        gts = [rng.integers(0, 3, (5, 5)) for _ in range(4)]
        preds = [rng.integers(0, 3, (5, 5)) for _ in range(4)]
        assert miou(preds, gts, 2) == miou(preds[::-1], gts[::-1], 2)

    def test_in_unit_interval(self):
        rng = rng_stream(2, 40)
        v = miou([rng.integers(0, 4, (8, 8))], [rng.integers(0, 4, (8, 8))], 3)
        assert 0.0 <= v < 1.0


class TestSeeds:
    def test_strongest_labelled_class_wins(self):
        a = np.array([[0.9, 0.2], [0.5, 0.0]])
        b = np.array([[0.4, 0.6], [0.7, 0.1]])
        pred = seed_prediction([a, None, b], 0.3)
        np.testing.assert_array_equal(pred, [[1, 3], [3, 0]])

    def test_no_labels(self):
        with pytest.raises(DataError):
            seed_prediction([None, None], 0.3)

    def test_upsample_half_pixel(self):
        out = upsample(np.array([[0.0, 1.0]]), 1, 4)
        np.testing.assert_allclose(out, [[0.0, 0.25, 0.75, 1.0]])

    def test_upsample_constant(self):
        np.testing.assert_allclose(upsample(np.full((8, 8), 0.3), 32, 32), 0.3)

    def test_eval_partners_order_free(self, tiny):
        _, ev = tiny
        partners = eval_partners(ev)
        rev = Corpus(ev.scenes[::-1], ev.n_classes)
        rpartners = eval_partners(rev)
        n = len(ev)
        for i, j in enumerate(partners):
            k = rpartners[n - 1 - i]
            assert (j is None and k is None) or n - 1 - k == j
            if j is not None:
                assert np.any(ev.scenes[i].labels & ev.scenes[j].labels)


class TestTrain:
    def test_zero_iterations_returns_init(self, tiny):
        params, report = train(tiny[0], TINY.replace(max_iters=0))
        init = ModelParams.init(rng_stream(0, 0), c=32, n_classes=4)
        for name, arr in init.tensors().items():
            np.testing.assert_array_equal(params.tensors()[name], arr)
        assert report.losses == []

    def test_deterministic(self, tiny, tmp_path):
        _, r1 = train(tiny[0], TINY, checkpoint_path=tmp_path / "a.ckpt")
        _, r2 = train(tiny[0], TINY, checkpoint_path=tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert r1.to_json() == r2.to_json()

    def test_checkpoint_meta(self, tiny, tmp_path):
        train(tiny[0], TINY.replace(k=6, alpha=1.8), checkpoint_path=tmp_path / "m.ckpt")
        _, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert meta["k"] == 6 and meta["alpha"] == 1.8

    def test_overfit_two_scenes(self):
        scenes = gen_corpus(DataConfig(scenes=12)).scenes
        a = scenes[0]
        b = next(s for s in scenes[1:] if np.any(s.labels & a.labels))
        corpus = Corpus([a, b], 4)
        _, report = train(corpus, TrainConfig(max_iters=200, batch_pairs=1,
                                              use_inter=False, use_intra=False))
        assert np.mean(report.losses[-20:]) < np.mean(report.losses[:20])

    def test_divergence_aborts(self, tiny):
        with pytest.raises(NumericAbort) as info:
            with np.errstate(all="ignore"):
                train(tiny[0], TINY.replace(lr_init=1e200, max_iters=20))
        assert info.value.report is not None
        assert "non-finite" in str(info.value)


class TestEvaluate:
    def test_scores_per_threshold(self, tiny):
        params, _ = train(tiny[0], TINY)
        scores, best = eval_seed_miou(params, tiny[1], TINY)
        assert set(scores) == set(THRESHOLDS)
        assert scores[best] == max(scores.values())
        assert all(0.0 <= v <= 1.0 for v in scores.values())

    def test_no_masks(self, tiny):
        ev = Corpus([Scene(s.image, s.mask, s.labels, s.name, False) for s in tiny[1].scenes], 4)
        params = ModelParams.init(rng_stream(0, 0))
        with pytest.raises(DataError):
            eval_seed_miou(params, ev, TINY)

    def test_emit_masks(self, tiny, tmp_path):
        ev = Corpus(tiny[1].scenes[:1], 4)
        params = ModelParams.init(rng_stream(0, 0))
        params.head_w[:] = rng_stream(1, 0).standard_normal(params.head_w.shape)
        files = emit_masks(params, ev, TINY, tmp_path)
        assert len(files) == 5
        seed = read_pgm(files[0])
        assert set(np.unique(seed)) <= {0, 32, 64, 96, 128}
        labels = np.unique(seed // 32)
        assert all(ev.scenes[0].labels[c - 1] for c in labels if c)

    def test_zero_cam_is_black(self, tiny, tmp_path):
        ev = Corpus(tiny[1].scenes[:1], 4)
        files = emit_masks(ModelParams.init(rng_stream(0, 0)), ev, TINY, tmp_path)
        for f in files[1:]:
            assert not read_pgm(f).any()


class TestExperiments:
    def test_ablation_rows(self, tiny, tmp_path):
        rows = ablate(tiny[0], tiny[1], TINY.replace(max_iters=2), tmp_path)
        assert [r["variant"] for r in rows] == ["baseline", "inter", "intra", "both"]
        with open(tmp_path / "ablation.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 4
        assert (tmp_path / "both.ckpt").exists()

    def test_sweep_alpha_grid(self, tiny):
        rows = sweep(tiny[0], tiny[1], TINY.replace(max_iters=1), "alpha", [1.2, 1.5, 1.8, 2.0])
        assert [r["value"] for r in rows] == [1.2, 1.5, 1.8, 2.0]

    def test_sweep_group_records_time(self, tiny, tmp_path):
        rows = sweep(tiny[0], tiny[1], TINY.replace(max_iters=1), "group_n", [2, 3],
                     tmp_path, time_trials=1)
        assert all(r["match_seconds"] > 0 for r in rows)
        assert (tmp_path / "sweep_group_n.csv").exists()

    def test_sweep_rejects(self, tiny):
        with pytest.raises(ParameterError):
            sweep(tiny[0], tiny[1], TINY, "lr_init", [0.1])
        with pytest.raises(ParameterError):
            sweep(tiny[0], tiny[1], TINY, "k", [])
