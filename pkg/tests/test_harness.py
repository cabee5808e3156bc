import math

import numpy as np
import pytest

from piave import autodiff as ad
from piave import dsp, harness
from piave.autodiff import Tensor
from piave.errors import ConfigError, DimensionError, TrainingDivergedError
from piave.harness import (
    Adam,
    PlateauSchedule,
    TrainConfig,
    aggregate_views,
    clip_gradients,
    si_sdr_loss,
)
from piave.model import ExtractionModel, ModelConfig

SMALL = ModelConfig(
    enc_kernel=16,
    enc_stride=8,
    enc_filters=16,
    bottleneck=8,
    conv_channels=16,
    blocks_per_repeat=2,
    visual_dim=8,
)


def run_schedule(history, **kwargs):
    sched = PlateauSchedule(1e-3, **kwargs)
    out = []
    for v in history:
        out.append(sched.update(v))
    return sched, out


class TestPlateauSchedule:
    def test_halve_after_three_consecutive(self):
        sched, decisions = run_schedule([10.0, 9.8, 9.7, 9.6])
        assert [d["halved"] for d in decisions] == [False, False, False, True]
        assert sched.lr == 5e-4

    def test_stop_after_six_consecutive(self):
        sched, decisions = run_schedule([10.0, 9.9, 9.8, 9.7, 9.6, 9.5, 9.4])
        assert [d["stop"] for d in decisions] == [False] * 6 + [True]
        # halved at the 3rd and 6th non-improvement, stop not reset in between
        assert sched.lr == 1e-3 / 4

    def test_improvement_resets_both_counters(self):
        _, decisions = run_schedule([10.0, 9.9, 9.8, 10.5, 10.4, 10.3, 10.2, 10.1])
        assert not any(d["halved"] for d in decisions[:6])
        assert decisions[6]["halved"]  # 3 consecutive after the reset
        assert not any(d["stop"] for d in decisions)

    def test_lr_is_exactly_halved_powers(self):
        sched, _ = run_schedule([10.0] + [9.0] * 9)
        assert sched.lr == 1e-3 / 2**sched.n_halvings
        assert sched.n_halvings == 3

    def test_tie_counts_as_non_improvement(self):
        _, decisions = run_schedule([10.0, 10.0, 10.0, 10.0])
        assert decisions[-1]["halved"]

    def test_tiny_improvement_counts(self):
        _, decisions = run_schedule([10.0, 10.001, 10.002, 10.003])
        assert not any(d["halved"] for d in decisions)


class TestClipping:
    def test_large_gradient_scaled_to_bound(self):
        rng = np.random.default_rng(0)
        params = {
            "a": Tensor(np.zeros(10), requires_grad=True),
            "b": Tensor(np.zeros((3, 3)), requires_grad=True),
        }
        params["a"].grad = rng.standard_normal(10) * 100
        params["b"].grad = rng.standard_normal((3, 3)) * 100
        pre = clip_gradients(params, 5.0)
        assert pre > 5.0
        post = math.sqrt(sum(float((p.grad**2).sum()) for p in params.values()))
        assert post <= 5.0 + 1e-6

    def test_small_gradient_untouched(self):
        params = {"a": Tensor(np.zeros(4), requires_grad=True)}
        params["a"].grad = np.full(4, 0.1)
        clip_gradients(params, 5.0)
        np.testing.assert_array_equal(params["a"].grad, np.full(4, 0.1))


class TestAdam:
    def test_minimizes_quadratic(self):
        target = np.array([1.0, -2.0, 0.5])
        w = Tensor(np.zeros(3), requires_grad=True)
        opt = Adam({"w": w}, lr=0.05)
        for _ in range(400):
            opt.zero_grad()
            loss = ad.tsum(ad.square(w - Tensor(target)))
            ad.backward(loss)
            opt.step()
        np.testing.assert_allclose(w.data, target, atol=1e-3)


class TestSiSdrLoss:
    def test_matches_metric(self):
        rng = np.random.default_rng(1)
        est = rng.standard_normal((3, 500))
        ref = rng.standard_normal((3, 500))
        loss = si_sdr_loss(Tensor(est), Tensor(ref)).item()
        direct = -np.mean([dsp.si_sdr_db(est[i], ref[i]) for i in range(3)])
        assert abs(loss - direct) < 1e-9

    def test_gradient_flows(self):
        rng = np.random.default_rng(2)
        est = Tensor(rng.standard_normal((2, 100)), requires_grad=True)
        loss = si_sdr_loss(est, Tensor(rng.standard_normal((2, 100))))
        ad.backward(loss)
        assert est.grad is not None and np.isfinite(est.grad).all()


PAPER_TABLE_ROWS = {
    # per-view SDR -> (printed Avg(7), printed Avg(6))
    "wo_pf": (
        {"front": 9.712, "top": 5.641, "down": 5.698, "left30": 4.888,
         "left60": 1.875, "right30": 7.226, "right60": 4.532},
        (5.653, 4.977),
    ),
    "mask_lip": (
        {"front": 10.277, "top": 7.078, "down": 5.301, "left30": 5.328,
         "left60": 5.804, "right30": 5.277, "right60": 5.107},
        (6.310, 5.649),
    ),
    "mask_upper": (
        {"front": 9.974, "top": 6.615, "down": 6.718, "left30": 8.102,
         "left60": 5.951, "right30": 8.170, "right60": 6.142},
        (7.382, 6.950),
    ),
    "full": (
        {"front": 11.773, "top": 8.923, "down": 8.514, "left30": 8.583,
         "left60": 6.118, "right30": 8.387, "right60": 4.935},
        (8.176, 7.577),
    ),
}


class TestAggregateViews:
    @pytest.mark.parametrize("row", sorted(PAPER_TABLE_ROWS))
    def test_published_rows(self, row):
        per_view, (avg7, avg6) = PAPER_TABLE_ROWS[row]
        got7, got6 = aggregate_views(per_view)
        assert abs(got7 - avg7) < 0.0005
        assert abs(got6 - avg6) < 0.0005

    def test_constant_views(self):
        per_view = {v: 3.25 for v in PAPER_TABLE_ROWS["full"][0]}
        assert aggregate_views(per_view) == (3.25, 3.25)

    def test_missing_view_rejected(self):
        per_view = dict(PAPER_TABLE_ROWS["full"][0])
        del per_view["top"]
        with pytest.raises(DimensionError):
            aggregate_views(per_view)


class TestTraining:
    def test_training_improves_validation(self, micro_corpus):
        model = ExtractionModel(SMALL, seed=0)
        cfg = TrainConfig(max_epochs=3, batch_size=8, seed=0)
        model, history = harness.train(model, micro_corpus, cfg)
        assert len(history) == 3
        assert history[-1]["val_si_sdr"] > history[0]["val_si_sdr"] - 1e-9
        assert all(math.isfinite(h["train_loss"]) for h in history)

    def test_reproducible_history(self, micro_corpus):
        cfg = TrainConfig(max_epochs=2, batch_size=8, seed=3)
        _, h1 = harness.train(ExtractionModel(SMALL, seed=1), micro_corpus, cfg)
        _, h2 = harness.train(ExtractionModel(SMALL, seed=1), micro_corpus, cfg)
        assert h1 == h2

    def test_nan_parameters_abort(self, micro_corpus):
        model = ExtractionModel(SMALL, seed=0)
        model.params["enc.w"].data[:] = np.nan
        with pytest.raises(TrainingDivergedError):
            harness.train(model, micro_corpus, TrainConfig(max_epochs=1, batch_size=8))

    def test_clip_norm_holds_every_step(self, micro_corpus, monkeypatch):
        norms = []
        original = harness.clip_gradients

        def spy(params, max_norm):
            pre = original(params, max_norm)
            post = math.sqrt(
                sum(float((p.grad.astype(np.float64) ** 2).sum())
                    for p in params.values() if p.grad is not None)
            )
            norms.append(post)
            return pre

        monkeypatch.setattr(harness, "clip_gradients", spy)
        model = ExtractionModel(SMALL, seed=2)
        harness.train(model, micro_corpus, TrainConfig(max_epochs=1, batch_size=8))
        assert norms and all(n <= 5.0 + 1e-6 for n in norms)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(patience_halve=6, patience_stop=3).validate()
        with pytest.raises(ConfigError):
            TrainConfig(clip_norm=0.0).validate()


class TestEvaluate:
    @pytest.fixture(scope="class")
    def trained(self, micro_corpus):
        model = ExtractionModel(SMALL, seed=0)
        model, _ = harness.train(
            model, micro_corpus, TrainConfig(max_epochs=2, batch_size=8, seed=0)
        )
        return model

    def test_single_view_report(self, trained, micro_corpus):
        rep = harness.evaluate(trained, micro_corpus, "test", "front")
        assert set(rep.per_view) == {"front"}
        front = rep.per_view["front"]
        assert len(front["items"]) == len(micro_corpus.items("test"))
        assert math.isfinite(front["si_sdr"])
        assert rep.avg7 is None

    def test_all_views_report(self, trained, micro_corpus):
        rep = harness.evaluate(trained, micro_corpus, "test", "all")
        assert len(rep.per_view) == 7
        assert math.isfinite(rep.avg7) and math.isfinite(rep.avg6)
        doc = rep.to_json_dict()
        assert doc["config_fingerprint"] == trained.config.fingerprint()

    def test_unknown_view_rejected(self, trained, micro_corpus):
        from piave.errors import ParameterError

        with pytest.raises(ParameterError):
            harness.evaluate(trained, micro_corpus, "test", "sideways")

    def test_empty_split_rejected(self, trained, micro_corpus):
        saved = micro_corpus._by_split["test"]
        micro_corpus._by_split["test"] = []
        try:
            with pytest.raises(ConfigError):
                harness.evaluate(trained, micro_corpus, "test", "front")
        finally:
            micro_corpus._by_split["test"] = saved

    def test_missing_file_listed_as_failure(self, trained, micro_corpus, tmp_path):
        import shutil

        clone = tmp_path / "broken"
        shutil.copytree(micro_corpus.root, clone)
        from piave import data as data_mod

        broken = data_mod.Corpus(clone)
        victim = broken.items("test")[0]
        (clone / victim["dir"] / "mix.wav").unlink()
        rep = harness.evaluate(trained, broken, "test", "front")
        assert any(f["id"] == victim["id"] for f in rep.failures)
        assert len(rep.per_view["front"]["items"]) == len(broken.items("test")) - 1

    def test_reference_oracle_metrics(self, micro_corpus):
        item = micro_corpus.load_item(micro_corpus.items("test")[0])
        target = item["target"]
        assert dsp.si_sdr(target, target).value == math.inf
        assert abs(dsp.stoi(target, target).value - 1.0) < 1e-9


class TestAblation:
    def test_variant_setup(self):
        cfg, region = harness._variant_setup("wo_pf", SMALL)
        assert not cfg.use_pose_invariant and region == "none"
        cfg, region = harness._variant_setup("mask_lip", SMALL)
        assert cfg.use_pose_invariant and region == "lip"
        with pytest.raises(ConfigError):
            harness._variant_setup("half", SMALL)

    def test_report_shape_and_instrumentation(self, micro_corpus):
        report = harness.run_ablation(
            micro_corpus,
            SMALL,
            TrainConfig(max_epochs=1, batch_size=8),
            variants=("full", "wo_pf"),
            seeds=(0,),
        )
        assert set(report["variants"]) == {"full", "wo_pf"}
        run = report["variants"]["wo_pf"]["seeds"]["0"]
        assert len(run["per_view_sdr"]) == 7
        assert "deltas_vs_full" in report

    def test_needs_a_seed(self, micro_corpus):
        with pytest.raises(ConfigError):
            harness.run_ablation(micro_corpus, SMALL, TrainConfig(), seeds=())
