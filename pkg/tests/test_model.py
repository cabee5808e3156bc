import numpy as np
import pytest

from piave import autodiff as ad
from piave.autodiff import Tensor
from piave.dsp import Waveform
from piave.errors import ConfigError, DimensionError, ParameterError
from piave.model import (
    ExtractionModel,
    ModelConfig,
    VisualStreamPair,
    apply_region_mask,
    region_channel_slice,
)

TINY = ModelConfig(
    enc_kernel=16,
    enc_stride=8,
    enc_filters=8,
    bottleneck=6,
    conv_channels=8,
    blocks_per_repeat=2,
    visual_dim=4,
    visual_in_dim=16,
)


def tiny_model(seed=0, **overrides):
    cfg = ModelConfig(**{**TINY.to_json_dict(), **overrides})
    return ExtractionModel(cfg, seed=seed)


def rand_streams(rng, n=10, v=16):
    return VisualStreamPair(
        rng.standard_normal((n, v)).astype(np.float32),
        rng.standard_normal((n, v)).astype(np.float32),
    )


class TestEncodeAudio:
    def test_single_frame(self):
        m = tiny_model()
        out = m.encode_audio(Waveform(np.ones(16)))
        assert out.shape == (8, 1)

    def test_frame_count_formula(self):
        m = ExtractionModel(ModelConfig(), seed=0)
        out = m.encode_audio(Waveform(np.random.default_rng(0).standard_normal(8000)))
        assert out.shape == (128, 399)

    def test_zero_input_zero_output(self):
        m = tiny_model()
        out = m.encode_audio(Waveform(np.zeros(64)))
        assert np.array_equal(out, np.zeros_like(out))  # ReLU(conv(0)), zero bias

    def test_too_short_rejected(self):
        with pytest.raises(DimensionError):
            tiny_model().encode_audio(Waveform(np.ones(10)))


class TestDecodeAudio:
    def test_single_frame_length(self):
        m = tiny_model()
        out = m.decode_audio(np.ones((8, 1), dtype=np.float32))
        assert out.shape == (16,)  # kernel length

    def test_encode_decode_length(self):
        m = tiny_model()
        x = np.random.default_rng(1).standard_normal(250)
        rep = m.encode_audio(Waveform(x))
        out = m.decode_audio(rep, out_len=len(x))
        assert out.shape == (250,)

    def test_linearity(self):
        m = tiny_model()
        rng = np.random.default_rng(2)
        a = rng.standard_normal((8, 9)).astype(np.float32)
        b = rng.standard_normal((8, 9)).astype(np.float32)
        lhs = m.decode_audio(a + b)
        rhs = m.decode_audio(a) + m.decode_audio(b) - m.decode_audio(np.zeros_like(a))
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tiny_model().decode_audio(np.ones((5, 9), dtype=np.float32))


class TestEncodeVisual:
    def test_zero_original_reduces_to_pi_path(self):
        m = tiny_model()
        m.params["vis.orig.b"].data[:] = 0.0
        rng = np.random.default_rng(3)
        pi = rng.standard_normal((10, 16)).astype(np.float32)
        zeros = np.zeros_like(pi)
        out = m.encode_visual(VisualStreamPair(zeros, pi), t_frames=25)
        # by hand: fused = pi embedding alone, then adapter + upsample
        with ad.no_grad():
            fused = ad.conv1d(
                Tensor(pi.T[None]), m.params["vis.pi.w"], m.params["vis.pi.b"]
            )
            expected = ad.nearest_upsample_time(m._adapter(fused), 25).data[0]
        np.testing.assert_array_equal(out, expected)

    def test_temporal_copy_pattern(self):
        m = tiny_model()
        rng = np.random.default_rng(4)
        streams = rand_streams(rng, n=2)
        out = m.encode_visual(streams, t_frames=5)
        assert out.shape == (4, 5)
        np.testing.assert_array_equal(out[:, 0], out[:, 1])
        np.testing.assert_array_equal(out[:, 0], out[:, 2])
        np.testing.assert_array_equal(out[:, 3], out[:, 4])
        assert not np.array_equal(out[:, 0], out[:, 3])

    def test_frame_count_mismatch(self):
        with pytest.raises(DimensionError):
            VisualStreamPair(np.zeros((5, 16)), np.zeros((6, 16)))

    def test_instrumentation_counts_pi_frames(self):
        m = tiny_model()
        streams = rand_streams(np.random.default_rng(5), n=7)
        m.encode_visual(streams, t_frames=10)
        assert m.stats["pi_frames_consumed"] == 7


class TestSeparatorMask:
    def test_shape_and_range(self):
        m = tiny_model()
        rng = np.random.default_rng(6)
        a_e = np.abs(rng.standard_normal((8, 30))).astype(np.float32)
        v_e = rng.standard_normal((4, 30)).astype(np.float32)
        mask = m.separator_mask(a_e, v_e)
        assert mask.shape == a_e.shape
        assert (mask >= 0).all()

    def test_sigmoid_mask_in_unit_interval(self):
        m = tiny_model(mask_activation="sigmoid")
        rng = np.random.default_rng(7)
        mask = m.separator_mask(
            rng.standard_normal((8, 12)).astype(np.float32),
            rng.standard_normal((4, 12)).astype(np.float32),
        )
        assert ((mask >= 0) & (mask <= 1)).all()

    def test_visual_features_reach_the_mask(self):
        m = tiny_model()
        rng = np.random.default_rng(8)
        a_e = np.abs(rng.standard_normal((8, 20))).astype(np.float32)
        v_e = rng.standard_normal((4, 20)).astype(np.float32)
        base = m.separator_mask(a_e, v_e)
        bumped = v_e.copy()
        bumped[2, 11] += 1e-2
        probe = m.separator_mask(a_e, bumped)
        assert np.abs(probe - base).max() > 0  # non-zero visual Jacobian

    def test_frame_count_mismatch(self):
        m = tiny_model()
        with pytest.raises(DimensionError):
            m.separator_mask(np.zeros((8, 10)), np.zeros((4, 11)))


class TestExtract:
    def test_output_length_matches_input(self):
        m = tiny_model()
        rng = np.random.default_rng(9)
        x = Waveform(rng.standard_normal(333) * 0.1)
        est = m.extract(x, rand_streams(rng))
        assert len(est) == 333 and est.sample_rate == x.sample_rate

    def test_forced_zero_mask_gives_silence(self):
        m = tiny_model()
        m.params["sep.mask.w"].data[:] = 0.0
        m.params["sep.mask.b"].data[:] = -1.0  # ReLU(-1) == 0 everywhere
        rng = np.random.default_rng(10)
        est = m.extract(Waveform(rng.standard_normal(200) * 0.1), rand_streams(rng))
        np.testing.assert_array_equal(est.samples, np.zeros(200))

    def test_sample_rate_mismatch(self):
        m = tiny_model()
        with pytest.raises(DimensionError):
            m.extract(Waveform(np.ones(100), 16000), rand_streams(np.random.default_rng(0)))

    def test_deterministic_forward(self):
        rng = np.random.default_rng(11)
        x = Waveform(rng.standard_normal(240) * 0.1)
        streams = rand_streams(rng)
        a = tiny_model(seed=5).extract(x, streams)
        b = tiny_model(seed=5).extract(x, streams)
        assert np.array_equal(a.samples, b.samples)


class TestRegionMask:
    def test_none_is_identity(self):
        streams = rand_streams(np.random.default_rng(12))
        out = apply_region_mask(streams, "none")
        np.testing.assert_array_equal(out.pose_invariant, streams.pose_invariant)

    def test_lip_zeroes_first_half_only(self):
        streams = rand_streams(np.random.default_rng(13))
        out = apply_region_mask(streams, "lip")
        assert np.array_equal(out.pose_invariant[:, :8], np.zeros((10, 8)))
        np.testing.assert_array_equal(out.pose_invariant[:, 8:], streams.pose_invariant[:, 8:])
        np.testing.assert_array_equal(out.original, streams.original)

    def test_lip_then_upper_zeroes_everything(self):
        streams = rand_streams(np.random.default_rng(14))
        out = apply_region_mask(apply_region_mask(streams, "lip"), "upper")
        assert np.array_equal(out.pose_invariant, np.zeros((10, 16)))

    def test_odd_feature_dim_rejected(self):
        with pytest.raises(ConfigError):
            region_channel_slice("lip", 15)

    def test_unknown_region_rejected(self):
        with pytest.raises(ParameterError):
            region_channel_slice("nose", 16)


class TestStreamAblationConsistency:
    def test_wo_pf_is_bit_identical_to_zeroed_stream(self):
        full = tiny_model(seed=3)
        full.params["vis.pi.b"].data[:] = 0.0
        wo = tiny_model(seed=4, use_pose_invariant=False)
        shared = {k: v.data for k, v in full.params.items() if not k.startswith("vis.pi")}
        wo.load_parameter_arrays(shared)

        rng = np.random.default_rng(15)
        x = Waveform(rng.standard_normal(300) * 0.1)
        orig = rng.standard_normal((8, 16)).astype(np.float32)
        zero_pi = np.zeros_like(orig)
        est_full = full.extract(x, VisualStreamPair(orig, zero_pi))
        est_wo = wo.extract(x, VisualStreamPair(orig, zero_pi))
        assert np.array_equal(est_full.samples, est_wo.samples)
        assert wo.stats["pi_frames_consumed"] == 0


class TestEndToEndGradient:
    def test_extract_loss_gradient_matches_fd(self):
        from piave.harness import si_sdr_loss

        cfg = ModelConfig(**{**TINY.to_json_dict(), "enc_kernel": 16, "enc_stride": 8})
        model = ExtractionModel(cfg, seed=1, dtype=np.float64)
        rng = np.random.default_rng(16)
        mix = rng.standard_normal((1, 1, 168)) * 0.2  # T = 20 frames
        orig = rng.standard_normal((1, 16, 5))
        pi = rng.standard_normal((1, 16, 5))
        target = rng.standard_normal((1, 168)) * 0.2

        def loss_fn():
            est = model.extract_graph(Tensor(mix), Tensor(orig), Tensor(pi))
            return si_sdr_loss(ad.reshape(est, (1, 168)), Tensor(target))

        loss = loss_fn()
        ad.backward(loss)
        analytic = {k: p.grad.copy() for k, p in model.params.items() if p.grad is not None}

        h = 1e-5
        worst = 0.0
        check_rng = np.random.default_rng(17)
        names = sorted(analytic)
        for _ in range(25):
            name = names[check_rng.integers(len(names))]
            p = model.params[name]
            idx = tuple(check_rng.integers(s) for s in p.data.shape)
            orig_val = p.data[idx]
            p.data[idx] = orig_val + h
            with ad.no_grad():
                fp = loss_fn().item()
            p.data[idx] = orig_val - h
            with ad.no_grad():
                fm = loss_fn().item()
            p.data[idx] = orig_val
            fd = (fp - fm) / (2 * h)
            rel = abs(analytic[name][idx] - fd) / max(1.0, abs(fd))
            worst = max(worst, rel)
        assert worst < 1e-3


class TestPersistence:
    def test_checkpoint_round_trip(self, tmp_path):
        m = tiny_model(seed=7)
        rng = np.random.default_rng(18)
        x = Waveform(rng.standard_normal(200) * 0.1)
        streams = rand_streams(rng)
        before = m.extract(x, streams)
        path = tmp_path / "model.bin"
        m.save(path)
        loaded = ExtractionModel.load(path)
        after = loaded.extract(x, streams)
        assert np.array_equal(before.samples, after.samples)
        assert loaded.config == m.config

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(enc_kernel=40, enc_stride=30).validate()
        with pytest.raises(ConfigError):
            ModelConfig(mask_activation="tanh").validate()
        with pytest.raises(ConfigError):
            ModelConfig(conv_kernel=4).validate()
