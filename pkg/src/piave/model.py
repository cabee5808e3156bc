"""Mask-based time-domain extraction network with a two-view visual front end.

The mixture is encoded by a strided 1D conv into a spectrum-like
representation; a TCN separator conditioned on fused visual features
estimates a nonnegative mask; the masked representation is decoded back to
audio by a transposed conv. The visual front end embeds both face streams
(original track and pose-invariant view) per frame, fuses them by addition,
runs one temporal depthwise-separable adapter block, and upsamples to the
audio frame rate by nearest neighbor.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import Waveform
from .errors import ConfigError, DimensionError, ParameterError

REGIONS = ("none", "lip", "upper")


@dataclass
class ModelConfig:
    enc_kernel: int = 40
    enc_stride: int = 20
    enc_filters: int = 128  # encoder output channels
    bottleneck: int = 64  # separator residual width
    conv_channels: int = 128  # width inside each TCN block
    conv_kernel: int = 3  # depthwise kernel length
    blocks_per_repeat: int = 4  # dilations 2^0 .. 2^(X-1)
    audio_repeats: int = 1
    fusion_repeats: int = 2
    visual_dim: int = 32  # embedding channels d
    visual_in_dim: int = 16  # raw per-frame feature channels v
    mask_activation: str = "relu"
    sample_rate: int = 8000
    fps: int = 25
    use_pose_invariant: bool = True

    def validate(self) -> None:
        if self.enc_kernel <= 0 or self.enc_stride <= 0:
            raise ConfigError("encoder kernel and stride must be positive")
        if self.enc_kernel % self.enc_stride != 0:
            raise ConfigError(
                f"enc_kernel ({self.enc_kernel}) must be a multiple of enc_stride "
                f"({self.enc_stride}) for clean overlap-add"
            )
        if self.conv_kernel % 2 != 1:
            raise ConfigError("depthwise kernel must be odd to preserve length")
        if self.mask_activation not in ("relu", "sigmoid"):
            raise ConfigError(f"unknown mask activation {self.mask_activation!r}")
        for name in ("enc_filters", "bottleneck", "conv_channels", "blocks_per_repeat",
                     "audio_repeats", "fusion_repeats", "visual_dim", "visual_in_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class VisualStreamPair:
    """Per-frame features for the original view and the pose-invariant view."""

    original: np.ndarray  # (n, v)
    pose_invariant: np.ndarray  # (n, v)
    fps: int = 25

    def __post_init__(self):
        self.original = np.asarray(self.original, dtype=np.float32)
        self.pose_invariant = np.asarray(self.pose_invariant, dtype=np.float32)
        if self.original.ndim != 2 or self.pose_invariant.shape != self.original.shape:
            raise DimensionError(
                f"streams must share (n, v) shape, got {self.original.shape} "
                f"and {self.pose_invariant.shape}"
            )

    @property
    def n_frames(self) -> int:
        return self.original.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.original.shape[1]


def region_channel_slice(region: str, v: int):
    """Channel slice zeroed by a masking region; None for region 'none'."""
    if region not in REGIONS:
        raise ParameterError(f"unknown region {region!r}, expected one of {REGIONS}")
    if region == "none":
        return None
    if v % 2 != 0:
        raise ConfigError(f"feature dim must be even to split lip/upper halves, got {v}")
    return slice(0, v // 2) if region == "lip" else slice(v // 2, v)


def apply_region_mask(streams: VisualStreamPair, region: str) -> VisualStreamPair:
    """Zero the lip or upper half of the pose-invariant stream's channels."""
    sl = region_channel_slice(region, streams.feature_dim)
    if sl is None:
        return streams
    pi = streams.pose_invariant.copy()
    pi[:, sl] = 0.0
    return VisualStreamPair(streams.original.copy(), pi, streams.fps)


class ExtractionModel:
    """Owns the parameter store and the forward graph builders.

    A model instance is exclusively owned while a gradient graph is alive;
    read-only inference may be shared across threads.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.stats = {"pi_frames_consumed": 0}
        self._init_params(seed)

    # -- parameters ---------------------------------------------------------

    def _add_conv(self, rng, name: str, out_ch: int, in_ch: int, k: int, bias: bool = True):
        bound = 1.0 / np.sqrt(in_ch * k)
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k))
        self.params[f"{name}.w"] = Tensor(w.astype(self.dtype), requires_grad=True)
        if bias:
            self.params[f"{name}.b"] = Tensor(
                np.zeros(out_ch, dtype=self.dtype), requires_grad=True
            )

    def _add_depthwise(self, rng, name: str, ch: int, k: int):
        bound = 1.0 / np.sqrt(k)
        w = rng.uniform(-bound, bound, size=(ch, k))
        self.params[f"{name}.w"] = Tensor(w.astype(self.dtype), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(ch, dtype=self.dtype), requires_grad=True)

    def _add_prelu(self, name: str, ch: int):
        self.params[name] = Tensor(np.full(ch, 0.25, dtype=self.dtype), requires_grad=True)

    def _add_norm(self, name: str, ch: int):
        self.params[f"{name}.g"] = Tensor(np.ones(ch, dtype=self.dtype), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(ch, dtype=self.dtype), requires_grad=True)

    def _add_block(self, rng, prefix: str):
        cfg = self.config
        self._add_conv(rng, f"{prefix}.in", cfg.conv_channels, cfg.bottleneck, 1)
        self._add_prelu(f"{prefix}.prelu1", cfg.conv_channels)
        self._add_norm(f"{prefix}.norm1", cfg.conv_channels)
        self._add_depthwise(rng, f"{prefix}.dw", cfg.conv_channels, cfg.conv_kernel)
        self._add_prelu(f"{prefix}.prelu2", cfg.conv_channels)
        self._add_norm(f"{prefix}.norm2", cfg.conv_channels)
        self._add_conv(rng, f"{prefix}.out", cfg.bottleneck, cfg.conv_channels, 1)

    def _init_params(self, seed: int) -> None:
        cfg = self.config
        rng = np.random.default_rng(seed)
        self._add_conv(rng, "enc", cfg.enc_filters, 1, cfg.enc_kernel)
        # transposed decoder weight is (Cin, Cout, K)
        bound = 1.0 / np.sqrt(cfg.enc_filters)
        self.params["dec.w"] = Tensor(
            rng.uniform(-bound, bound, size=(cfg.enc_filters, 1, cfg.enc_kernel)).astype(self.dtype),
            requires_grad=True,
        )
        self.params["dec.b"] = Tensor(np.zeros(1, dtype=self.dtype), requires_grad=True)

        self._add_conv(rng, "vis.orig", cfg.visual_dim, cfg.visual_in_dim, 1)
        if cfg.use_pose_invariant:
            self._add_conv(rng, "vis.pi", cfg.visual_dim, cfg.visual_in_dim, 1)
        self._add_depthwise(rng, "vis.adapter.dw", cfg.visual_dim, cfg.conv_kernel)
        self._add_conv(rng, "vis.adapter.pw", cfg.visual_dim, cfg.visual_dim, 1)
        self._add_prelu("vis.adapter.prelu", cfg.visual_dim)
        self._add_norm("vis.adapter.norm", cfg.visual_dim)

        self._add_norm("sep.norm", cfg.enc_filters)
        self._add_conv(rng, "sep.in", cfg.bottleneck, cfg.enc_filters, 1)
        for r in range(cfg.audio_repeats):
            for x in range(cfg.blocks_per_repeat):
                self._add_block(rng, f"sep.audio.r{r}.x{x}")
        self._add_conv(rng, "sep.fuse", cfg.bottleneck, cfg.bottleneck + cfg.visual_dim, 1)
        for r in range(cfg.fusion_repeats):
            for x in range(cfg.blocks_per_repeat):
                self._add_block(rng, f"sep.fusion.r{r}.x{x}")
        self._add_conv(rng, "sep.mask", cfg.enc_filters, cfg.bottleneck, 1)

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_parameter_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint is missing parameters: {sorted(missing)[:4]}...")
        for name, t in self.params.items():
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != t.data.shape:
                raise ConfigError(
                    f"parameter {name} has shape {arr.shape}, expected {t.data.shape}"
                )
            t.data = arr.copy()
            t.grad = None

    # -- graph builders (batched Tensors) ------------------------------------

    def encode_audio_graph(self, mix: Tensor) -> Tensor:
        cfg = self.config
        if mix.ndim != 3 or mix.shape[1] != 1:
            raise DimensionError(f"expected mixture of shape (B, 1, L), got {mix.shape}")
        if mix.shape[2] < cfg.enc_kernel:
            raise DimensionError(
                f"mixture of {mix.shape[2]} samples is shorter than the encoder "
                f"kernel ({cfg.enc_kernel})"
            )
        return ad.relu(
            ad.conv1d(mix, self.params["enc.w"], self.params["enc.b"], stride=cfg.enc_stride)
        )

    def decode_audio_graph(self, rep: Tensor, out_len: int) -> Tensor:
        if rep.ndim != 3 or rep.shape[1] != self.config.enc_filters:
            raise DimensionError(
                f"expected (B, {self.config.enc_filters}, T) representation, got {rep.shape}"
            )
        y = ad.transposed_conv1d(
            rep, self.params["dec.w"], self.params["dec.b"], stride=self.config.enc_stride
        )
        return ad.crop_pad_time(y, out_len)

    def _adapter(self, x: Tensor) -> Tensor:
        p = self.params
        pad = (self.config.conv_kernel - 1) // 2
        y = ad.depthwise_separable_conv1d(
            x, p["vis.adapter.dw.w"], p["vis.adapter.pw.w"], p["vis.adapter.pw.b"], padding=pad
        )
        y = ad.prelu(y, p["vis.adapter.prelu"])
        y = ad.global_layer_norm(y, p["vis.adapter.norm.g"], p["vis.adapter.norm.b"])
        return x + y

    def encode_visual_graph(self, orig: Tensor, pose_inv: Tensor | None, t_frames: int) -> Tensor:
        cfg = self.config
        if orig.ndim != 3 or orig.shape[1] != cfg.visual_in_dim:
            raise DimensionError(
                f"expected original stream (B, {cfg.visual_in_dim}, n), got {orig.shape}"
            )
        p = self.params
        fused = ad.conv1d(orig, p["vis.orig.w"], p["vis.orig.b"])
        if cfg.use_pose_invariant:
            if pose_inv is None:
                raise DimensionError("model expects a pose-invariant stream")
            if pose_inv.shape != orig.shape:
                raise DimensionError(
                    f"stream frame counts differ: {orig.shape} vs {pose_inv.shape}"
                )
            fused = fused + ad.conv1d(pose_inv, p["vis.pi.w"], p["vis.pi.b"])
            self.stats["pi_frames_consumed"] += int(pose_inv.shape[0] * pose_inv.shape[2])
        return ad.nearest_upsample_time(self._adapter(fused), t_frames)

    def _tcn_block(self, x: Tensor, prefix: str, dilation: int) -> Tensor:
        p = self.params
        pad = dilation * (self.config.conv_kernel - 1) // 2
        y = ad.conv1d(x, p[f"{prefix}.in.w"], p[f"{prefix}.in.b"])
        y = ad.prelu(y, p[f"{prefix}.prelu1"])
        y = ad.global_layer_norm(y, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"])
        y = ad.depthwise_conv1d(
            y, p[f"{prefix}.dw.w"], p[f"{prefix}.dw.b"], padding=pad, dilation=dilation
        )
        y = ad.prelu(y, p[f"{prefix}.prelu2"])
        y = ad.global_layer_norm(y, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"])
        y = ad.conv1d(y, p[f"{prefix}.out.w"], p[f"{prefix}.out.b"])
        return x + y

    def separator_mask_graph(self, a_e: Tensor, v_e: Tensor) -> Tensor:
        cfg = self.config
        if a_e.shape[2] != v_e.shape[2]:
            raise DimensionError(
                f"audio and visual frame counts differ: {a_e.shape[2]} vs {v_e.shape[2]}"
            )
        p = self.params
        x = ad.global_layer_norm(a_e, p["sep.norm.g"], p["sep.norm.b"])
        x = ad.conv1d(x, p["sep.in.w"], p["sep.in.b"])
        for r in range(cfg.audio_repeats):
            for i in range(cfg.blocks_per_repeat):
                x = self._tcn_block(x, f"sep.audio.r{r}.x{i}", 2**i)
        x = ad.concat([x, v_e], axis=1)
        x = ad.conv1d(x, p["sep.fuse.w"], p["sep.fuse.b"])
        for r in range(cfg.fusion_repeats):
            for i in range(cfg.blocks_per_repeat):
                x = self._tcn_block(x, f"sep.fusion.r{r}.x{i}", 2**i)
        m = ad.conv1d(x, p["sep.mask.w"], p["sep.mask.b"])
        return ad.relu(m) if cfg.mask_activation == "relu" else ad.sigmoid(m)

    def extract_graph(self, mix: Tensor, orig: Tensor, pose_inv: Tensor | None) -> Tensor:
        a_e = self.encode_audio_graph(mix)
        v_e = self.encode_visual_graph(orig, pose_inv, a_e.shape[2])
        mask = self.separator_mask_graph(a_e, v_e)
        return self.decode_audio_graph(mask * a_e, mix.shape[2])

    # -- public single-item operations ---------------------------------------

    def _streams_to_tensors(self, streams: VisualStreamPair):
        orig = Tensor(streams.original.T[None].astype(self.dtype))
        pi = Tensor(streams.pose_invariant.T[None].astype(self.dtype))
        return orig, pi

    def encode_audio(self, x: Waveform) -> np.ndarray:
        with ad.no_grad():
            return self.encode_audio_graph(
                Tensor(np.asarray(x.samples, dtype=self.dtype)[None, None])
            ).data[0]

    def decode_audio(self, rep: np.ndarray, out_len: int | None = None) -> np.ndarray:
        rep = np.asarray(rep, dtype=self.dtype)
        t = rep.shape[-1]
        native = (t - 1) * self.config.enc_stride + self.config.enc_kernel
        with ad.no_grad():
            return self.decode_audio_graph(
                Tensor(rep[None]), native if out_len is None else out_len
            ).data[0, 0]

    def encode_visual(self, streams: VisualStreamPair, t_frames: int) -> np.ndarray:
        orig, pi = self._streams_to_tensors(streams)
        with ad.no_grad():
            return self.encode_visual_graph(orig, pi, t_frames).data[0]

    def separator_mask(self, a_e: np.ndarray, v_e: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.separator_mask_graph(
                Tensor(np.asarray(a_e, dtype=self.dtype)[None]),
                Tensor(np.asarray(v_e, dtype=self.dtype)[None]),
            ).data[0]

    def extract(self, x: Waveform, streams: VisualStreamPair) -> Waveform:
        if x.sample_rate != self.config.sample_rate:
            raise DimensionError(
                f"model expects {self.config.sample_rate} Hz audio, got {x.sample_rate}"
            )
        orig, pi = self._streams_to_tensors(streams)
        with ad.no_grad():
            est = self.extract_graph(
                Tensor(np.asarray(x.samples, dtype=self.dtype)[None, None]), orig, pi
            )
        return Waveform(est.data[0, 0].astype(np.float64), x.sample_rate)

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        ad.save_checkpoint(
            path, self.params, extra={"model_config": self.config.to_json_dict()}
        )

    @classmethod
    def load(cls, path) -> "ExtractionModel":
        arrays, extra = ad.load_checkpoint(path)
        if "model_config" not in extra:
            raise ConfigError(f"{path}: sidecar lacks a model_config entry")
        cfg = ModelConfig.from_json_dict(extra["model_config"])
        model = cls(cfg, seed=0)
        model.load_parameter_arrays(arrays)
        return model
