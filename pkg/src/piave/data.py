"""Deterministic synthetic audio-visual corpus.

Each utterance is driven by one Markov viseme sequence that simultaneously
shapes (a) a harmonic excitation-plus-formant waveform and (b) per-frame
visual features, so audio-visual synchrony holds by construction. Visual
features use a fixed channel layout:

    [0:8)   lip block      viseme one-hot scaled by articulation energy
    [8:12)  upper block    coarse expression / head-motion channels
    [12:16) identity block constant per-speaker appearance vector

View corruption rotates the lip and upper blocks with level-specific
orthogonal mixings (angle growing with corruption strength) and attenuates
the lip block, mimicking how off-frontal camera views scramble articulation
cues. The pose-invariant view is derived from the clean frames with the
identity block zeroed: frontalized, expression-preserving, texture-free.
"""
from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .dsp import Waveform, mix_at_snr, read_wav, write_wav
from .errors import ConfigError, DegenerateSignalError, DimensionError, ParameterError

LIP_DIM = 8
EXPR_DIM = 4
IDENT_DIM = 4
VISUAL_DIM = LIP_DIM + EXPR_DIM + IDENT_DIM
LIP_SLICE = slice(0, LIP_DIM)
UPPER_SLICE = slice(LIP_DIM, VISUAL_DIM)
IDENT_SLICE = slice(LIP_DIM + EXPR_DIM, VISUAL_DIM)

N_VISEMES = 8
MEAN_DWELL_FRAMES = 3  # 120 ms at 25 FPS

# Per-viseme articulation level and two formant centers (Hz). Class 0 is a
# near-silent closure.
_VISEME_LEVEL = np.array([0.06, 1.0, 0.92, 0.85, 0.97, 0.88, 0.8, 0.9])
_VISEME_FORMANTS = np.array(
    [
        [400.0, 1400.0],
        [290.0, 2250.0],
        [850.0, 1600.0],
        [320.0, 870.0],
        [620.0, 1190.0],
        [450.0, 1750.0],
        [720.0, 1950.0],
        [380.0, 1020.0],
    ]
)
_FORMANT_BW = 120.0
_FORMANT_GAINS = (1.0, 0.7)


class ViewLevel(str, Enum):
    FRONT = "front"
    TOP = "top"
    DOWN = "down"
    LEFT30 = "left30"
    LEFT60 = "left60"
    RIGHT30 = "right30"
    RIGHT60 = "right60"


VIEW_STRENGTH = {
    ViewLevel.FRONT: 0.0,
    ViewLevel.TOP: 0.3,
    ViewLevel.DOWN: 0.3,
    ViewLevel.LEFT30: 0.4,
    ViewLevel.RIGHT30: 0.4,
    ViewLevel.LEFT60: 0.7,
    ViewLevel.RIGHT60: 0.7,
}

ALL_VIEWS = tuple(ViewLevel)


def view_level(name) -> ViewLevel:
    if isinstance(name, ViewLevel):
        return name
    try:
        return ViewLevel(str(name))
    except ValueError as exc:
        raise ParameterError(f"unknown view level {name!r}") from exc


@dataclass(frozen=True)
class SpeakerProfile:
    """All synthesis parameters of one speaker, derived from a single seed."""

    seed: int
    pitch_hz: float
    formant_scale: tuple[float, float]
    viseme_gain: tuple[float, ...]
    identity: tuple[float, ...]

    @classmethod
    def from_seed(cls, seed: int) -> "SpeakerProfile":
        rng = np.random.default_rng([int(seed), 0x5EED])
        pitch = float(np.exp(rng.uniform(np.log(85.0), np.log(230.0))))
        scale = (float(rng.uniform(0.88, 1.12)), float(rng.uniform(0.88, 1.12)))
        gains = tuple(float(g) for g in rng.uniform(0.8, 1.25, size=N_VISEMES))
        ident = rng.normal(size=IDENT_DIM)
        ident = 0.8 * ident / np.linalg.norm(ident)
        return cls(int(seed), pitch, scale, gains, tuple(float(x) for x in ident))


@dataclass
class Utterance:
    """One paired audio/visual utterance of a single speaker."""

    waveform: Waveform
    viseme_frames: np.ndarray  # (n, VISUAL_DIM) float32
    speaker_id: int


def _viseme_sequence(rng: np.random.Generator, n_frames: int) -> np.ndarray:
    stay = 1.0 - 1.0 / MEAN_DWELL_FRAMES
    seq = np.empty(n_frames, dtype=np.int64)
    state = int(rng.integers(N_VISEMES))
    for i in range(n_frames):
        seq[i] = state
        if rng.random() >= stay:
            step = int(rng.integers(1, N_VISEMES))
            state = (state + step) % N_VISEMES
    return seq


def _formant_envelope(freqs: np.ndarray, viseme: int, scale: tuple[float, float]) -> np.ndarray:
    env = np.full_like(freqs, 0.08)
    for g, f0, s in zip(_FORMANT_GAINS, _VISEME_FORMANTS[viseme], scale):
        env += g * np.exp(-((freqs - f0 * s) ** 2) / (2.0 * _FORMANT_BW**2))
    return env


def gen_utterance(
    profile: SpeakerProfile,
    duration_s: float,
    seed: int,
    sample_rate: int = 8000,
    fps: int = 25,
) -> Utterance:
    """Deterministic utterance for (profile, seed): waveform + visual frames."""
    if duration_s < 0.5:
        raise DegenerateSignalError(f"duration must be >= 0.5 s, got {duration_s}")
    rng = np.random.default_rng([int(seed), profile.seed, 0xA0D10])
    n_frames = round(duration_s * fps)
    n_samples = round(duration_s * sample_rate)

    visemes = _viseme_sequence(rng, n_frames)
    t_frames = (np.arange(n_frames) + 0.5) / fps
    slow = 0.85 + 0.15 * np.sin(
        2.0 * np.pi * rng.uniform(0.5, 1.5) * t_frames + rng.uniform(0.0, 2 * np.pi)
    )
    gains = np.asarray(profile.viseme_gain)
    env = _VISEME_LEVEL[visemes] * gains[visemes] * slow

    # --- audio: constant-pitch harmonic stack shaped by per-frame formants
    f0 = profile.pitch_hz * float(rng.uniform(0.97, 1.03))
    n_harm = max(3, int(0.95 * (sample_rate / 2) / f0))
    k = np.arange(1, n_harm + 1)
    harm_amp = np.empty((n_harm, n_frames))
    for viseme in range(N_VISEMES):
        cols = visemes == viseme
        if cols.any():
            harm_amp[:, cols] = (
                _formant_envelope(k * f0, viseme, profile.formant_scale) / k
            )[:, None]
    harm_amp *= env[None, :]

    t = (np.arange(n_samples) + 0.5) / sample_rate
    amp = np.empty((n_harm, n_samples))
    for j in range(n_harm):
        amp[j] = np.interp(t, t_frames, harm_amp[j])
    phases = 2.0 * np.pi * f0 * np.outer(k, t) + rng.uniform(0.0, 2 * np.pi, size=(n_harm, 1))
    wave = (amp * np.sin(phases)).sum(axis=0)

    env_t = np.interp(t, t_frames, env)
    wave += 0.02 * env_t * rng.standard_normal(n_samples)
    wave += 0.003 * rng.standard_normal(n_samples)  # floor keeps every band alive
    wave *= 0.045 / max(np.sqrt(np.mean(wave**2)), 1e-12)

    # --- visual frames
    frames = np.zeros((n_frames, VISUAL_DIM), dtype=np.float64)
    frames[np.arange(n_frames), visemes] = env
    frames[:, LIP_SLICE] += 0.02 * rng.standard_normal((n_frames, LIP_DIM))

    env_coarse = np.convolve(env, np.ones(5) / 5.0, mode="same")
    coupling = np.array([0.5, 0.35, 0.2, 0.1])
    rates = rng.uniform(0.2, 0.8, size=EXPR_DIM)
    phis = rng.uniform(0.0, 2 * np.pi, size=EXPR_DIM)
    expr = coupling[None, :] * (env_coarse - env_coarse.mean())[:, None]
    expr += 0.2 * np.sin(2.0 * np.pi * rates[None, :] * t_frames[:, None] + phis[None, :])
    frames[:, LIP_DIM : LIP_DIM + EXPR_DIM] = expr
    frames[:, IDENT_SLICE] = np.asarray(profile.identity)[None, :]

    return Utterance(
        Waveform(wave, sample_rate), frames.astype(np.float32), profile.seed
    )


# ---------------------------------------------------------------------------
# View corruption model
# ---------------------------------------------------------------------------

def _block_rotation(rng: np.random.Generator, dim: int, max_angle: float, strength: float) -> np.ndarray:
    g = rng.standard_normal((dim, dim))
    skew = (g - g.T) / 2.0
    top = np.abs(np.linalg.eigvals(skew)).max()
    return expm((strength * max_angle / top) * skew)


def corruption_operators(level: ViewLevel, seed: int) -> tuple[np.ndarray, np.ndarray, float]:
    """(lip rotation, upper rotation, lip attenuation) for a view level."""
    strength = VIEW_STRENGTH[level]
    ordinal = list(ViewLevel).index(level)
    rng = np.random.default_rng([int(seed), ordinal, 0xC0DE])
    r_lip = _block_rotation(rng, LIP_DIM, 1.6, strength)
    r_up = _block_rotation(rng, EXPR_DIM + IDENT_DIM, 1.2, strength)
    return r_lip, r_up, 1.0 - strength / 2.0


def corrupt_view(frames: np.ndarray, level, seed: int) -> np.ndarray:
    """Rotate lip/upper channel blocks and attenuate the lip block."""
    level = view_level(level)
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != VISUAL_DIM:
        raise DimensionError(f"expected (n, {VISUAL_DIM}) frames, got {frames.shape}")
    if VIEW_STRENGTH[level] == 0.0:
        return frames.copy()
    r_lip, r_up, atten = corruption_operators(level, seed)
    out = frames.astype(np.float64)
    out[:, LIP_SLICE] = atten * (out[:, LIP_SLICE] @ r_lip.T)
    out[:, UPPER_SLICE] = out[:, UPPER_SLICE] @ r_up.T
    return out.astype(frames.dtype)


def pose_invariant_view(frames: np.ndarray) -> np.ndarray:
    """Clean frames with the identity block zeroed (texture-free frontal view)."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != VISUAL_DIM:
        raise DimensionError(f"expected (n, {VISUAL_DIM}) frames, got {frames.shape}")
    out = frames.copy()
    out[:, IDENT_SLICE] = 0.0
    return out


# ---------------------------------------------------------------------------
# Visual feature files: '<II' header (n, v) + little-endian float32 payload
# ---------------------------------------------------------------------------

def write_visual(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise DimensionError(f"visual frames must be 2D, got shape {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        fh.write(frames.astype("<f4").tobytes())


def read_visual(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DimensionError(f"{path}: missing visual header")
    n, v = struct.unpack("<II", raw[:8])
    expected = 8 + 4 * n * v
    if len(raw) != expected:
        raise DimensionError(f"{path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, v).copy()


# ---------------------------------------------------------------------------
# Corpus builder
# ---------------------------------------------------------------------------

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
_TEST_SPEAKER_OFFSET = 10_000


@dataclass
class CorpusConfig:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    duration_s: float = 3.0
    sample_rate: int = 8000
    fps: int = 25
    snr_low: float = -10.0
    snr_high: float = 10.0
    n_train_speakers: int = 80
    n_test_speakers: int = 20
    seed: int = 0
    view: str = "front"
    corruption_seed: int = 1040
    train_speaker_ids: list[int] | None = None
    test_speaker_ids: list[int] | None = None

    def validate(self) -> None:
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("every split needs at least one item")
        if self.duration_s < 0.5:
            raise ConfigError("items must be at least 0.5 s long")
        if self.snr_low > self.snr_high:
            raise ConfigError(f"empty SNR range [{self.snr_low}, {self.snr_high}]")
        if min(self.n_train_speakers, self.n_test_speakers) < 2:
            raise ConfigError("need at least 2 speakers per pool to form mixtures")
        try:
            view_level(self.view)
        except ParameterError as exc:
            raise ConfigError(str(exc)) from exc
        train, test = self.speaker_pools()
        if set(train) & set(test):
            raise ConfigError("train and test speaker pools overlap")

    def speaker_pools(self) -> tuple[list[int], list[int]]:
        train = self.train_speaker_ids or list(range(self.n_train_speakers))
        test = self.test_speaker_ids or [
            _TEST_SPEAKER_OFFSET + i for i in range(self.n_test_speakers)
        ]
        return list(train), list(test)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        train, test = self.speaker_pools()
        d["train_speaker_ids"] = train
        d["test_speaker_ids"] = test
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "CorpusConfig":
        cfg = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        cfg.validate()
        return cfg


def _item_seed(seed: int, split: str, index: int) -> int:
    return (int(seed) * 3 + _SPLIT_CODES[split]) * 1_000_003 + index


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("PIAVE_THREADS", "1")))
    except ValueError:
        return 1


def _build_item(cfg: CorpusConfig, root: Path, split: str, index: int, pool: list[int]) -> dict:
    seed = _item_seed(cfg.seed, split, index)
    rng = np.random.default_rng([seed, 7])
    tgt = int(pool[rng.integers(len(pool))])
    itf = tgt
    while itf == tgt:
        itf = int(pool[rng.integers(len(pool))])
    snr = float(rng.uniform(cfg.snr_low, cfg.snr_high))

    target = gen_utterance(
        SpeakerProfile.from_seed(tgt), cfg.duration_s, 2 * seed, cfg.sample_rate, cfg.fps
    )
    interf = gen_utterance(
        SpeakerProfile.from_seed(itf), cfg.duration_s, 2 * seed + 1, cfg.sample_rate, cfg.fps
    )
    mixture, scaled = mix_at_snr(target.waveform, interf.waveform, snr)

    item_dir = root / split / f"{index:06d}"
    item_dir.mkdir(parents=True, exist_ok=True)
    write_wav(item_dir / "mix.wav", mixture)
    write_wav(item_dir / "target.wav", target.waveform)
    write_wav(item_dir / "interf.wav", scaled)
    write_visual(
        item_dir / "visual_orig.bin",
        corrupt_view(target.viseme_frames, cfg.view, cfg.corruption_seed),
    )
    write_visual(item_dir / "visual_pi.bin", pose_invariant_view(target.viseme_frames))

    return {
        "id": f"{split}/{index:06d}",
        "split": split,
        "index": index,
        "seed": seed,
        "target_speaker": tgt,
        "interferer_speaker": itf,
        "snr_db": snr,
        "view": cfg.view,
        "dir": f"{split}/{index:06d}",
    }


def build_corpus(config: CorpusConfig, out_dir) -> dict:
    """Generate the corpus under out_dir and return the manifest dict.

    Items are independent and may be generated by PIAVE_THREADS workers; the
    manifest is assembled in item order, so its bytes depend only on config.
    """
    config.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    train_pool, test_pool = config.speaker_pools()

    jobs = []
    for split, count in (("train", config.n_train), ("val", config.n_val), ("test", config.n_test)):
        pool = test_pool if split == "test" else train_pool
        jobs.extend((split, i, pool) for i in range(count))

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            items = list(
                pool_exec.map(lambda j: _build_item(config, root, j[0], j[1], j[2]), jobs)
            )
    else:
        items = [_build_item(config, root, s, i, p) for s, i, p in jobs]

    manifest = {"config": config.to_json_dict(), "items": items}
    (root / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    )
    return manifest


class Corpus:
    """Read access to a generated corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise ConfigError(f"{self.root} has no manifest.json")
        self.manifest = json.loads(manifest_path.read_text())
        self.config = CorpusConfig.from_json_dict(self.manifest["config"])
        self._by_split: dict[str, list[dict]] = {"train": [], "val": [], "test": []}
        for item in self.manifest["items"]:
            self._by_split[item["split"]].append(item)

    def items(self, split: str) -> list[dict]:
        if split not in self._by_split:
            raise ConfigError(f"unknown split {split!r}")
        return self._by_split[split]

    def load_item(self, item: dict) -> dict:
        d = self.root / item["dir"]
        return {
            "mix": read_wav(d / "mix.wav"),
            "target": read_wav(d / "target.wav"),
            "interferer": read_wav(d / "interf.wav"),
            "visual_orig": read_visual(d / "visual_orig.bin"),
            "visual_pi": read_visual(d / "visual_pi.bin"),
            "meta": item,
        }
