"""Audio primitives: SNR-exact mixing, quality metrics, WAV I/O.

Metrics always take (estimate, reference) in that order; SI-SDR and SDR are
not symmetric. SI-SDR here performs no mean subtraction and no epsilon
smoothing, so a DC offset changes the score and a perfect reconstruction maps
to an explicit +inf sentinel instead of a capped value.
"""
from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass

import numpy as np
from scipy.signal import resample_poly

from .errors import (
    DegenerateSignalError,
    DimensionError,
    MalformedWavError,
    UnsupportedWavError,
)

DEFAULT_SAMPLE_RATE = 8000


@dataclass
class Waveform:
    """Mono audio: float64 samples plus a sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.isfinite(self.samples).all():
            raise DegenerateSignalError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise DimensionError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        if self.samples.size == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass
class MetricValue:
    """A named metric score; dB for SI-SDR/SDR, unitless for STOI."""

    name: str
    value: float

    @property
    def infinite(self) -> bool:
        return math.isinf(self.value)

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "value": None if self.infinite else self.value,
            "infinite": self.infinite,
        }


def _check_pair(estimate: Waveform, reference: Waveform) -> None:
    if len(estimate) != len(reference):
        raise DimensionError(
            f"length mismatch: {len(estimate)} vs {len(reference)} samples"
        )
    if estimate.sample_rate != reference.sample_rate:
        raise DimensionError(
            f"sample-rate mismatch: {estimate.sample_rate} vs {reference.sample_rate}"
        )
    if len(reference) == 0:
        raise DegenerateSignalError("empty signals")


def mix_at_snr(
    target: Waveform, interferer: Waveform, snr_db: float
) -> tuple[Waveform, Waveform]:
    """Mix target + alpha * interferer so the measured SNR equals snr_db.

    alpha = (rms(target) / rms(interferer)) * 10^(-snr_db / 20). Returns the
    mixture and the scaled interferer actually added.
    """
    _check_pair(target, interferer)
    rms_t, rms_i = target.rms(), interferer.rms()
    if rms_t == 0.0:
        raise DegenerateSignalError("target is silent")
    if rms_i == 0.0:
        raise DegenerateSignalError("interferer is silent")
    alpha = (rms_t / rms_i) * 10.0 ** (-snr_db / 20.0)
    scaled = Waveform(alpha * interferer.samples, interferer.sample_rate)
    mixture = Waveform(target.samples + scaled.samples, target.sample_rate)
    return mixture, scaled


def si_sdr_db(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Scale-invariant signal-to-distortion ratio in dB, on raw arrays.

    Projects the estimate onto the reference (no mean subtraction) and
    compares projection energy with residual energy. +inf when the residual
    is exactly zero.
    """
    est = np.asarray(estimate, dtype=np.float64).reshape(-1)
    ref = np.asarray(reference, dtype=np.float64).reshape(-1)
    if est.size != ref.size or est.size == 0:
        raise DimensionError("arrays must be non-empty and equally long")
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise DegenerateSignalError("reference is silent")
    alpha = float(est @ ref) / ref_energy
    proj = alpha * ref
    resid = proj - est
    num = float(proj @ proj)
    den = float(resid @ resid)
    if den == 0.0:
        return math.inf
    if num == 0.0:
        return -math.inf
    return 10.0 * math.log10(num / den)


def si_sdr(estimate: Waveform, reference: Waveform) -> MetricValue:
    _check_pair(estimate, reference)
    return MetricValue("SI-SDR", si_sdr_db(estimate.samples, reference.samples))


def sdr_db(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Plain signal-to-distortion ratio in dB (no allowed distortion filter)."""
    est = np.asarray(estimate, dtype=np.float64).reshape(-1)
    ref = np.asarray(reference, dtype=np.float64).reshape(-1)
    if est.size != ref.size or est.size == 0:
        raise DimensionError("arrays must be non-empty and equally long")
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise DegenerateSignalError("reference is silent")
    resid = ref - est
    den = float(resid @ resid)
    if den == 0.0:
        return math.inf
    return 10.0 * math.log10(ref_energy / den)


def sdr(estimate: Waveform, reference: Waveform) -> MetricValue:
    _check_pair(estimate, reference)
    return MetricValue("SDR", sdr_db(estimate.samples, reference.samples))


# ---------------------------------------------------------------------------
# STOI
# ---------------------------------------------------------------------------

_STOI_FS = 10000
_STOI_FRAME = 256
_STOI_HOP = 128
_STOI_NFFT = 512
_STOI_NBANDS = 15
_STOI_MINFREQ = 150.0
_STOI_SEG = 30  # frames per 384 ms analysis segment
_STOI_BETA_DB = -15.0  # lower bound of the clipped normalized correlation
_STOI_DYN_RANGE = 40.0  # silent-frame threshold below the loudest frame
_STOI_MIN_DURATION_S = 0.384


def _stoi_window() -> np.ndarray:
    n = np.arange(1, _STOI_FRAME + 1)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / (_STOI_FRAME + 1))


def _frame(x: np.ndarray) -> np.ndarray:
    n_frames = (x.size - _STOI_FRAME) // _STOI_HOP + 1
    idx = np.arange(_STOI_FRAME)[None, :] + _STOI_HOP * np.arange(n_frames)[:, None]
    return x[idx]


def _remove_silent_frames(ref: np.ndarray, est: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w = _stoi_window()
    ref_frames = _frame(ref) * w
    est_frames = _frame(est) * w
    energies = 20.0 * np.log10(np.linalg.norm(ref_frames, axis=1) + np.finfo(float).eps)
    keep = energies > energies.max() - _STOI_DYN_RANGE
    ref_frames, est_frames = ref_frames[keep], est_frames[keep]
    out_len = (ref_frames.shape[0] - 1) * _STOI_HOP + _STOI_FRAME if ref_frames.shape[0] else 0
    ref_out = np.zeros(out_len)
    est_out = np.zeros(out_len)
    for i in range(ref_frames.shape[0]):
        sl = slice(i * _STOI_HOP, i * _STOI_HOP + _STOI_FRAME)
        ref_out[sl] += ref_frames[i]
        est_out[sl] += est_frames[i]
    return ref_out, est_out


def _third_octave_band_matrix() -> np.ndarray:
    f = np.arange(_STOI_NFFT // 2 + 1) * (_STOI_FS / _STOI_NFFT)
    k = np.arange(_STOI_NBANDS)
    cf = _STOI_MINFREQ * 2.0 ** (k / 3.0)
    f_lo = cf / 2.0 ** (1.0 / 6.0)
    f_hi = cf * 2.0 ** (1.0 / 6.0)
    obm = np.zeros((_STOI_NBANDS, f.size))
    for i in range(_STOI_NBANDS):
        lo = int(np.argmin((f - f_lo[i]) ** 2))
        hi = int(np.argmin((f - f_hi[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm


def _band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    frames = _frame(x) * _stoi_window()
    spec = np.abs(np.fft.rfft(frames, n=_STOI_NFFT, axis=1)) ** 2
    return np.sqrt(obm @ spec.T)  # (bands, frames)


def stoi(estimate: Waveform, reference: Waveform) -> MetricValue:
    """Short-time objective intelligibility of estimate given reference.

    Standard recipe: resample to 10 kHz, drop frames more than 40 dB below
    the loudest reference frame, 15 one-third-octave band envelopes from
    256-sample frames, clipped normalized correlation over sliding 384 ms
    segments, averaged over bands and segments.
    """
    _check_pair(estimate, reference)
    if reference.duration_s < _STOI_MIN_DURATION_S:
        raise DegenerateSignalError(
            f"STOI needs at least {_STOI_MIN_DURATION_S * 1e3:.0f} ms of audio, "
            f"got {reference.duration_s * 1e3:.0f} ms"
        )
    fs = reference.sample_rate
    ref, est = reference.samples, estimate.samples
    if fs != _STOI_FS:
        g = math.gcd(_STOI_FS, fs)
        ref = resample_poly(ref, _STOI_FS // g, fs // g)
        est = resample_poly(est, _STOI_FS // g, fs // g)

    ref, est = _remove_silent_frames(ref, est)
    n_frames = (ref.size - _STOI_FRAME) // _STOI_HOP + 1 if ref.size >= _STOI_FRAME else 0
    if n_frames < _STOI_SEG:
        raise DegenerateSignalError("too few active frames for a 384 ms STOI segment")

    obm = _third_octave_band_matrix()
    x = _band_envelopes(ref, obm)  # clean
    y = _band_envelopes(est, obm)  # degraded

    c = 10.0 ** (-_STOI_BETA_DB / 20.0)
    eps = np.finfo(float).eps
    total = 0.0
    count = 0
    for m in range(_STOI_SEG, x.shape[1] + 1):
        xs = x[:, m - _STOI_SEG : m]
        ys = y[:, m - _STOI_SEG : m]
        alpha = np.sqrt(
            (xs**2).sum(axis=1, keepdims=True)
            / ((ys**2).sum(axis=1, keepdims=True) + eps)
        )
        ys_clip = np.minimum(alpha * ys, xs * (1.0 + c))
        xm = xs - xs.mean(axis=1, keepdims=True)
        ym = ys_clip - ys_clip.mean(axis=1, keepdims=True)
        corr = (xm * ym).sum(axis=1) / (
            np.linalg.norm(xm, axis=1) * np.linalg.norm(ym, axis=1) + eps
        )
        total += corr.sum()
        count += corr.size
    return MetricValue("STOI", float(total / count))


# ---------------------------------------------------------------------------
# WAV I/O (16-bit PCM mono RIFF)
# ---------------------------------------------------------------------------

def write_wav(path, waveform: Waveform) -> None:
    """Write 16-bit PCM mono; samples are clipped to [-1, 1] and quantized."""
    q = np.clip(waveform.samples, -1.0, 1.0)
    pcm = np.round(q * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(waveform.sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    """Read 16-bit PCM mono; anything else raises."""
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n = w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError, struct.error) as exc:
        raise MalformedWavError(f"{path}: {exc}") from exc
    if channels != 1:
        raise UnsupportedWavError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise UnsupportedWavError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if len(raw) < 2 * n:
        raise MalformedWavError(f"{path}: truncated data chunk")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32767.0, rate)


__all__ = [
    "DEFAULT_SAMPLE_RATE",
    "MetricValue",
    "Waveform",
    "mix_at_snr",
    "read_wav",
    "sdr",
    "sdr_db",
    "si_sdr",
    "si_sdr_db",
    "stoi",
    "write_wav",
]
