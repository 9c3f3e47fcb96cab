"""Waveform decoding and log-power spectrogram extraction.

The audio path of the classifier consumes a fixed-shape log-power STFT
spectrogram: Hann-windowed frames, magnitude squared, clamped at a power
floor, natural log. Clips are resampled to DEFAULT_SAMPLE_RATE and cut or
zero-padded to CLIP_SECONDS before analysis so the encoder input shape is
static.

The WAV reader is a minimal RIFF parser (PCM16 and float32 only) rather than
the stdlib ``wave`` module, which rejects IEEE-float files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UnsupportedFormatError, ValidationError

DEFAULT_SAMPLE_RATE = 44100
CLIP_SECONDS = 5.0


@dataclass(frozen=True)
class Waveform:
    """Mono amplitude samples in [-1, 1] at an integer sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")

    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SpectrogramConfig:
    n_fft: int = 1024
    hop: int = 512
    window: str = "hann"
    log_floor: float = 1e-10
    center_pad: bool = True

    def __post_init__(self):
        if not (0 < self.hop <= self.n_fft):
            raise ValidationError(f"need 0 < hop <= n_fft, got hop={self.hop} n_fft={self.n_fft}")
        if self.n_fft & (self.n_fft - 1):
            raise ValidationError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.log_floor <= 0:
            raise ValidationError(f"log_floor must be positive, got {self.log_floor}")
        if self.window != "hann":
            raise ValidationError(f"unsupported window {self.window!r}")

    @property
    def freq_bins(self) -> int:
        return self.n_fft // 2 + 1

    def num_frames(self, n_samples: int) -> int:
        if self.center_pad:
            return n_samples // self.hop + 1
        if n_samples <= self.n_fft:
            return 1
        return (n_samples - self.n_fft) // self.hop + 1


@dataclass(frozen=True)
class Spectrogram:
    """[freq_bins x time_frames] natural-log power, floored at ln(log_floor)."""

    values: np.ndarray


def static_input_shape(
    cfg: SpectrogramConfig | None = None,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    clip_seconds: float = CLIP_SECONDS,
) -> tuple[int, int]:
    """Spectrogram shape produced by the standard clip pipeline."""
    cfg = cfg or SpectrogramConfig()
    n = int(round(sample_rate * clip_seconds))
    return (cfg.freq_bins, cfg.num_frames(n))


def decode_wav(data: bytes) -> Waveform:
    """Decode a RIFF/WAVE byte string to a mono Waveform.

    PCM16 samples are scaled by 1/32768; float32 samples pass through (clipped
    to [-1, 1]). Multi-channel audio is averaged to mono.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DataError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise DataError(f"truncated chunk {cid!r}: expected {size} bytes, got {len(body)}")
        if cid == b"fmt ":
            if size < 16:
                raise DataError("truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or payload is None:
        raise DataError("missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if channels < 1:
        raise DataError("fmt chunk declares zero channels")
    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(payload, dtype="<i2").astype(np.float64)
        samples = raw / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        samples = np.clip(samples, -1.0, 1.0)
    else:
        raise UnsupportedFormatError(
            f"unsupported WAV encoding: format={audio_format} bits={bits} (PCM16 or float32 only)"
        )
    if channels > 1:
        usable = len(samples) - len(samples) % channels
        samples = samples[:usable].reshape(-1, channels).mean(axis=1)
    return Waveform(samples=samples, sample_rate=int(rate))


def read_wav(path) -> Waveform:
    try:
        data = open(path, "rb").read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return decode_wav(data)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Linear-interpolation resampling; output length = round(n * target/source)."""
    if target_rate <= 0:
        raise ValidationError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate or len(w.samples) == 0:
        return Waveform(samples=w.samples, sample_rate=target_rate)
    n = len(w.samples)
    m = int(round(n * target_rate / w.sample_rate))
    positions = np.arange(m) * (w.sample_rate / target_rate)
    out = np.interp(positions, np.arange(n), w.samples)
    return Waveform(samples=out, sample_rate=target_rate)


def standardize_duration(w: Waveform, seconds: float = CLIP_SECONDS) -> Waveform:
    """Truncate or zero-pad to exactly round(rate * seconds) samples."""
    n = int(round(w.sample_rate * seconds))
    s = w.samples[:n]
    if len(s) < n:
        s = np.concatenate([s, np.zeros(n - len(s))])
    return Waveform(samples=s, sample_rate=w.sample_rate)


def _hann(n: int) -> np.ndarray:
    # periodic variant, the standard analysis window for STFT
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def log_spectrogram(w: Waveform, cfg: SpectrogramConfig | None = None) -> Spectrogram:
    """Hann-windowed STFT power, clamped at cfg.log_floor, natural log.

    With center_pad the signal is zero-padded by n_fft//2 on both sides and
    frame t starts at t*hop in the original timeline, giving
    floor(len/hop) + 1 frames. Without it, frames tile the raw signal and a
    short signal is zero-padded to a single frame.
    """
    cfg = cfg or SpectrogramConfig()
    x = np.asarray(w.samples, dtype=np.float64)
    if x.ndim != 1 or len(x) < 1:
        raise ValidationError("log_spectrogram needs a non-empty 1-D signal")
    n_frames = cfg.num_frames(len(x))
    if cfg.center_pad:
        pad = cfg.n_fft // 2
        x = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    elif len(x) < cfg.n_fft:
        x = np.concatenate([x, np.zeros(cfg.n_fft - len(x))])
    window = _hann(cfg.n_fft)
    frames = np.empty((n_frames, cfg.n_fft), dtype=np.float64)
    for t in range(n_frames):
        frames[t] = x[t * cfg.hop : t * cfg.hop + cfg.n_fft]
    power = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    values = np.log(np.maximum(power, cfg.log_floor)).T  # [freq_bins, time]
    return Spectrogram(values=values)


def clip_spectrogram(
    w: Waveform,
    cfg: SpectrogramConfig | None = None,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    clip_seconds: float = CLIP_SECONDS,
) -> Spectrogram:
    """Standard clip pipeline: resample, fix duration, analyze."""
    w = resample(w, sample_rate)
    w = standardize_duration(w, clip_seconds)
    return log_spectrogram(w, cfg)


def spectrogram_to_csv(spec: Spectrogram, path) -> None:
    """One CSV row per frequency bin, columns are time frames."""
    np.savetxt(path, spec.values, delimiter=",", fmt="%.9g")
