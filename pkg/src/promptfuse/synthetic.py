"""Synthetic fixture datasets in the on-disk layout the trainer consumes.

Two families:

* audio-separable: frame images are class-independent noise, the audio track
  is a class-specific tone. Only a model that uses the audio branch can beat
  chance on the test split.
* visually-separable: the class signal lives in the frame images (oriented
  gradient plus noise); audio is class-independent noise.

Layout per sample: <root>/<id>/frame_0000.png .. frame_{N-1}.png plus
<root>/<id>/audio.wav, and a manifest.jsonl at the root with split tags.
"""

from __future__ import annotations

import json
import wave
from pathlib import Path

import numpy as np
from PIL import Image

from .manifest import CLASS_NAMES

# benign: soft steady harmonic tone; malicious: loud pulsed dissonant pair
TONE_HZ = {"benign": 440.0, "malicious": 3520.0}
_DISSONANT_HZ = 2489.0
_PULSE_HZ = 4.0


def _write_wav(path, samples: np.ndarray, rate: int) -> None:
    pcm = np.clip(samples, -1.0, 1.0)
    pcm = (pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(pcm.tobytes())


def _write_frames(sample_dir: Path, frames: np.ndarray) -> None:
    for i, frame in enumerate(frames):
        Image.fromarray(frame, mode="RGB").save(sample_dir / f"frame_{i:04d}.png")


def _noise_frames(rng, count: int, size: int) -> np.ndarray:
    return rng.integers(0, 256, (count, size, size, 3), dtype=np.uint8)


def _gradient_frames(rng, count: int, size: int, label: str, noise: float) -> np.ndarray:
    ramp = np.linspace(0.15, 0.85, size)
    base = np.tile(ramp[None, :], (size, 1)) if label == "benign" else np.tile(ramp[:, None], (1, size))
    frames = np.empty((count, size, size, 3), dtype=np.uint8)
    for i in range(count):
        img = base + rng.normal(0.0, noise, (size, size))
        frames[i] = (np.clip(img, 0.0, 1.0)[..., None] * 255).astype(np.uint8)
    return frames


def _harmonic(rng, t: np.ndarray, hz: float, nyquist: float, partials: int) -> np.ndarray:
    out = np.zeros_like(t)
    for k in range(1, partials + 1):
        if k * hz >= nyquist:
            break
        phase = rng.uniform(0.0, 2.0 * np.pi)
        out += np.sin(2.0 * np.pi * k * hz * t + phase) / k
    return out


def _tone(rng, rate: int, seconds: float, label: str) -> np.ndarray:
    t = np.arange(int(rate * seconds)) / rate
    nyquist = rate / 2.0
    if label == "benign":
        sig = _harmonic(rng, t, TONE_HZ["benign"], nyquist, partials=6)
        amp = rng.uniform(0.25, 0.45)
    else:
        sig = _harmonic(rng, t, TONE_HZ["malicious"], nyquist, partials=2)
        sig += _harmonic(rng, t, _DISSONANT_HZ, nyquist, partials=2)
        gate = (np.sin(2.0 * np.pi * _PULSE_HZ * t + rng.uniform(0, 2 * np.pi)) > 0).astype(float)
        sig *= gate
        amp = rng.uniform(0.5, 0.8)
    sig = amp * sig / max(np.abs(sig).max(), 1e-9)
    return sig + rng.normal(0.0, 0.01, len(t))


def _audio_noise(rng, rate: int, seconds: float) -> np.ndarray:
    return rng.normal(0.0, 0.2, int(rate * seconds))


def build_dataset(
    root,
    n_train: int = 200,
    n_test: int = 100,
    seed: int = 0,
    image_size: int = 32,
    frames_per_sample: int = 16,
    audio_rate: int = 11025,
    audio_seconds: float = 5.0,
    signal: str = "audio",
    visual_noise: float = 0.35,
) -> Path:
    """Write a balanced labeled dataset; returns the manifest path.

    signal="audio" puts the class signal in the audio track only;
    signal="visual" puts it in the frames only.
    """
    if signal not in ("audio", "visual"):
        raise ValueError(f"unknown signal placement {signal!r}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    lines = []
    plan = [("train", n_train), ("test", n_test)]
    counter = 0
    for split, count in plan:
        for i in range(count):
            label = CLASS_NAMES[i % len(CLASS_NAMES)]
            sample_id = f"{split}_{counter:05d}"
            counter += 1
            sample_dir = root / sample_id
            sample_dir.mkdir(exist_ok=True)
            if signal == "audio":
                frames = _noise_frames(rng, frames_per_sample, image_size)
                audio = _tone(rng, audio_rate, audio_seconds, label)
            else:
                frames = _gradient_frames(rng, frames_per_sample, image_size, label, visual_noise)
                audio = _audio_noise(rng, audio_rate, audio_seconds)
            _write_frames(sample_dir, frames)
            _write_wav(sample_dir / "audio.wav", audio, audio_rate)
            lines.append(
                {
                    "id": sample_id,
                    "label": label,
                    "frames_dir": sample_id,
                    "audio": f"{sample_id}/audio.wav",
                    "split": split,
                }
            )
    manifest = root / "manifest.jsonl"
    with manifest.open("w", encoding="utf-8") as fh:
        for obj in lines:
            fh.write(json.dumps(obj) + "\n")
    return manifest


def build_fixture_manifest(path, malicious: int = 305, benign: int = 830) -> Path:
    """Schema fixture with stubbed paths, mirroring the published class counts."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for i in range(malicious + benign):
            label = "malicious" if i < malicious else "benign"
            obj = {
                "id": f"video_{i:04d}",
                "label": label,
                "frames_dir": f"clips/video_{i:04d}",
                "audio": f"clips/video_{i:04d}/audio.wav",
                "split": None,
            }
            fh.write(json.dumps(obj) + "\n")
    return path
