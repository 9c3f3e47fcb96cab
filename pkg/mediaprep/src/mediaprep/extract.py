"""Per-video extraction: uniformly spaced frames + mono PCM16 WAV + manifest line."""

from __future__ import annotations

import json
import shutil
import subprocess
import wave
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .avi import AviError, read_pcm_audio


class ExtractError(Exception):
    pass


@dataclass(frozen=True)
class PrepJob:
    video_path: Path
    out_dir: Path
    label: str
    frame_count: int = 16
    audio_rate: int = 44100

    def __post_init__(self):
        if self.frame_count < 1:
            raise ExtractError("frame_count must be >= 1")
        if self.audio_rate < 1:
            raise ExtractError("audio_rate must be >= 1")


def frame_indices(total: int, count: int) -> list[int]:
    """Frame numbers of timestamps t_i = i * duration / count (uniform over [0, duration))."""
    if total < 1:
        raise ExtractError("video has no frames")
    return [min(total - 1, int(round(i * total / count))) for i in range(count)]


def extract_frames(video_path: Path, out_dir: Path, count: int) -> int:
    cap = cv2.VideoCapture(str(video_path))
    if not cap.isOpened():
        raise ExtractError(f"{video_path}: not decodable")
    total = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
    if total < 1:
        cap.release()
        raise ExtractError(f"{video_path}: no video frames")
    wanted = frame_indices(total, count)
    by_index: dict[int, list[int]] = {}
    for slot, idx in enumerate(wanted):
        by_index.setdefault(idx, []).append(slot)
    written = 0
    for idx in range(max(by_index) + 1):
        ok, frame = cap.read()
        if not ok:
            break
        for slot in by_index.get(idx, ()):
            cv2.imwrite(str(out_dir / f"frame_{slot:04d}.png"), frame)
            written += 1
    cap.release()
    if written != count:
        raise ExtractError(f"{video_path}: decoded {written} of {count} requested frames")
    return written


def _resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    if src_rate == dst_rate or len(samples) == 0:
        return samples
    m = int(round(len(samples) * dst_rate / src_rate))
    positions = np.arange(m) * (src_rate / dst_rate)
    return np.interp(positions, np.arange(len(samples)), samples)


def _write_wav(path: Path, samples: np.ndarray, rate: int) -> None:
    pcm = (np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(pcm.tobytes())


def _ffmpeg_audio(video_path: Path, out_wav: Path, rate: int) -> None:
    ffmpeg = shutil.which("ffmpeg")
    if ffmpeg is None:
        raise ExtractError(
            f"{video_path}: audio track is not PCM-in-AVI and no system ffmpeg is available"
        )
    cmd = [ffmpeg, "-y", "-v", "error", "-i", str(video_path),
           "-vn", "-ac", "1", "-ar", str(rate), "-c:a", "pcm_s16le", "-bitexact", str(out_wav)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise ExtractError(f"{video_path}: ffmpeg audio extraction failed: {proc.stderr.strip()}")


def extract_audio(video_path: Path, out_wav: Path, rate: int) -> None:
    """Native path for PCM-in-AVI; falls back to system ffmpeg when present."""
    try:
        samples, src_rate = read_pcm_audio(video_path)
    except AviError:
        _ffmpeg_audio(video_path, out_wav, rate)
        return
    _write_wav(out_wav, _resample_linear(samples, src_rate, rate), rate)


def extract(job: PrepJob) -> dict:
    """Run one job; returns the manifest line (paths relative to out_dir's parent)."""
    video_path = Path(job.video_path)
    if not video_path.is_file():
        raise ExtractError(f"{video_path}: file not found")
    sample_id = video_path.stem
    sample_dir = Path(job.out_dir) / sample_id
    sample_dir.mkdir(parents=True, exist_ok=True)
    extract_frames(video_path, sample_dir, job.frame_count)
    extract_audio(video_path, sample_dir / "audio.wav", job.audio_rate)
    return {
        "id": sample_id,
        "label": job.label,
        "frames_dir": sample_id,
        "audio": f"{sample_id}/audio.wav",
        "split": None,
    }


def manifest_line(entry: dict) -> str:
    return json.dumps(entry)
