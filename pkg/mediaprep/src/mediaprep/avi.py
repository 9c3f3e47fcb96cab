"""Minimal RIFF/AVI muxing and PCM-audio demuxing.

There is no ffmpeg binary in some of our environments, so audio extraction
from AVI containers (MJPG video + interleaved PCM audio) is done natively.
The muxer exists mainly to synthesize test clips; it writes the classic
single-RIFF AVI layout with an idx1 index, which both OpenCV and ffmpeg read.
"""

from __future__ import annotations

import struct
from pathlib import Path

import cv2
import numpy as np

AVIF_HASINDEX = 0x10
AVIIF_KEYFRAME = 0x10


class AviError(Exception):
    pass


def _chunk(fourcc: bytes, payload: bytes) -> bytes:
    data = struct.pack("<4sI", fourcc, len(payload)) + payload
    if len(payload) & 1:
        data += b"\0"
    return data


def _list(fourcc: bytes, payload: bytes) -> bytes:
    return _chunk(b"LIST", fourcc + payload)


def write_avi(path, frames: np.ndarray, fps: float, audio: np.ndarray, audio_rate: int,
              jpeg_quality: int = 95) -> None:
    """Write an MJPG+PCM16 AVI.

    frames: uint8 [N, H, W, 3] in RGB order; audio: int16 mono samples.
    """
    frames = np.asarray(frames, dtype=np.uint8)
    audio = np.asarray(audio, dtype="<i2")
    n, height, width = frames.shape[0], frames.shape[1], frames.shape[2]
    if n < 1:
        raise AviError("need at least one frame")

    encoded = []
    for frame in frames:
        ok, buf = cv2.imencode(".jpg", frame[:, :, ::-1], [cv2.IMWRITE_JPEG_QUALITY, jpeg_quality])
        if not ok:
            raise AviError("JPEG encoding failed")
        encoded.append(buf.tobytes())

    # interleave: per video frame, the audio samples covering its display time
    bounds = [int(round(i * audio_rate / fps)) for i in range(n + 1)]
    bounds[-1] = max(bounds[-1], len(audio))
    audio_slices = [audio[bounds[i] : min(bounds[i + 1], len(audio))] for i in range(n)]

    movi_payload = b""
    index = []
    for i in range(n):
        for fourcc, payload in ((b"00dc", encoded[i]), (b"01wb", audio_slices[i].tobytes())):
            index.append((fourcc, len(movi_payload) + 4, len(payload)))
            movi_payload += _chunk(fourcc, payload)
    # index offsets are relative to the position of the 'movi' fourcc
    idx = b"".join(
        struct.pack("<4sIII", fourcc, AVIIF_KEYFRAME, off, size) for fourcc, off, size in index
    )

    max_chunk = max(len(e) for e in encoded)
    avih = struct.pack(
        "<IIIIIIIIII4I",
        int(round(1_000_000 / fps)), 0, 0, AVIF_HASINDEX, n, 0, 2, max_chunk,
        width, height, 0, 0, 0, 0,
    )
    strh_v = struct.pack(
        "<4s4sIHHIIIIIIII4H",
        b"vids", b"MJPG", 0, 0, 0, 0, 1000, int(round(fps * 1000)), 0, n,
        max_chunk, 0, 0, 0, 0, width, height,
    )
    strf_v = struct.pack(
        "<IiiHH4sIiiII", 40, width, height, 1, 24, b"MJPG", width * height * 3, 0, 0, 0, 0
    )
    strh_a = struct.pack(
        "<4s4sIHHIIIIIIII4H",
        b"auds", b"\0\0\0\0", 0, 0, 0, 0, 1, audio_rate, 0, len(audio), 0, 0xFFFFFFFF, 2,
        0, 0, 0, 0,
    )
    strf_a = struct.pack("<HHIIHH", 1, 1, audio_rate, audio_rate * 2, 2, 16)

    hdrl = _list(
        b"hdrl",
        _chunk(b"avih", avih)
        + _list(b"strl", _chunk(b"strh", strh_v) + _chunk(b"strf", strf_v))
        + _list(b"strl", _chunk(b"strh", strh_a) + _chunk(b"strf", strf_a)),
    )
    movi = _list(b"movi", movi_payload)
    body = b"AVI " + hdrl + movi + _chunk(b"idx1", idx)
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def _iter_chunks(data: bytes, start: int, end: int):
    pos = start
    while pos + 8 <= end:
        fourcc = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        yield fourcc, pos + 8, size
        pos += 8 + size + (size & 1)


def read_pcm_audio(path) -> tuple[np.ndarray, int]:
    """Extract the first PCM audio stream of an AVI as (float64 mono, rate).

    Handles PCM16 and IEEE-float32 streams; raises AviError for anything else
    (compressed audio needs a real decoder).
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"AVI ":
        raise AviError(f"{path}: not an AVI container")

    stream_types: list[bytes] = []
    audio_fmt = None
    audio_stream = None

    def walk(start: int, end: int):
        nonlocal audio_fmt, audio_stream
        for fourcc, body, size in _iter_chunks(data, start, end):
            if fourcc == b"LIST":
                kind = data[body : body + 4]
                if kind == b"strl":
                    _parse_strl(body + 4, body + size)
                else:
                    walk(body + 4, body + size)

    def _parse_strl(start: int, end: int):
        nonlocal audio_fmt, audio_stream
        fcc_type = None
        for fourcc, body, size in _iter_chunks(data, start, end):
            if fourcc == b"strh":
                fcc_type = data[body : body + 4]
                stream_types.append(fcc_type)
            elif fourcc == b"strf" and fcc_type == b"auds":
                if audio_fmt is None:
                    audio_fmt = struct.unpack_from("<HHIIHH", data, body)
                    audio_stream = len(stream_types) - 1

    walk(12, len(data))
    if audio_fmt is None:
        raise AviError(f"{path}: no audio stream")
    tag, channels, rate, _, _, bits = audio_fmt
    wanted = f"{audio_stream:02d}wb".encode()

    payload = bytearray()
    for fourcc, body, size in _iter_chunks(data, 12, len(data)):
        if fourcc == b"LIST" and data[body : body + 4] == b"movi":
            for sub, sub_body, sub_size in _iter_chunks(data, body + 4, body + size):
                if sub == wanted:
                    payload += data[sub_body : sub_body + sub_size]
    if tag == 1 and bits == 16:
        samples = np.frombuffer(bytes(payload), dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        samples = np.frombuffer(bytes(payload), dtype="<f4").astype(np.float64)
    else:
        raise AviError(f"{path}: unsupported audio encoding (tag={tag}, bits={bits})")
    if channels > 1:
        usable = len(samples) - len(samples) % channels
        samples = samples[:usable].reshape(-1, channels).mean(axis=1)
    return samples, int(rate)
