import numpy as np
import pytest

from mediaprep.avi import write_avi


def synthesize_clip(path, seconds=8.0, fps=4.0, size=64, rate=22050, audio="sine"):
    """MJPG+PCM16 AVI whose frame brightness encodes the frame index.

    Frame i is a solid image with value i * floor(255 / (n - 1)) so a decoded
    frame reveals which source timestamp it came from.
    """
    n = int(round(seconds * fps))
    step = 255 // max(n - 1, 1)
    frames = np.zeros((n, size, size, 3), np.uint8)
    for i in range(n):
        frames[i] = i * step
    t = np.arange(int(rate * seconds)) / rate
    if audio == "sine":
        samples = (0.5 * np.sin(2 * np.pi * 440.0 * t) * 32767).astype(np.int16)
    else:
        samples = np.zeros(len(t), np.int16)
    write_avi(path, frames, fps, samples, rate)
    return path


@pytest.fixture
def clip_8s(tmp_path):
    return synthesize_clip(tmp_path / "clip.avi")
