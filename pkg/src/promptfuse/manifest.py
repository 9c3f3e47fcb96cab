"""Dataset manifest loading, deterministic splits, and few-shot subsets.

A manifest is UTF-8 JSON-lines, one sample per line:

    {"id": str, "label": "malicious"|"benign", "frames_dir": str,
     "audio": str, "split": "train"|"test"|null}

Relative paths resolve against the manifest's directory.

All randomized operations draw from numpy's PCG64 generator through explicit
Fisher-Yates procedures, so a (manifest, seed) pair pins the result exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ValidationError

CLASS_NAMES = ("benign", "malicious")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    label: str
    frames_dir: Path
    audio_path: Path
    split: str | None = None


@dataclass(frozen=True)
class FewShotSpec:
    """k samples per class, drawn without replacement. k=0 means zero-shot."""

    k: int
    seed: int = 0

    def __post_init__(self):
        if self.k < 0:
            raise ValidationError(f"few-shot k must be non-negative, got {self.k}")


@dataclass(frozen=True)
class DatasetSplit:
    entries: tuple[ManifestEntry, ...]
    class_counts: dict[str, int] = field(default_factory=dict)

    @staticmethod
    def from_entries(entries) -> "DatasetSplit":
        entries = tuple(entries)
        return DatasetSplit(entries=entries, class_counts=class_distribution(entries))

    def __len__(self) -> int:
        return len(self.entries)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _fisher_yates(rng: np.random.Generator, n: int, k: int | None = None) -> list[int]:
    """First k positions of a Fisher-Yates shuffle of range(n).

    Uses only rng.integers(i, n) so the procedure is pinned by the PCG64
    stream. k=None shuffles everything.
    """
    idx = list(range(n))
    stop = n if k is None else min(k, n)
    for i in range(stop):
        j = int(rng.integers(i, n))
        idx[i], idx[j] = idx[j], idx[i]
    return idx[:stop]


def load_manifest(path) -> list[ManifestEntry]:
    """Parse a JSON-lines manifest, preserving file order.

    Raises DataError if the file is missing, ValidationError on a malformed
    line (naming the line number), an unknown label, or a duplicate id.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON line: {exc}") from exc
            if not isinstance(obj, dict):
                raise ValidationError(f"{path}:{lineno}: expected a JSON object")
            try:
                entry_id = str(obj["id"])
                label = str(obj["label"])
                frames_dir = str(obj["frames_dir"])
                audio = str(obj["audio"])
            except KeyError as exc:
                raise ValidationError(f"{path}:{lineno}: missing field {exc}") from exc
            split = obj.get("split")
            if split is not None:
                split = str(split)
                if split not in ("train", "test"):
                    raise ValidationError(f"{path}:{lineno}: bad split {split!r}")
            if label not in CLASS_NAMES:
                raise ValidationError(f"{path}:{lineno}: unknown label {label!r}")
            if entry_id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate id {entry_id!r}")
            seen.add(entry_id)
            entries.append(
                ManifestEntry(
                    id=entry_id,
                    label=label,
                    frames_dir=base / frames_dir,
                    audio_path=base / audio,
                    split=split,
                )
            )
    return entries


def write_manifest(path, entries) -> None:
    """Inverse of load_manifest; paths are written relative to the target dir."""
    path = Path(path)
    base = path.parent
    with path.open("w", encoding="utf-8") as fh:
        for e in entries:
            obj = {
                "id": e.id,
                "label": e.label,
                "frames_dir": _relativize(e.frames_dir, base),
                "audio": _relativize(e.audio_path, base),
                "split": e.split,
            }
            fh.write(json.dumps(obj) + "\n")


def _relativize(p: Path, base: Path) -> str:
    try:
        return Path(p).relative_to(base).as_posix()
    except ValueError:
        return Path(p).as_posix()


def class_distribution(entries) -> dict[str, int]:
    counts = {name: 0 for name in CLASS_NAMES}
    for e in entries:
        counts[e.label] = counts.get(e.label, 0) + 1
    return counts


def make_splits(entries, test_fraction: float = 0.2, seed: int = 0):
    """Stratified random split into (train, test) DatasetSplits.

    Per class, round(count * test_fraction) entries go to test (half-up
    rounding). Output order follows the input manifest order, so the result is
    a pure function of (entries, test_fraction, seed).
    """
    entries = list(entries)
    if not entries:
        raise ValidationError("make_splits needs at least one entry")
    if not 0.0 <= test_fraction <= 1.0:
        raise ValidationError(f"test_fraction must be in [0, 1], got {test_fraction}")
    rng = _rng(seed)
    test_idx: set[int] = set()
    for label in CLASS_NAMES:
        class_idx = [i for i, e in enumerate(entries) if e.label == label]
        n = len(class_idx)
        if n == 0:
            continue
        n_test = int(np.floor(n * test_fraction + 0.5))
        picked = _fisher_yates(rng, n, n_test)
        test_idx.update(class_idx[i] for i in picked)
    train = [e for i, e in enumerate(entries) if i not in test_idx]
    test = [e for i, e in enumerate(entries) if i in test_idx]
    return DatasetSplit.from_entries(train), DatasetSplit.from_entries(test)


def few_shot_sample(train: DatasetSplit, spec: FewShotSpec) -> DatasetSplit:
    """Draw exactly spec.k entries per class, uniformly without replacement."""
    if spec.k == 0:
        return DatasetSplit.from_entries([])
    rng = _rng(spec.seed)
    chosen: set[int] = set()
    for label in CLASS_NAMES:
        class_idx = [i for i, e in enumerate(train.entries) if e.label == label]
        if len(class_idx) < spec.k:
            raise ValidationError(
                f"class {label!r} has {len(class_idx)} entries, fewer than k={spec.k}"
            )
        picked = _fisher_yates(rng, len(class_idx), spec.k)
        chosen.update(class_idx[i] for i in picked)
    subset = [e for i, e in enumerate(train.entries) if i in chosen]
    return DatasetSplit.from_entries(subset)
