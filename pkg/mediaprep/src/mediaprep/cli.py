"""CLI: mediaprep --in videos/ --labels labels.csv --out dataset/.

labels.csv has header columns filename,label. Jobs run in parallel; manifest
lines append under a lock. A video that fails to decode is reported and
skipped, the run continues.
"""

from __future__ import annotations

import argparse
import csv
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .extract import ExtractError, PrepJob, extract, manifest_line

VIDEO_EXTS = (".avi", ".mp4", ".mov", ".mkv", ".webm")


def read_labels(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise ExtractError(f"labels file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["filename", "label"]:
            raise ExtractError("labels.csv must have header columns: filename,label")
        return {row["filename"]: row["label"] for row in reader}


def run_jobs(in_dir: Path, labels: dict[str, str], out_dir: Path,
             frame_count: int, audio_rate: int, jobs: int) -> tuple[int, int]:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    lock = threading.Lock()
    ok_count, fail_count = 0, 0
    videos = [p for p in sorted(in_dir.iterdir()) if p.suffix.lower() in VIDEO_EXTS]

    def one(video: Path):
        nonlocal ok_count, fail_count
        label = labels.get(video.name)
        if label is None:
            with lock:
                print(f"skip {video.name}: no label", file=sys.stderr)
                fail_count += 1
            return
        try:
            entry = extract(PrepJob(video_path=video, out_dir=out_dir, label=label,
                                    frame_count=frame_count, audio_rate=audio_rate))
        except ExtractError as exc:
            with lock:
                print(f"error: {exc}", file=sys.stderr)
                fail_count += 1
            return
        with lock:
            with manifest_path.open("a", encoding="utf-8") as fh:
                fh.write(manifest_line(entry) + "\n")
            ok_count += 1

    manifest_path.write_text("", encoding="utf-8")
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        list(pool.map(one, videos))
    return ok_count, fail_count


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mediaprep")
    parser.add_argument("--in", dest="in_dir", required=True, help="directory of input videos")
    parser.add_argument("--labels", required=True, help="CSV with columns filename,label")
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--frames", type=int, default=16)
    parser.add_argument("--rate", type=int, default=44100)
    parser.add_argument("--jobs", type=int, default=4)
    args = parser.parse_args(argv)
    try:
        labels = read_labels(Path(args.labels))
        in_dir = Path(args.in_dir)
        if not in_dir.is_dir():
            raise ExtractError(f"input directory not found: {in_dir}")
        ok, failed = run_jobs(in_dir, labels, Path(args.out), args.frames, args.rate, args.jobs)
    except ExtractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"prepared {ok} videos, {failed} failed -> {args.out}")
    return 0 if failed == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
