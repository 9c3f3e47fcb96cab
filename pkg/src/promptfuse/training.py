"""Training loop, evaluation, ablation harness, and gradient checking.

The optimizer only ever sees the trainable partition (prompt tokens, audio
projection, logit scale); everything frozen is excluded from the optimizer and
has requires_grad=False, so a run leaves frozen parameters bitwise untouched.

A (config, seed, manifest) triple fully determines the run: parameter init is
keyed per-parameter by seed, shuffling uses PCG64 Fisher-Yates, and frame
sampling is deterministic uniform spacing.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .audio import (
    CLIP_SECONDS,
    DEFAULT_SAMPLE_RATE,
    SpectrogramConfig,
    clip_spectrogram,
    read_wav,
    static_input_shape,
)
from .checkpoint import model_from_checkpoint, serialize_model
from .encoders import (
    EncoderConfig,
    MultimodalClassifier,
    PromptConfig,
    apply_partition,
    trainable_parameter_count,
)
from .errors import DataError, ValidationError
from .fusion import (
    SimilarityMatrix,
    contrastive_loss,
    fuse,
    l2_normalize,
    predict,
    project_audio,
    similarity_logits,
    temporal_pool,
)
from .manifest import (
    CLASS_NAMES,
    DatasetSplit,
    FewShotSpec,
    ManifestEntry,
    _fisher_yates,
    _rng,
    few_shot_sample,
    load_manifest,
    make_splits,
)

_IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


def _default_prompt() -> PromptConfig:
    # reference depth is 12; the toy 4-layer default encoder caps it at 4
    return PromptConfig(text_depth=4, video_depth=4)


@dataclass(frozen=True)
class TrainConfig:
    frames_per_video: int = 16
    epochs: int = 20
    learning_rate: float = 8e-5
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adam"
    audio_enabled: bool = True
    prompt: PromptConfig = field(default_factory=_default_prompt)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    few_shot: FewShotSpec | None = None
    test_fraction: float = 0.2
    spectrogram: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    sample_rate: int = DEFAULT_SAMPLE_RATE
    clip_seconds: float = CLIP_SECONDS
    prenormalize_fusion: bool = False
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if self.frames_per_video < 1:
            raise ValidationError("frames_per_video must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.optimizer != "adam":
            raise ValidationError(f"unsupported optimizer {self.optimizer!r}")
        if len(self.class_names) < 2:
            raise ValidationError("need at least two classes")
        self.prompt.validate_for(self.encoder)

    def to_dict(self) -> dict:
        d = {
            "frames_per_video": self.frames_per_video,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "audio_enabled": self.audio_enabled,
            "prompt": vars(self.prompt) | {},
            "encoder": vars(self.encoder) | {"audio_channels": list(self.encoder.audio_channels)},
            "few_shot": None if self.few_shot is None else {"k": self.few_shot.k, "seed": self.few_shot.seed},
            "test_fraction": self.test_fraction,
            "spectrogram": vars(self.spectrogram) | {},
            "sample_rate": self.sample_rate,
            "clip_seconds": self.clip_seconds,
            "prenormalize_fusion": self.prenormalize_fusion,
            "class_names": list(self.class_names),
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "prompt" in d:
            d["prompt"] = PromptConfig(**d["prompt"])
        if "encoder" in d:
            enc = dict(d["encoder"])
            enc["audio_channels"] = tuple(enc.get("audio_channels", (8, 16, 32, 64)))
            d["encoder"] = EncoderConfig(**enc)
        if d.get("few_shot") is not None:
            d["few_shot"] = FewShotSpec(**d["few_shot"])
        if "spectrogram" in d:
            d["spectrogram"] = SpectrogramConfig(**d["spectrogram"])
        if "class_names" in d:
            d["class_names"] = tuple(d["class_names"])
        return TrainConfig(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    trainable_param_count: int
    config_fingerprint: str

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValidationError(f"accuracy must be in [0, 100], got {self.accuracy}")


METRICS_HEADER = ("epoch", "split", "loss", "accuracy", "trainable_params", "fingerprint")


def metrics_to_csv(records) -> str:
    lines = [",".join(METRICS_HEADER)]
    for r in records:
        lines.append(
            f"{r.epoch},{r.split},{r.loss:.6f},{r.accuracy:.4f},"
            f"{r.trainable_param_count},{r.config_fingerprint}"
        )
    return "\n".join(lines) + "\n"


def write_metrics_csv(records, path) -> None:
    Path(path).write_text(metrics_to_csv(records), encoding="utf-8")


# ---------------------------------------------------------------------------
# sample loading


def uniform_frame_indices(available: int, count: int) -> list[int]:
    """count indices uniformly spaced over range(available), repeating as needed."""
    if available < 1:
        raise DataError("no frames available")
    if count == 1:
        return [0]
    return [int(round(i * (available - 1) / (count - 1))) for i in range(count)]


def sample_frames(entry: ManifestEntry, count: int, image_size: int) -> np.ndarray:
    """Decode count frames at uniformly spaced indices -> float32 [T, 3, H, W].

    Pixels are scaled to [0, 1] then normalized per channel with mean/std 0.5.
    """
    frames_dir = Path(entry.frames_dir)
    if not frames_dir.is_dir():
        raise DataError(f"{entry.id}: frames dir not found: {frames_dir}")
    files = sorted(p for p in frames_dir.iterdir() if p.suffix.lower() in _IMAGE_EXTS)
    if not files:
        raise DataError(f"{entry.id}: no frame images in {frames_dir}")
    out = np.empty((count, 3, image_size, image_size), dtype=np.float32)
    decoded: dict[int, np.ndarray] = {}
    for slot, idx in enumerate(uniform_frame_indices(len(files), count)):
        if idx not in decoded:
            with Image.open(files[idx]) as img:
                img = img.convert("RGB")
                if img.size != (image_size, image_size):
                    img = img.resize((image_size, image_size), Image.BILINEAR)
                arr = np.asarray(img, dtype=np.float32) / 255.0
            decoded[idx] = ((arr - 0.5) / 0.5).transpose(2, 0, 1)
        out[slot] = decoded[idx]
    return out


def build_model(cfg: TrainConfig) -> MultimodalClassifier:
    shape = static_input_shape(cfg.spectrogram, cfg.sample_rate, cfg.clip_seconds)
    return MultimodalClassifier(
        encoder_cfg=cfg.encoder,
        prompt_cfg=cfg.prompt,
        audio_enabled=cfg.audio_enabled,
        audio_input_shape=shape,
        audio_floor_log=math.log(cfg.spectrogram.log_floor),
        seed=cfg.seed,
    )


class _SampleStore:
    """Per-run cache of decoded frames and frozen audio embeddings."""

    def __init__(self, model: MultimodalClassifier, cfg: TrainConfig, entries):
        label_to_index = {name: i for i, name in enumerate(cfg.class_names)}
        self.frames: dict[str, torch.Tensor] = {}
        self.audio: dict[str, torch.Tensor] = {}
        self.labels: dict[str, int] = {}
        for e in entries:
            if e.label not in label_to_index:
                raise ValidationError(f"{e.id}: label {e.label!r} not in {cfg.class_names}")
            self.labels[e.id] = label_to_index[e.label]
            self.frames[e.id] = torch.from_numpy(
                sample_frames(e, cfg.frames_per_video, cfg.encoder.image_size)
            )
        if cfg.audio_enabled:
            ids = [e.id for e in entries]
            specs = []
            for e in entries:
                w = read_wav(e.audio_path)
                spec = clip_spectrogram(w, cfg.spectrogram, cfg.sample_rate, cfg.clip_seconds)
                specs.append(torch.from_numpy(spec.values).float())
            with torch.no_grad():
                for start in range(0, len(ids), 16):
                    chunk = torch.stack(specs[start : start + 16])
                    emb = model.encode_spectrogram(chunk)
                    for off, sid in enumerate(ids[start : start + 16]):
                        self.audio[sid] = emb[off]

    def batch(self, entry_ids):
        frames = torch.stack([self.frames[i] for i in entry_ids])
        labels = torch.tensor([self.labels[i] for i in entry_ids], dtype=torch.long)
        audio = torch.stack([self.audio[i] for i in entry_ids]) if self.audio else None
        return frames, audio, labels


def _batch_logits(model, cfg, frames, audio_emb, text_features) -> SimilarityMatrix:
    b, t = frames.shape[:2]
    flat = frames.reshape(b * t, *frames.shape[2:])
    frame_features = model.encode_frames(flat).reshape(b, t, -1)
    visual = temporal_pool(frame_features)
    audio = None
    if cfg.audio_enabled and audio_emb is not None:
        audio = project_audio(audio_emb, model.audio_projection)
    fused = fuse(visual, audio, cfg.audio_enabled, cfg.prenormalize_fusion)
    return similarity_logits(fused, l2_normalize(text_features), model.scale())


def _eval_split(model, cfg, store, entry_ids) -> tuple[float, float]:
    losses, correct = [], 0
    with torch.no_grad():
        text_features = model.encode_text(list(cfg.class_names))
        for start in range(0, len(entry_ids), cfg.batch_size):
            ids = entry_ids[start : start + cfg.batch_size]
            frames, audio, labels = store.batch(ids)
            sim = _batch_logits(model, cfg, frames, audio, text_features)
            losses.append(float(contrastive_loss(sim, labels)) * len(ids))
            correct += int((predict(sim) == labels).sum())
    n = len(entry_ids)
    return sum(losses) / n, 100.0 * correct / n


def resolve_splits(entries, cfg: TrainConfig) -> tuple[DatasetSplit, DatasetSplit]:
    """Use per-entry split tags when all are present, else a stratified split."""
    entries = list(entries)
    if entries and all(e.split is not None for e in entries):
        train = [e for e in entries if e.split == "train"]
        test = [e for e in entries if e.split == "test"]
        return DatasetSplit.from_entries(train), DatasetSplit.from_entries(test)
    return make_splits(entries, cfg.test_fraction, cfg.seed)


def _load_entries(manifest) -> list[ManifestEntry]:
    if isinstance(manifest, (str, Path)):
        return load_manifest(manifest)
    if isinstance(manifest, DatasetSplit):
        return list(manifest.entries)
    return list(manifest)


def train(cfg: TrainConfig, manifest) -> tuple[bytes, list[MetricsRecord]]:
    """Train the trainable partition; returns (checkpoint bytes, metrics).

    ``manifest`` is a path, a list of ManifestEntry, or a DatasetSplit. A
    few-shot spec with k=0 is refused: zero-shot is evaluate-only.
    """
    if cfg.few_shot is not None and cfg.few_shot.k == 0:
        raise ValidationError("k=0 is zero-shot; nothing to train (use evaluation instead)")
    entries = _load_entries(manifest)
    train_split, test_split = resolve_splits(entries, cfg)
    if cfg.few_shot is not None:
        train_split = few_shot_sample(train_split, cfg.few_shot)
    if len(train_split) == 0:
        raise ValidationError("training split is empty")

    model = build_model(cfg)
    apply_partition(model)
    n_trainable = trainable_parameter_count(model)
    fingerprint = cfg.fingerprint()

    store = _SampleStore(model, cfg, list(train_split.entries) + list(test_split.entries))
    train_ids = [e.id for e in train_split.entries]
    test_ids = [e.id for e in test_split.entries]

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    shuffle_rng = _rng(cfg.seed)
    max_log_scale = math.log(100.0)

    records: list[MetricsRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        order = _fisher_yates(shuffle_rng, len(train_ids))
        epoch_loss, epoch_correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            ids = [train_ids[i] for i in order[start : start + cfg.batch_size]]
            frames, audio, labels = store.batch(ids)
            text_features = model.encode_text(list(cfg.class_names))
            sim = _batch_logits(model, cfg, frames, audio, text_features)
            loss = contrastive_loss(sim, labels)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            with torch.no_grad():
                model.logit_scale.clamp_(max=max_log_scale)
            epoch_loss += float(loss.detach()) * len(ids)
            epoch_correct += int((predict(sim) == labels).sum())
        records.append(
            MetricsRecord(
                epoch=epoch,
                split="train",
                loss=epoch_loss / len(train_ids),
                accuracy=100.0 * epoch_correct / len(train_ids),
                trainable_param_count=n_trainable,
                config_fingerprint=fingerprint,
            )
        )
        if test_ids:
            test_loss, test_acc = _eval_split(model, cfg, store, test_ids)
            records.append(
                MetricsRecord(
                    epoch=epoch,
                    split="test",
                    loss=test_loss,
                    accuracy=test_acc,
                    trainable_param_count=n_trainable,
                    config_fingerprint=fingerprint,
                )
            )
    checkpoint = serialize_model(model, {"train_config": cfg.to_dict(), "fingerprint": fingerprint})
    return checkpoint, records


def evaluate(checkpoint, manifest, split: str = "test") -> MetricsRecord:
    """Accuracy of a checkpointed model over one split; no parameter updates."""
    model, meta = model_from_checkpoint(checkpoint)
    cfg = TrainConfig.from_dict(meta["train_config"])
    entries = _load_entries(manifest)
    if split == "all":
        target = entries
    else:
        train_split, test_split = resolve_splits(entries, cfg)
        target = list((train_split if split == "train" else test_split).entries)
    if not target:
        raise DataError(f"split {split!r} is empty")
    model.eval()
    store = _SampleStore(model, cfg, target)
    loss, acc = _eval_split(model, cfg, store, [e.id for e in target])
    return MetricsRecord(
        epoch=cfg.epochs,
        split=split,
        loss=loss,
        accuracy=acc,
        trainable_param_count=trainable_parameter_count(model),
        config_fingerprint=meta.get("fingerprint", cfg.fingerprint()),
    )


def run_experiment(cfg: TrainConfig, manifest) -> tuple[bytes, list[MetricsRecord]]:
    """train() plus the k=0 zero-shot path (evaluate the untrained model)."""
    if cfg.few_shot is not None and cfg.few_shot.k == 0:
        entries = _load_entries(manifest)
        _, test_split = resolve_splits(entries, cfg)
        if len(test_split) == 0:
            raise DataError("test split is empty")
        model = build_model(cfg)
        apply_partition(model)
        store = _SampleStore(model, cfg, list(test_split.entries))
        loss, acc = _eval_split(model, cfg, store, [e.id for e in test_split.entries])
        record = MetricsRecord(
            epoch=0,
            split="test",
            loss=loss,
            accuracy=acc,
            trainable_param_count=trainable_parameter_count(model),
            config_fingerprint=cfg.fingerprint(),
        )
        checkpoint = serialize_model(
            model, {"train_config": cfg.to_dict(), "fingerprint": cfg.fingerprint()}
        )
        return checkpoint, [record]
    return train(cfg, manifest)


# ---------------------------------------------------------------------------
# ablation harness


_AXIS_KEYS = {
    "modality": {
        "audio_enabled",
        "prompt.enabled_text",
        "prompt.enabled_video",
        "prompt.freeze_text_prompts",
        "prompt.freeze_video_prompts",
    },
    "tokens": {"prompt.text_tokens", "prompt.video_tokens"},
    "depth": {"prompt.text_depth", "prompt.video_depth"},
    "fewshot": {"few_shot.k", "few_shot.seed"},
}


@dataclass(frozen=True)
class AblationGrid:
    axis: str
    points: tuple[dict, ...]

    def __post_init__(self):
        if self.axis not in _AXIS_KEYS:
            raise ValidationError(f"unknown ablation axis {self.axis!r}")
        if not self.points:
            raise ValidationError("ablation grid has no points")
        allowed = _AXIS_KEYS[self.axis]
        for point in self.points:
            stray = set(point) - allowed
            if stray:
                raise ValidationError(
                    f"override keys {sorted(stray)} do not belong to axis {self.axis!r}"
                )


def builtin_grid(axis: str, frozen_prompts: bool = False, fewshot_seed: int = 0) -> AblationGrid:
    """The sweep points matching the published ablation tables.

    frozen_prompts switches the "video prompts not learnable" rows from
    removing the prompt parameters to keeping them frozen.
    """
    if axis == "modality":
        video_off = (
            {"prompt.freeze_video_prompts": True}
            if frozen_prompts
            else {"prompt.enabled_video": False}
        )
        points = (
            {},
            {"audio_enabled": False},
            {"audio_enabled": False, **video_off},
            {**video_off},
        )
    elif axis == "tokens":
        points = tuple(
            {"prompt.text_tokens": 10, "prompt.video_tokens": v} for v in (10, 8, 6, 4)
        )
    elif axis == "depth":
        points = tuple(
            {"prompt.text_depth": d, "prompt.video_depth": d} for d in (12, 8, 4, 2)
        )
    elif axis == "fewshot":
        points = tuple(
            {"few_shot.k": k, "few_shot.seed": fewshot_seed} for k in (0, 1, 2, 4, 8, 16)
        )
    else:
        raise ValidationError(f"unknown ablation axis {axis!r}")
    return AblationGrid(axis=axis, points=points)


def apply_override(cfg: TrainConfig, override: dict) -> TrainConfig:
    """Apply dotted-key overrides ("prompt.video_tokens") to a TrainConfig."""
    top: dict = {}
    nested: dict[str, dict] = {}
    for key, value in override.items():
        if "." in key:
            head, leaf = key.split(".", 1)
            nested.setdefault(head, {})[leaf] = value
        else:
            top[key] = value
    for head, leaves in nested.items():
        current = getattr(cfg, head)
        if head == "few_shot" and current is None:
            current = FewShotSpec(k=0)
        top[head] = replace(current, **leaves)
    return replace(cfg, **top)


def ablate(grid: AblationGrid, base: TrainConfig, manifest) -> list[tuple[dict, MetricsRecord]]:
    """Run train+evaluate per grid point with the base seed; final test metrics."""
    entries = _load_entries(manifest)
    results = []
    for point in grid.points:
        cfg = apply_override(base, point)
        _, records = run_experiment(cfg, entries)
        final_test = [r for r in records if r.split == "test"][-1]
        results.append((point, final_test))
    return results


def ablation_to_csv(grid: AblationGrid, base: TrainConfig, results) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    if grid.axis == "modality":
        writer.writerow(
            ["text_modality", "video_modality", "audio_modality",
             "learn_text", "learn_video", "learn_audio", "accuracy"]
        )
        for point, record in results:
            cfg = apply_override(base, point)
            p = cfg.prompt
            writer.writerow(
                [1, 1, int(cfg.audio_enabled),
                 int(p.text_active and not p.freeze_text_prompts),
                 int(p.video_active and not p.freeze_video_prompts),
                 int(cfg.audio_enabled),
                 f"{record.accuracy:.4f}"]
            )
    elif grid.axis == "tokens":
        writer.writerow(["text_tokens", "video_tokens", "accuracy"])
        for point, record in results:
            cfg = apply_override(base, point)
            writer.writerow([cfg.prompt.text_tokens, cfg.prompt.video_tokens, f"{record.accuracy:.4f}"])
    elif grid.axis == "depth":
        writer.writerow(["text_depth", "video_depth", "accuracy"])
        for point, record in results:
            cfg = apply_override(base, point)
            writer.writerow([cfg.prompt.text_depth, cfg.prompt.video_depth, f"{record.accuracy:.4f}"])
    else:
        writer.writerow(["k", "accuracy"])
        for point, record in results:
            writer.writerow([point["few_shot.k"], f"{record.accuracy:.4f}"])
    return out.getvalue()


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(cfg: TrainConfig | None = None, epsilon: float = 1e-3) -> float:
    """Max relative error between autograd and central differences.

    Runs in float64 on one fixed synthetic batch. Prompt tokens and the logit
    scale are perturbed one coordinate at a time with a full forward pass per
    evaluation. The audio projection is swept through the affine identity
    (W + eps*E_ij) x = W x + eps * x_j * e_i, which reproduces the perturbed
    loss exactly while keeping the 0.5M-parameter sweep tractable; its
    perturbed losses are evaluated by an independent numpy implementation of
    the fusion/loss math.

    Relative error is measured per parameter tensor as
    ||analytic - numeric|| / max(||analytic||, ||numeric||); pointwise ratios
    on coordinates whose gradient is ~0 would only report central-difference
    truncation noise, not gradient agreement.
    """
    cfg = cfg or TrainConfig()
    model = build_model(cfg).double()
    apply_partition(model)
    model.eval()

    gen = _rng(cfg.seed + 1)
    batch, t = 2, min(2, cfg.frames_per_video)
    size = cfg.encoder.image_size
    frames = torch.from_numpy(
        (gen.uniform(0.0, 1.0, (batch * t, 3, size, size)) - 0.5) / 0.5
    )
    labels = torch.arange(batch) % len(cfg.class_names)
    class_names = list(cfg.class_names)

    audio_emb = None
    if cfg.audio_enabled:
        shape = model.audio_encoder.input_shape
        floor = model.audio_encoder.floor_log
        values = floor + gen.uniform(0.0, -floor * 0.5, (batch, *shape))
        with torch.no_grad():
            audio_emb = model.encode_spectrogram(torch.from_numpy(values))

    def forward_loss() -> torch.Tensor:
        text = model.encode_text(class_names)
        frame_features = model.encode_frames(frames).reshape(batch, t, -1)
        visual = temporal_pool(frame_features)
        audio = None
        if cfg.audio_enabled:
            audio = project_audio(audio_emb, model.audio_projection)
        fused = fuse(visual, audio, cfg.audio_enabled, cfg.prenormalize_fusion)
        sim = similarity_logits(fused, l2_normalize(text), model.scale())
        return contrastive_loss(sim, labels)

    loss = forward_loss()
    model.zero_grad(set_to_none=True)
    loss.backward()
    analytic = {
        name: p.grad.detach().clone()
        for name, p in model.named_parameters()
        if p.requires_grad
    }

    max_rel = 0.0

    def update(a: np.ndarray, n: np.ndarray) -> None:
        nonlocal max_rel
        denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-12)
        max_rel = max(max_rel, float(np.linalg.norm(a - n)) / denom)

    # prompt tokens and logit scale: brute-force central differences
    with torch.no_grad():
        for name, param in model.named_parameters():
            if not param.requires_grad or name.startswith("audio_projection."):
                continue
            numeric = torch.zeros_like(param).view(-1)
            flat = param.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = float(forward_loss())
                flat[i] = orig - epsilon
                down = float(forward_loss())
                flat[i] = orig
                numeric[i] = (up - down) / (2.0 * epsilon)
            update(analytic[name].numpy().ravel(), numeric.numpy().ravel())

    # projection: exact affine re-evaluation, vectorized over columns
    if cfg.audio_enabled:
        with torch.no_grad():
            text_n = l2_normalize(model.encode_text(class_names)).numpy()
            frame_features = model.encode_frames(frames).reshape(batch, t, -1)
            visual = temporal_pool(frame_features).numpy()
            a = audio_emb.numpy()
            w = model.audio_projection.weight.numpy()
            b = model.audio_projection.bias.numpy()
            scale = float(model.scale())
        y0 = a @ w.T + b  # [B, 512]
        lbl = labels.numpy()

        def np_loss(y: np.ndarray) -> np.ndarray:
            """Loss for stacked perturbations: y is [..., B, 512]."""
            f = visual + y
            f = f / np.linalg.norm(f, axis=-1, keepdims=True)
            logits = scale * (f @ text_n.T)  # [..., B, C]
            shifted = logits - logits.max(axis=-1, keepdims=True)
            logz = np.log(np.exp(shifted).sum(axis=-1)) + logits.max(axis=-1)
            nll = logz - np.take_along_axis(
                logits, np.broadcast_to(lbl, logits.shape[:-1])[..., None], axis=-1
            )[..., 0]
            return nll.mean(axis=-1)

        out_dim, in_dim = w.shape
        numeric_w = np.empty_like(w)
        for i in range(out_dim):
            plus = np.repeat(y0[None], in_dim, axis=0)
            plus[:, :, i] += epsilon * a.T
            minus = np.repeat(y0[None], in_dim, axis=0)
            minus[:, :, i] -= epsilon * a.T
            numeric_w[i] = (np_loss(plus) - np_loss(minus)) / (2.0 * epsilon)
        update(analytic["audio_projection.weight"].numpy(), numeric_w)

        plus = np.repeat(y0[None], out_dim, axis=0)
        plus[np.arange(out_dim), :, np.arange(out_dim)] += epsilon
        minus = np.repeat(y0[None], out_dim, axis=0)
        minus[np.arange(out_dim), :, np.arange(out_dim)] -= epsilon
        numeric_b = (np_loss(plus) - np_loss(minus)) / (2.0 * epsilon)
        update(analytic["audio_projection.bias"].numpy(), numeric_b)

    return max_rel
