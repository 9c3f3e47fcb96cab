"""Temporal pooling, audio projection, additive fusion, and the contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ValidationError

_NORM_TOL = 1e-5


class ProjectionLayer(nn.Linear):
    """Trainable affine map adapting audio embeddings (1024) to the shared width (512)."""

    def __init__(self):
        super().__init__(1024, 512, bias=True)


@dataclass
class SimilarityMatrix:
    """Scaled cosine logits between fused sample features and class text features."""

    logits: torch.Tensor  # [B, C]
    logit_scale: float


def temporal_pool(frame_features: torch.Tensor) -> torch.Tensor:
    """Mean over the frame axis: [T, 512] -> [512], or [B, T, 512] -> [B, 512]."""
    if frame_features.ndim not in (2, 3) or frame_features.shape[-2] < 1:
        raise ValidationError(
            f"temporal_pool wants [T, D] or [B, T, D] with T >= 1, got {tuple(frame_features.shape)}"
        )
    return frame_features.mean(dim=-2)


def project_audio(audio_embedding: torch.Tensor, layer: nn.Linear) -> torch.Tensor:
    """Affine map W x + b: [..., 1024] -> [..., 512]."""
    if audio_embedding.shape[-1] != layer.in_features:
        raise ValidationError(
            f"audio embedding has width {audio_embedding.shape[-1]}, expected {layer.in_features}"
        )
    return layer(audio_embedding)


def fuse(
    visual: torch.Tensor,
    audio: torch.Tensor | None,
    audio_enabled: bool = True,
    prenormalize: bool = False,
) -> torch.Tensor:
    """Additive fusion followed by L2 normalization.

    With prenormalize=True both inputs are normalized before the sum (an
    equivalent-direction variant); the default normalizes once, after addition.
    Audio disabled (or None) reduces to the normalized visual features.
    """
    if audio_enabled and audio is not None:
        if visual.shape != audio.shape:
            raise ValidationError(
                f"visual {tuple(visual.shape)} and audio {tuple(audio.shape)} shapes differ"
            )
        if prenormalize:
            visual = l2_normalize(visual)
            audio = l2_normalize(audio)
        summed = visual + audio
    else:
        summed = visual
    return l2_normalize(summed)


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if bool((norm < 1e-12).any()):
        raise ValidationError("degenerate (zero-norm) feature vector in fusion")
    return x / norm


def similarity_logits(
    fused: torch.Tensor, text: torch.Tensor, logit_scale: float | torch.Tensor
) -> SimilarityMatrix:
    """logits[i][j] = logit_scale * <fused_i, text_j>; rows must be unit norm."""
    if fused.ndim != 2 or text.ndim != 2 or fused.shape[1] != text.shape[1]:
        raise ValidationError(
            f"need [B, D] and [C, D] with matching D, got {tuple(fused.shape)} vs {tuple(text.shape)}"
        )
    with torch.no_grad():
        for name, m in (("fused", fused), ("text", text)):
            err = float((m.norm(dim=1) - 1.0).abs().max())
            if err > _NORM_TOL:
                raise ValidationError(f"{name} rows not L2-normalized (max deviation {err:.2e})")
    scale = logit_scale if isinstance(logit_scale, torch.Tensor) else torch.as_tensor(logit_scale)
    scale_value = float(scale.detach())
    if scale_value <= 0:
        raise ValidationError("logit_scale must be positive")
    return SimilarityMatrix(logits=scale * fused @ text.T, logit_scale=scale_value)


def contrastive_loss(sim: SimilarityMatrix, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of softmax(logits) against the ground-truth class index."""
    logits = sim.logits
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValidationError("labels must be [B] matching the logits batch")
    if bool((labels < 0).any()) or bool((labels >= logits.shape[1]).any()):
        raise ValidationError("label index out of range")
    log_probs = torch.log_softmax(logits, dim=1)
    return -log_probs[torch.arange(logits.shape[0]), labels].mean()


def predict(sim: SimilarityMatrix) -> torch.Tensor:
    """Per row, the index of the maximal logit; ties break to the lowest index."""
    if sim.logits.shape[1] < 1:
        raise ValidationError("similarity matrix has no classes")
    return sim.logits.argmax(dim=1)
