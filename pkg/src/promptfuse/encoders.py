"""Frozen text/vision/audio encoders with per-layer learnable prompt tokens.

Only three groups of parameters ever train: the prompt tokens of the text and
video branches, the 1024->512 audio projection, and the logit scale. Everything
else is a frozen random stand-in for a pre-trained backbone, initialized
per-parameter from a hash of (seed, parameter name) so a parameter's initial
values do not depend on which other parameters exist.

Prompt injection is "deep": for the first D transformer layers, the prompt
positions in the token sequence are replaced by that layer's own learnable
vectors before the layer runs; past depth D, the prompt positions simply carry
the previous layer's outputs forward. Prompts sit after the start/class token
and receive no positional embedding.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ValidationError
from .fusion import ProjectionLayer

PAD_ID, START_ID, END_ID = 0, 1, 2
_RESERVED_IDS = 3

TEXT_EMBED_DIM = 512
AUDIO_EMBED_DIM = 1024

_NAME_RE = re.compile(r"^[a-z]+( [a-z]+)*$")


@dataclass(frozen=True)
class PromptConfig:
    """Token counts and depths for deep prompt learning, per branch.

    Depth 0 (or enabled_*=False) turns a branch's prompting off entirely: its
    prompt parameters are not created. freeze_*_prompts keeps the parameters
    but moves them to the frozen set (the alternate reading of "not learnable"
    used by the modality ablation).
    """

    text_tokens: int = 12
    video_tokens: int = 12
    text_depth: int = 12
    video_depth: int = 12
    enabled_text: bool = True
    enabled_video: bool = True
    freeze_text_prompts: bool = False
    freeze_video_prompts: bool = False

    @property
    def text_active(self) -> bool:
        return self.enabled_text and self.text_depth > 0

    @property
    def video_active(self) -> bool:
        return self.enabled_video and self.video_depth > 0

    def tokens_for(self, kind: str) -> int:
        return self.text_tokens if kind == "text" else self.video_tokens

    def depth_for(self, kind: str) -> int:
        return self.text_depth if kind == "text" else self.video_depth

    def active_for(self, kind: str) -> bool:
        return self.text_active if kind == "text" else self.video_active

    def validate_for(self, encoder: "EncoderConfig") -> None:
        for kind, enabled in (("text", self.enabled_text), ("patch", self.enabled_video)):
            depth = self.depth_for(kind)
            if depth < 0:
                raise ValidationError(f"{kind} prompt depth must be >= 0, got {depth}")
            if enabled and depth > encoder.layers:
                raise ValidationError(
                    f"{kind} prompt depth {depth} exceeds encoder layer count {encoder.layers}"
                )
            if self.active_for(kind) and self.tokens_for(kind) < 1:
                raise ValidationError(f"{kind} prompt token count must be >= 1 when enabled")


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions of the frozen backbone stand-ins.

    Defaults are the toy scale used throughout tests; the text/vision output
    width (512) and the audio output width (1024) are fixed interface
    dimensions and are validated, not tunable.
    """

    width: int = 64
    layers: int = 4
    heads: int = 4
    patch_size: int = 8
    image_size: int = 32
    vocab_size: int = 512
    max_text_len: int = 16
    audio_channels: tuple[int, ...] = (8, 16, 32, 64)
    embed_dim: int = TEXT_EMBED_DIM
    audio_embed_dim: int = AUDIO_EMBED_DIM

    def __post_init__(self):
        if self.width % self.heads:
            raise ValidationError(f"width {self.width} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValidationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim != TEXT_EMBED_DIM:
            raise ValidationError(f"text/vision output dim is fixed at {TEXT_EMBED_DIM}")
        if self.audio_embed_dim != AUDIO_EMBED_DIM:
            raise ValidationError(f"audio output dim is fixed at {AUDIO_EMBED_DIM}")
        if self.layers < 1:
            raise ValidationError("need at least one transformer layer")
        if self.vocab_size <= _RESERVED_IDS:
            raise ValidationError(f"vocab_size must exceed {_RESERVED_IDS}")
        if self.max_text_len < 3:
            raise ValidationError("max_text_len must fit START + word + END")
        if len(self.audio_channels) < 1 or any(c < 1 for c in self.audio_channels):
            raise ValidationError("audio_channels must be non-empty positive widths")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class TokenSequence:
    """Activations flowing through one branch: [batch, seq_len, width]."""

    vectors: torch.Tensor
    kind: str  # "text" | "patch"

    def __post_init__(self):
        if self.kind not in ("text", "patch"):
            raise ValidationError(f"unknown token kind {self.kind!r}")
        if self.vectors.ndim != 3 or self.vectors.shape[1] < 1:
            raise ValidationError("TokenSequence wants [batch, seq_len>=1, width]")


def _word_id(word: str, vocab_size: int) -> int:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    return _RESERVED_IDS + int.from_bytes(digest[:8], "little") % (vocab_size - _RESERVED_IDS)


def tokenize_class_name(name: str, cfg: EncoderConfig) -> list[int]:
    """Word-level ids with START/END markers, padded to max_text_len.

    Word ids are a stable SHA-256 reduction into the vocab range, so the same
    name always maps to the same id list.
    """
    if not name or not _NAME_RE.match(name):
        raise ValidationError(f"class name must be non-empty lowercase words, got {name!r}")
    ids = [START_ID] + [_word_id(w, cfg.vocab_size) for w in name.split()] + [END_ID]
    if len(ids) > cfg.max_text_len:
        raise ValidationError(
            f"class name {name!r} tokenizes to {len(ids)} ids, max_text_len is {cfg.max_text_len}"
        )
    return ids + [PAD_ID] * (cfg.max_text_len - len(ids))


def inject_prompts(
    seq: TokenSequence,
    prompts: torch.Tensor | None,
    layer_index: int,
    cfg: PromptConfig,
) -> TokenSequence:
    """Apply the deep-prompting rule at one layer boundary.

    Layer 0 inserts the prompt block directly after position 0 (start/class
    token), growing the sequence; layers 1..depth-1 overwrite the prompt
    positions with that layer's fresh vectors; layers >= depth pass everything
    through unchanged.
    """
    if not cfg.active_for(seq.kind):
        return seq
    depth = cfg.depth_for(seq.kind)
    n = cfg.tokens_for(seq.kind)
    if layer_index >= depth:
        return seq
    if prompts is None:
        raise ValidationError(f"layer {layer_index} < depth {depth} needs prompt vectors")
    if prompts.shape != (n, seq.vectors.shape[-1]):
        raise ValidationError(
            f"prompt shape {tuple(prompts.shape)} does not match "
            f"({n}, {seq.vectors.shape[-1]})"
        )
    x = seq.vectors
    block = prompts.unsqueeze(0).expand(x.shape[0], -1, -1)
    if layer_index == 0:
        out = torch.cat([x[:, :1], block, x[:, 1:]], dim=1)
    else:
        out = torch.cat([x[:, :1], block, x[:, 1 + n :]], dim=1)
    return TokenSequence(vectors=out, kind=seq.kind)


class TransformerBlock(nn.Module):
    """Pre-LN block: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln_2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, 4 * width)
        self.gelu = nn.GELU()
        self.fc2 = nn.Linear(4 * width, width)

    def forward(self, x):
        a = self.ln_1(x)
        a, _ = self.attn(a, a, a, need_weights=False)
        x = x + a
        return x + self.fc2(self.gelu(self.fc1(self.ln_2(x))))


class _PromptedTransformer(nn.Module):
    """Shared layer loop for the text and vision branches."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(cfg.width, cfg.heads) for _ in range(cfg.layers))

    def run(self, seq: TokenSequence, prompts, prompt_cfg: PromptConfig) -> TokenSequence:
        for i, block in enumerate(self.blocks):
            layer_prompts = None
            if prompts is not None and i < len(prompts):
                layer_prompts = prompts[i]
            seq = inject_prompts(seq, layer_prompts, i, prompt_cfg)
            seq = TokenSequence(vectors=block(seq.vectors), kind=seq.kind)
        return seq


class TextEncoder(_PromptedTransformer):
    def __init__(self, cfg: EncoderConfig):
        super().__init__(cfg)
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.width)
        self.positional = nn.Parameter(torch.empty(cfg.max_text_len, cfg.width))
        self.ln_final = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, TEXT_EMBED_DIM, bias=False)

    def forward(self, token_ids: torch.Tensor, prompts, prompt_cfg: PromptConfig):
        """[C, max_text_len] int ids -> [C, 512] END-token embeddings."""
        if token_ids.ndim != 2 or token_ids.shape[1] != self.cfg.max_text_len:
            raise ValidationError(
                f"token ids must be [C, {self.cfg.max_text_len}], got {tuple(token_ids.shape)}"
            )
        end_idx = (token_ids == END_ID).int().argmax(dim=1)
        x = self.token_embedding(token_ids) + self.positional
        seq = self.run(TokenSequence(vectors=x, kind="text"), prompts, prompt_cfg)
        if prompt_cfg.text_active:
            end_idx = end_idx + prompt_cfg.text_tokens
        rows = seq.vectors[torch.arange(token_ids.shape[0]), end_idx]
        return self.proj(self.ln_final(rows))


class VisionEncoder(_PromptedTransformer):
    def __init__(self, cfg: EncoderConfig):
        super().__init__(cfg)
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.width, cfg.patch_size, stride=cfg.patch_size, bias=False)
        self.class_token = nn.Parameter(torch.empty(cfg.width))
        self.positional = nn.Parameter(torch.empty(1 + cfg.n_patches, cfg.width))
        self.ln_final = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, TEXT_EMBED_DIM, bias=False)

    def forward(self, frames: torch.Tensor, prompts, prompt_cfg: PromptConfig):
        """[N, 3, image_size, image_size] -> [N, 512] class-token embeddings."""
        s = self.cfg.image_size
        if frames.ndim != 4 or frames.shape[1:] != (3, s, s):
            raise ValidationError(
                f"frames must be [N, 3, {s}, {s}], got {tuple(frames.shape)}"
            )
        x = self.patch_embed(frames)  # [N, width, g, g]
        x = x.flatten(2).transpose(1, 2)  # [N, n_patches, width]
        cls = self.class_token.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional
        seq = self.run(TokenSequence(vectors=x, kind="patch"), prompts, prompt_cfg)
        return self.proj(self.ln_final(seq.vectors[:, 0]))


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, groups: int = 4):
        super().__init__()
        g = math.gcd(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(g, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(g, channels)

    def forward(self, x):
        h = torch.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return torch.relu(x + h)


class AudioEncoder(nn.Module):
    """Small frozen residual conv stack: log-spectrogram -> [1024].

    GroupNorm keeps the module stateless (no running statistics to mutate
    during training); the input is affinely rescaled by the known log floor so
    a random frozen stack sees O(1) activations. A fixed frequency-coordinate
    channel rides along with the spectrogram: without it, a random conv stack
    followed by global pooling is nearly translation-invariant along the
    frequency axis and cannot tell tones apart.
    """

    def __init__(self, cfg: EncoderConfig, input_shape: tuple[int, int], floor_log: float):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.floor_log = float(floor_log)
        ch = cfg.audio_channels
        self.stem = nn.Conv2d(2, ch[0], 3, stride=2, padding=1)
        self.stem_norm = nn.GroupNorm(math.gcd(4, ch[0]), ch[0])
        stages = []
        for i in range(1, len(ch)):
            stages.append(ResidualBlock(ch[i - 1]))
            stages.append(nn.Conv2d(ch[i - 1], ch[i], 3, stride=2, padding=1))
            stages.append(nn.GroupNorm(math.gcd(4, ch[i]), ch[i]))
            stages.append(nn.ReLU())
        stages.append(ResidualBlock(ch[-1]))
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(ch[-1], AUDIO_EMBED_DIM)

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        """[B, freq_bins, time] (or unbatched [freq_bins, time]) -> [B, 1024]."""
        squeeze = values.ndim == 2
        if squeeze:
            values = values.unsqueeze(0)
        if values.ndim != 3 or tuple(values.shape[1:]) != self.input_shape:
            raise ValidationError(
                f"spectrogram must be [freq, time] = {self.input_shape}, "
                f"got {tuple(values.shape)}"
            )
        x = (values - self.floor_log) / abs(self.floor_log)
        x = x.unsqueeze(1)
        freq = torch.linspace(-1.0, 1.0, x.shape[2], dtype=x.dtype, device=x.device)
        coords = freq.view(1, 1, -1, 1).expand(x.shape[0], 1, -1, x.shape[3])
        x = torch.cat([x, coords], dim=1)
        x = torch.relu(self.stem_norm(self.stem(x)))
        for stage in self.stages:
            x = stage(x)
        x = x.mean(dim=(2, 3))
        out = self.head(x)
        return out[0] if squeeze else out


def _param_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


_EMBEDDING_SUFFIXES = (
    "token_embedding.weight",
    "positional",
    "class_token",
)


def init_parameters(model: nn.Module, seed: int) -> None:
    """Seeded init mirroring standard transformer practice.

    Embedding-like tensors and prompt tokens draw from N(0, 0.02); weight
    matrices and conv kernels use fan-in-scaled uniform init (the attention
    in-projection uses Xavier, everything else the Linear/Conv default bound
    1/sqrt(fan_in)); norm gains are 1, biases 0. Flat small-variance init on
    the weight matrices is not an option here: it collapses attention to
    near-uniform mixing and every class name maps to almost the same frozen
    embedding, which kills the training signal downstream.

    Each parameter gets its own generator keyed by (seed, qualified name), so
    initial values are independent of the rest of the parameter set.
    """
    norm_params = set()
    for mod_name, mod in model.named_modules():
        if isinstance(mod, (nn.LayerNorm, nn.GroupNorm)):
            for p_name, _ in mod.named_parameters(recurse=False):
                norm_params.add(f"{mod_name}.{p_name}" if mod_name else p_name)
    with torch.no_grad():
        for name, param in model.named_parameters():
            gen = torch.Generator().manual_seed(_param_seed(seed, name))
            if name == "logit_scale":
                param.fill_(math.log(1.0 / 0.07))
            elif name in norm_params:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                param.zero_()
            elif name.endswith(_EMBEDDING_SUFFIXES) or ".prompts" in name or name.startswith(
                ("text_prompts", "video_prompts")
            ):
                values = torch.empty(param.shape, dtype=torch.float32)
                values.normal_(0.0, 0.02, generator=gen)
                param.copy_(values)
            else:
                fan_in = param.shape[1] * (param[0, 0].numel() if param.ndim > 2 else 1)
                if name.endswith("attn.in_proj_weight"):
                    fan_out = param.shape[0]
                    bound = math.sqrt(6.0 / (fan_in + fan_out))
                else:
                    bound = 1.0 / math.sqrt(fan_in)
                values = torch.empty(param.shape, dtype=torch.float32)
                values.uniform_(-bound, bound, generator=gen)
                param.copy_(values)


@dataclass(frozen=True)
class ParameterPartition:
    """Exhaustive split of parameter names into frozen and trainable sets."""

    frozen: frozenset[str]
    trainable: frozenset[str]

    def __post_init__(self):
        overlap = self.frozen & self.trainable
        if overlap:
            raise ValidationError(f"partition overlap: {sorted(overlap)}")


class MultimodalClassifier(nn.Module):
    """The full model: frozen encoders plus the trainable prompt/projection set.

    Prompt parameters live on this module (not inside the encoders) so the
    frozen/trainable partition is visible directly in the parameter names.
    """

    def __init__(
        self,
        encoder_cfg: EncoderConfig | None = None,
        prompt_cfg: PromptConfig | None = None,
        audio_enabled: bool = True,
        audio_input_shape: tuple[int, int] | None = None,
        audio_floor_log: float = math.log(1e-10),
        seed: int = 0,
    ):
        super().__init__()
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.prompt_cfg = prompt_cfg or PromptConfig()
        self.prompt_cfg.validate_for(self.encoder_cfg)
        self.audio_enabled = audio_enabled
        self.seed = seed

        cfg = self.encoder_cfg
        self.text_encoder = TextEncoder(cfg)
        self.vision_encoder = VisionEncoder(cfg)
        if self.prompt_cfg.text_active:
            self.text_prompts = nn.ParameterList(
                nn.Parameter(torch.empty(self.prompt_cfg.text_tokens, cfg.width))
                for _ in range(self.prompt_cfg.text_depth)
            )
        else:
            self.text_prompts = None
        if self.prompt_cfg.video_active:
            self.video_prompts = nn.ParameterList(
                nn.Parameter(torch.empty(self.prompt_cfg.video_tokens, cfg.width))
                for _ in range(self.prompt_cfg.video_depth)
            )
        else:
            self.video_prompts = None
        if audio_enabled:
            if audio_input_shape is None:
                from .audio import static_input_shape

                audio_input_shape = static_input_shape()
            self.audio_encoder = AudioEncoder(cfg, audio_input_shape, audio_floor_log)
            self.audio_projection = ProjectionLayer()
        else:
            self.audio_encoder = None
            self.audio_projection = None
        self.logit_scale = nn.Parameter(torch.zeros(()))
        init_parameters(self, seed)

    # -- branch forward passes -------------------------------------------

    def encode_text(self, class_names: list[str]) -> torch.Tensor:
        if not class_names:
            raise ValidationError("need at least one class name")
        ids = torch.tensor(
            [tokenize_class_name(n, self.encoder_cfg) for n in class_names],
            dtype=torch.long,
        )
        return self.text_encoder(ids, self.text_prompts, self.prompt_cfg)

    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        return self.vision_encoder(frames, self.video_prompts, self.prompt_cfg)

    def encode_spectrogram(self, values: torch.Tensor) -> torch.Tensor:
        if self.audio_encoder is None:
            raise ValidationError("audio branch is disabled in this model")
        return self.audio_encoder(values)

    def scale(self) -> torch.Tensor:
        # trainable log-scale, clamped so the multiplier never exceeds 100
        return self.logit_scale.exp().clamp(max=100.0)


def partition_parameters(model: MultimodalClassifier) -> ParameterPartition:
    """Split every model parameter into the frozen and trainable sets."""
    trainable: set[str] = set()
    cfg = model.prompt_cfg
    for name, _ in model.named_parameters():
        if name.startswith("text_prompts.") and not cfg.freeze_text_prompts:
            trainable.add(name)
        elif name.startswith("video_prompts.") and not cfg.freeze_video_prompts:
            trainable.add(name)
        elif name.startswith("audio_projection."):
            trainable.add(name)
        elif name == "logit_scale":
            trainable.add(name)
    frozen = {name for name, _ in model.named_parameters()} - trainable
    return ParameterPartition(frozen=frozenset(frozen), trainable=frozenset(trainable))


def apply_partition(model: MultimodalClassifier) -> ParameterPartition:
    part = partition_parameters(model)
    for name, param in model.named_parameters():
        param.requires_grad_(name in part.trainable)
    return part


def trainable_parameter_count(model: MultimodalClassifier) -> int:
    part = partition_parameters(model)
    by_name = dict(model.named_parameters())
    return sum(by_name[n].numel() for n in part.trainable)
