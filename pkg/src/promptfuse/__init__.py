"""promptfuse: frozen-backbone multimodal classification via learnable prompts."""

__version__ = "0.1.0"

from .audio import (
    SpectrogramConfig,
    Spectrogram,
    Waveform,
    decode_wav,
    log_spectrogram,
    resample,
)
from .encoders import (
    EncoderConfig,
    MultimodalClassifier,
    ParameterPartition,
    PromptConfig,
    TokenSequence,
    inject_prompts,
    partition_parameters,
    tokenize_class_name,
)
from .errors import DataError, PromptfuseError, UnsupportedFormatError, ValidationError
from .fusion import (
    ProjectionLayer,
    SimilarityMatrix,
    contrastive_loss,
    fuse,
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
    class_distribution,
    few_shot_sample,
    load_manifest,
    make_splits,
)
from .training import (
    AblationGrid,
    MetricsRecord,
    TrainConfig,
    ablate,
    builtin_grid,
    evaluate,
    gradient_check,
    sample_frames,
    train,
)
