"""Self-supervised music sample identification at desk scale.

Pipeline: variable-Q transform frontend, artificial-mix positive pairs
built from multi-track stems, a two-positive contrastive loss with
learnable temperature, a small numpy encoder with exact gradients, and a
chunk-based retrieval evaluation harness.
"""

from .frontend import VqtConfig, VqtMatrix, vqt, log_magnitude
from .datapipe import (
    MultiTrack,
    MultiTrackChunk,
    TransformSpec,
    extract_chunk,
    apply_transforms,
    synthesize_corpus,
    merge_stems,
)
from .augment import CropGeometry, time_stretch, ref_view, sub_view
from .pairs import Batch, build_batch
from .encoder import EncoderConfig, Parameters, forward, backward
from .loss import similarity_matrix, loss_from_embeddings, loss_gradient_check
from .training import TrainConfig, train, resume
from .evaluate import (
    EmbeddingStore,
    RankingReport,
    embed_track,
    pair_score,
    rank_and_score,
    hop_sweep,
    noise_scaling,
)

__version__ = "0.1.0"
