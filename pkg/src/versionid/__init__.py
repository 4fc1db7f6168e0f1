"""Cover-song (version) identification toolkit.

Feature extraction (rhythm fluctuation patterns on a constant-Q modulation
axis, lyrics posteriorgrams from a convolutional acoustic model trained with
CTC), per-feature metric-learning encoders trained with semi-hard triplets,
quadratic-mean late fusion, and retrieval evaluation with oracle bounds.
"""

from .alr import (
    Posteriorgram,
    alr_forward,
    character_error_rate,
    ctc_brute_force,
    ctc_gradient,
    ctc_loss,
    default_alr_config,
    greedy_decode,
)
from .cqfp import CqfpParams, CQFPFeature, expected_tempo_shift_bins, extract_cqfp, perceptual_weighting
from .dsp import (
    AudioBuffer,
    BandEnvelopes,
    Spectrogram,
    cq_modulation_transform,
    load_audio,
    mel_band_envelopes,
    mel_spectrogram,
    resample,
    stft_power,
)
from .encoder import (
    Embedding,
    EncoderConfig,
    LayerSpec,
    build_encoder_config,
    conv2d_forward,
    encode,
    encoder_backward,
    gated_temporal_attention,
    init_encoder_weights,
    toy_encoder_config,
)
from .fusion import FusedEmbedding, concat_normalize, fused_distance, per_feature_distances
from .manifest import DatasetManifest, TrackRecord, load_manifest, prune, write_manifest
from .retrieval import (
    EvalReport,
    average_precision,
    evaluate,
    optimal_metrics,
    oracle_contributions,
    oracle_distances,
    pair_report,
    pairwise_distances,
)
from .training import (
    AdamState,
    TrainConfig,
    Triplet,
    adam_step,
    mine_semi_hard,
    sample_batch,
    train_feature_model,
    triplet_loss,
)

__version__ = "0.1.0"
