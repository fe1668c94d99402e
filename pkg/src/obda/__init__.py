"""obda: ground/on-board bi-temporal building damage assessment, desk scale.

Pre-disaster imagery is encoded into compact quantized latents on the
"ground" side; the "on-board" side fuses them with post-event imagery
(siamese concat+difference, optional cross-attention) to detect buildings
and classify damage, under a reproducible misregistration and bandwidth
protocol.
"""

__version__ = "0.1.0"

from .budget import BudgetScenario, compute_budget
from .codec import LatentPacket, latent_size_bytes, pack, quantize, unpack
from .detector import DAMAGE_CLASS_NAMES, Detection, decode, detection_loss
from .encoder import EncoderConfig, FeatureMap, PyramidEncoder
from .fusion import VariantConfig
from .geoproto import BoxAnnotation, ScenePair, fixed_support_eval_set, \
    shift_augment
from .harness import ExperimentConfig, ablation_matrix, sweep_shift, train
from .metrics import evaluate_detections, greedy_match, iou, \
    localization_f1, mean_average_precision
from .model import BiTemporalModel, ModelConfig

__all__ = [
    "BudgetScenario", "compute_budget",
    "LatentPacket", "latent_size_bytes", "pack", "quantize", "unpack",
    "DAMAGE_CLASS_NAMES", "Detection", "decode", "detection_loss",
    "EncoderConfig", "FeatureMap", "PyramidEncoder",
    "VariantConfig",
    "BoxAnnotation", "ScenePair", "fixed_support_eval_set", "shift_augment",
    "ExperimentConfig", "ablation_matrix", "sweep_shift", "train",
    "evaluate_detections", "greedy_match", "iou", "localization_f1",
    "mean_average_precision",
    "BiTemporalModel", "ModelConfig",
]
