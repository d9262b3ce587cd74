"""Query-based oriented object detection at desk scale."""
from .attention import AttentionConfig, FeaturePyramid, bench_attention, msrroi_attention
from .data import SceneSample, SyntheticSpec, crop_patches, generate_synthetic_scene, parse_dota_annotation
from .decoder import DecoderConfig, QuerySet, RQModel
from .estimator import RotatedQueryDetector
from .evaluation import Detections, EvalConfig, GroundTruth, evaluate_map, similar_query_ratio
from .geometry import RotatedBox, iou_matrix, rotated_iou, rotated_nms
from .matching import LossWeights, hungarian

__version__ = "0.1.0"
