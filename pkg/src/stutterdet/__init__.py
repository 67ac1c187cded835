"""Multi-class stuttering detection with TDNN encoders, class-balanced
training, SNR-controlled augmentation and multi-context models."""

from .audio import FeatureConfig, FeatureMatrix, MFCCTransformer, Waveform, load_audio, mfcc
from .data import Label, Manifest, SegmentRecord, SplitPlan, class_weights, make_split, parse_manifest
from .estimator import StutterClassifier
from .model import ModelSpec, StutterModel, apply_freeze, param_count
from .train import TrainConfig, evaluate, pretrain_finetune, run_cv, train_fold

__version__ = "0.1.0"

__all__ = [
    "FeatureConfig", "FeatureMatrix", "MFCCTransformer", "Waveform", "load_audio", "mfcc",
    "Label", "Manifest", "SegmentRecord", "SplitPlan", "class_weights", "make_split",
    "parse_manifest", "StutterClassifier", "ModelSpec", "StutterModel", "apply_freeze",
    "param_count", "TrainConfig", "evaluate", "pretrain_finetune", "run_cv", "train_fold",
]
