"""LoRA fine-tuning of ViT backbones for atypical vs. normal mitotic figure classification."""

from .lora import LoraConfig
from .manifest import AMF, NMF, CropRecord, Manifest, load_manifest, write_manifest
from .metrics import MetricsReport, ThresholdPolicy, balanced_accuracy, domainwise_report, optimize_threshold, roc_auc
from .model_zoo import build_model, get_backbone, list_backbones
from .splitter import SplitPlan, group_kfold, random_kfold, verify_no_leakage
from .trainer import TrainConfig, fit

__version__ = "0.1.0"
