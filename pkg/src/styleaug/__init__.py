"""Neural style transfer as a data-augmentation method for image classification."""

__version__ = "0.1.0"

from ._validation import ContractError
from .augmentor import AugmentPlan, LabeledDataset, build_augmented, scan_dataset
from .classify import ClassifierConfig, ImageClassifier, split_dataset, top1_accuracy, train_classifier
from .descriptive import DescriptiveRunConfig, DescriptiveStylizer, optimize
from .experiments import report, run_matrix
from .losses import LossWeights, content_loss, gram_matrix, layer_style_loss, style_loss, total_objective, tv_loss
from .lossnet import LossNetwork, compute_style_target, extract_features
from .trainer import StyleTrainConfig, StyleTransferTransformer, train_style
from .transformnet import TransformNetConfig, load_checkpoint, save_checkpoint, stylize

__all__ = [
    "__version__",
    "ContractError",
    "AugmentPlan",
    "LabeledDataset",
    "build_augmented",
    "scan_dataset",
    "ClassifierConfig",
    "ImageClassifier",
    "split_dataset",
    "top1_accuracy",
    "train_classifier",
    "DescriptiveRunConfig",
    "DescriptiveStylizer",
    "optimize",
    "report",
    "run_matrix",
    "LossWeights",
    "content_loss",
    "gram_matrix",
    "layer_style_loss",
    "style_loss",
    "total_objective",
    "tv_loss",
    "LossNetwork",
    "compute_style_target",
    "extract_features",
    "StyleTrainConfig",
    "StyleTransferTransformer",
    "train_style",
    "TransformNetConfig",
    "load_checkpoint",
    "save_checkpoint",
    "stylize",
]
