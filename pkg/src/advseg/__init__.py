"""Desk-scale adversarial-robustness laboratory for semantic segmentation.

From-scratch numpy autodiff, tiny encoder-decoder segmentation models,
L2/Linf gradient attacks, adversarial training, and robust-dataset
construction by representation inversion, plus a reproducible experiment
harness (``advseg`` on the command line).
"""

from .attacks import AttackSpec, bim, fgsm, input_gradient, pgd, project
from .autodiff import (
    AdamState,
    NonFiniteError,
    Tensor,
    adam_step,
    add,
    backward,
    clamp,
    concat,
    conv2d,
    get_default_dtype,
    maxpool2d,
    mul,
    neg,
    relu,
    set_default_dtype,
    softmax,
    softmax_cross_entropy,
    sqrt,
    sub,
    sum_all,
    transposed_conv2d,
)
from .data import (
    CLASS_NAMES,
    DatasetFormatError,
    LabeledDataset,
    SceneSpec,
    augment,
    class_frequencies,
    colorize_mask,
    generate_dataset,
    generate_scene,
    load_dataset,
    merge_datasets,
    one_hot,
    save_dataset,
    save_image_png,
    split_dataset,
)
from .metrics import (
    MetricReport,
    confusion_matrix,
    emit_table,
    iou_from_confusion,
    mean_iou,
    parse_results_csv,
    pixel_accuracy,
    results_csv_text,
)
from .models import (
    ARCHITECTURES,
    CheckpointError,
    SegModel,
    build_model,
    dump_activations,
    frozen,
    load_checkpoint,
    model_weights_hash,
    save_checkpoint,
)
from .robustify import (
    RobustifyConfig,
    RobustifyResult,
    invert_representation,
    pair_sources,
    representation_distance,
    robustify_dataset,
    robustify_sample,
)
from .training import ExperimentRecord, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES",
    "AdamState",
    "AttackSpec",
    "CLASS_NAMES",
    "CheckpointError",
    "DatasetFormatError",
    "ExperimentRecord",
    "LabeledDataset",
    "MetricReport",
    "NonFiniteError",
    "RobustifyConfig",
    "RobustifyResult",
    "SceneSpec",
    "SegModel",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "add",
    "augment",
    "backward",
    "bim",
    "build_model",
    "clamp",
    "class_frequencies",
    "colorize_mask",
    "concat",
    "confusion_matrix",
    "conv2d",
    "dump_activations",
    "emit_table",
    "evaluate",
    "fgsm",
    "frozen",
    "generate_dataset",
    "generate_scene",
    "get_default_dtype",
    "input_gradient",
    "invert_representation",
    "iou_from_confusion",
    "load_checkpoint",
    "load_dataset",
    "maxpool2d",
    "mean_iou",
    "merge_datasets",
    "model_weights_hash",
    "mul",
    "neg",
    "one_hot",
    "pair_sources",
    "parse_results_csv",
    "pgd",
    "pixel_accuracy",
    "project",
    "relu",
    "representation_distance",
    "results_csv_text",
    "robustify_dataset",
    "robustify_sample",
    "save_checkpoint",
    "save_dataset",
    "save_image_png",
    "set_default_dtype",
    "softmax",
    "softmax_cross_entropy",
    "split_dataset",
    "sqrt",
    "sub",
    "sum_all",
    "train",
    "transposed_conv2d",
    "__version__",
]
