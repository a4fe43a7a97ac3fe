"""Multi-scale domain-adversarial attention MIL on a small numpy autodiff core."""

from .data import (Bag, ConfigError, CorpusConfig, DataError, IngestError, Slide, export_corpus,
                   extract_bags, generate_synthetic_corpus, ingest_patch_directory, split_dataset)
from .evaluate import (compute_metrics, evaluate_corpus, evaluate_model, patch_baseline_probability,
                       render_attention_heatmap, slide_probability)
from .gradcheck import run_gradcheck
from .model import bag_predict, multiscale_bag_predict
from .tensor import Tensor, backward
from .train import (Checkpoint, NumericError, TrainConfig, TrainedModel, lambda_schedule, stage1_step,
                    stage1_train, stage2_train, train_method)

__all__ = [
    "Bag", "Checkpoint", "ConfigError", "CorpusConfig", "DataError", "IngestError", "NumericError", "Slide",
    "Tensor", "TrainConfig", "TrainedModel", "backward", "bag_predict", "compute_metrics", "evaluate_corpus",
    "evaluate_model", "export_corpus", "extract_bags", "generate_synthetic_corpus", "ingest_patch_directory",
    "lambda_schedule", "multiscale_bag_predict", "patch_baseline_probability", "render_attention_heatmap",
    "run_gradcheck", "slide_probability", "split_dataset", "stage1_step", "stage1_train", "stage2_train",
    "train_method",
]

__version__ = "0.1.0"
