"""Transductive fine-tuning of prototypical few-shot segmentation encoders."""

from .data import (DatasetManifest, Sample, SynthConfig, generate_synthetic, load_dataset,
                   make_episodes, two_fold_split)
from .encoder import EncoderConfig, encode, init_toy_encoder, load_checkpoint, save_checkpoint
from .errors import CPCError
from .evaluation import EvalReport, SweepReport, eval_unseen, evaluate, iou, sweep_support
from .finetune import FineTuneConfig, RunLog, finetune_cpc, finetune_sup, finetune_trans, run_strategy
from .prototype import PrototypeSet, generate_prototypes, kmeans, predict_query
from .supportsel import select_support

__version__ = "0.1.0"

__all__ = [
    "CPCError", "DatasetManifest", "EncoderConfig", "EvalReport", "FineTuneConfig",
    "PrototypeSet", "RunLog", "Sample", "SweepReport", "SynthConfig", "encode", "eval_unseen",
    "evaluate", "finetune_cpc", "finetune_sup", "finetune_trans", "generate_prototypes",
    "generate_synthetic", "init_toy_encoder", "iou", "kmeans", "load_checkpoint", "load_dataset",
    "make_episodes", "predict_query", "run_strategy", "save_checkpoint", "select_support",
    "sweep_support", "two_fold_split",
]
