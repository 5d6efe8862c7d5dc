"""Federated-learning engine: config, data, models, training, task driver."""
from .config import ConfigError, TaskConfig, default_config, load_config, parse_config
from .data import Dataset, DatasetPartition, TooFewSamples, load_csv, make_blobs, split_dataset
from .models import ModelParams, ShapeMismatch, UnknownModel, init_model, loss_and_grad
from .modelio import load_model, save_model
from .training import (EmptyUpdateSet, Metrics, ModelUpdate, NonFiniteLoss, WatermarkContext,
                       aggregate, evaluate, local_train, to_micro)
from .task import TaskReport, run_task

__all__ = [
    "ConfigError", "TaskConfig", "default_config", "load_config", "parse_config",
    "Dataset", "DatasetPartition", "TooFewSamples", "load_csv", "make_blobs", "split_dataset",
    "ModelParams", "ShapeMismatch", "UnknownModel", "init_model", "loss_and_grad",
    "load_model", "save_model",
    "EmptyUpdateSet", "Metrics", "ModelUpdate", "NonFiniteLoss", "WatermarkContext",
    "aggregate", "evaluate", "local_train", "to_micro",
    "TaskReport", "run_task",
]
