"""modalmix: two-stream image+text retrieval on a synthetic attribute grid.

A query is an image plus a modification text; the model learns combined
query embeddings that rank the right target image highly.  Everything runs
on a small float64 autodiff engine so every gradient can be verified
against central differences.
"""

from .autodiff import Tensor, backward, no_grad
from .data import AttributeSchema, Dataset, generate_dataset, load_dataset
from .evaluation import evaluate, export_attention, recall_at_k
from .gradcheck import run_suite as run_gradcheck
from .model import TwoStreamModel
from .training import TrainConfig, train

__all__ = [
    "AttributeSchema",
    "Dataset",
    "Tensor",
    "TrainConfig",
    "TwoStreamModel",
    "backward",
    "evaluate",
    "export_attention",
    "generate_dataset",
    "load_dataset",
    "no_grad",
    "recall_at_k",
    "run_gradcheck",
    "train",
]
