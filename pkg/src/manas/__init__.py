"""Input-adaptive architecture search over neural logic expressions for sequential recommendation."""

from .architecture import LogicArchitecture, enumerate_architectures, parse_expression, to_expression_string
from .controller import Controller
from .data import Dataset, load_interactions, synthetic_dataset
from .evaluation import evaluate
from .logic import LogicModules
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "Controller",
    "Dataset",
    "LogicArchitecture",
    "LogicModules",
    "TrainConfig",
    "Trainer",
    "enumerate_architectures",
    "evaluate",
    "load_interactions",
    "parse_expression",
    "synthetic_dataset",
    "to_expression_string",
]
