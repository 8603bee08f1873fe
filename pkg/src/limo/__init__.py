"""Transductive few-shot adaptation of a toy two-tower encoder.

The objective combines support cross-entropy, query mutual information and a
KL anchor to the zero-shot predictions; parameter-efficient strategies
(LoRA, linear projector, prompts, frozen) decide what gets adapted.
"""

from .autodiff import Rng, Tensor, no_grad
from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateEmbeddingError,
    DimensionError,
    DivergenceError,
    DomainError,
    EpisodeError,
    FormatError,
    LabelError,
    LimoError,
    NumericError,
)
from .harness import RunConfig, RunResult, evaluate, run_benchmark, sweep, train_episode
from .model import LoraAdapter, TowerConfig, build_model, encode_classes, encode_images
from .objective import LossReport, LossWeights, limo_loss
from .tasks import Episode, GeneratorSpec, Task, generate_task, import_embeddings, split_episode

__version__ = "0.1.0"
