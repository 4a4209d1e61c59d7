"""Name tuning and prompt tuning of class-name token embeddings for frozen dual encoders."""
from .classify import DEFAULT_PROMPT, ClassifierHead, PromptSpec, build_head, class_probabilities, predict
from .core import ClassEntry, EmbeddingSpace, Examples, SeededRng, Similarity, TokenSequence
from .encoder import LinearEncoder, ToyTransformerEncoder, make_encoder
from .errors import NameTuneError
from .textparams import Method, TextParameterSet, init_parameters
from .train import TrainConfig, default_config, grid_search, train_run

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_PROMPT", "ClassEntry", "ClassifierHead", "EmbeddingSpace", "Examples", "LinearEncoder", "Method",
    "NameTuneError", "PromptSpec", "SeededRng", "Similarity", "TextParameterSet", "TokenSequence",
    "ToyTransformerEncoder", "TrainConfig", "build_head", "class_probabilities", "default_config",
    "grid_search", "init_parameters", "make_encoder", "predict", "train_run",
]
