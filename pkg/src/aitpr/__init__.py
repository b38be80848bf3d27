"""Attribute/interaction tensor-product caption decoder on plain numpy.

The package splits into small layers: ``autodiff`` (scalar-loss reverse
mode), ``tpr`` (role/filler binding), ``scenes`` (synthetic dataset
grammar), ``decoder`` (the attention cell itself), ``training``,
``metrics`` and ``cli``.  Everything below is re-exported convenience;
the submodules are the real surface.
"""

from . import autodiff, decoder, errors, figures, metrics, scenes, tpr, training
from .autodiff import Graph, Tensor, grad_check, no_grad
from .decoder import (FusionMode, ModelDims, ModelParams, VariantFlags,
                      generate_caption, init_params)
from .metrics import EvalReport, bleu, cider_d, evaluate_corpus, rouge_l
from .scenes import (RegionFeatureSet, Scene, SceneConfig, TokenSequence,
                     Vocabulary, build_vocabulary, caption_oracle,
                     generate_scene, scene_to_features)
from .tpr import bind, generate_roles, hadamard_bind, unbind
from .training import (Checkpoint, TrainConfig, TrainResult, load_checkpoint,
                       save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "autodiff", "decoder", "errors", "figures", "metrics", "scenes", "tpr",
    "training",
    "Graph", "Tensor", "grad_check", "no_grad",
    "FusionMode", "ModelDims", "ModelParams", "VariantFlags",
    "generate_caption", "init_params",
    "EvalReport", "bleu", "cider_d", "evaluate_corpus", "rouge_l",
    "RegionFeatureSet", "Scene", "SceneConfig", "TokenSequence", "Vocabulary",
    "build_vocabulary", "caption_oracle", "generate_scene", "scene_to_features",
    "bind", "generate_roles", "hadamard_bind", "unbind",
    "Checkpoint", "TrainConfig", "TrainResult", "load_checkpoint",
    "save_checkpoint", "train",
    "__version__",
]
