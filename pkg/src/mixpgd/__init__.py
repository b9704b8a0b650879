"""Hybrid supervised/unsupervised adversarial training for CTC speech recognizers."""

__version__ = "0.1.0"

from .data import Alphabet, AudioExample, FeatureBatch, MelConfig, featurize, make_batch, synth_toy_corpus
from .model import Checkpoint, ModelConfig, SpeechRecognizer, greedy_decode, load_checkpoint, save_checkpoint
from .losses import SinkhornConfig, ctc_loss, kl_loss, mixed_loss, ot_loss, sinkhorn_ot
from .attacks import AttackConfig, Perturbation, run_attack
from .training import TrainConfig, train
from .evaluation import error_rates, evaluate_transfer, evaluate_whitebox

__all__ = [
    "Alphabet", "AudioExample", "FeatureBatch", "MelConfig", "featurize", "make_batch",
    "synth_toy_corpus", "Checkpoint", "ModelConfig", "SpeechRecognizer", "greedy_decode",
    "load_checkpoint", "save_checkpoint", "SinkhornConfig", "ctc_loss", "kl_loss",
    "mixed_loss", "ot_loss", "sinkhorn_ot", "AttackConfig", "Perturbation", "run_attack",
    "TrainConfig", "train", "error_rates", "evaluate_transfer", "evaluate_whitebox",
]
