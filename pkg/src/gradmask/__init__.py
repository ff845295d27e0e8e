"""gradmask: pseudo-label transducer training with gradient masking.

The package trains a miniature RNN-Transducer on a synthetic speech-like
corpus and implements masked pseudo-label training: span-masked inputs,
a per-frame gradient gate behind the encoder, and a stop-gradient in
front of the prediction network. The public surface below mirrors the
CLI pipeline (gen-data, train-seed, pseudo-label, train-student,
iterate, eval, gradcheck, noise-sweep).
"""

__version__ = "0.1.0"

from .data import (
    Corpus,
    CorpusSpec,
    Utterance,
    generate_corpus,
    inject_label_noise,
    read_corpus,
    write_corpus,
)
from .decode import corpus_wer, edit_distance, greedy_decode
from .gradcheck import run_all as run_gradient_checks
from .kernel import BACKEND as KERNEL_BACKEND
from .masking import MaskPlan, expected_coverage, n_starts, sample_mask
from .model import (
    ModelDims,
    PseudoMasked,
    Supervised,
    TransducerModel,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .rnnt import LogitLattice, rnnt_loss, rnnt_loss_bruteforce
from .train import (
    TrainConfig,
    TrainResult,
    iterate_pseudo_labeling,
    pseudo_label,
    train_seed,
    train_student,
)

__all__ = [
    "Corpus",
    "CorpusSpec",
    "KERNEL_BACKEND",
    "LogitLattice",
    "MaskPlan",
    "ModelDims",
    "PseudoMasked",
    "Supervised",
    "TrainConfig",
    "TrainResult",
    "TransducerModel",
    "Utterance",
    "__version__",
    "build_model",
    "corpus_wer",
    "edit_distance",
    "expected_coverage",
    "generate_corpus",
    "greedy_decode",
    "inject_label_noise",
    "iterate_pseudo_labeling",
    "load_checkpoint",
    "n_starts",
    "pseudo_label",
    "read_corpus",
    "rnnt_loss",
    "rnnt_loss_bruteforce",
    "run_gradient_checks",
    "sample_mask",
    "save_checkpoint",
    "train_seed",
    "train_student",
    "write_corpus",
]
