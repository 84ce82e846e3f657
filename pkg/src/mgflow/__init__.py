"""Discriminative normalization flows trained for maximum likelihood or maximum Gaussianality."""
from .diffcore import AdamState, NonFiniteError, Tape, Tensor, adam_step
from .flow import DnfModel, FlowInstabilityError, FlowModel, load_checkpoint, save_checkpoint
from .objectives import ChiStats, ObjectiveSpec, angle_metric, compose, length_metric, parse_variant
from .training import TrainConfig, TrainLog, train
from .metrics import gauss_report, variation_report
from .scoring import PldaModel, cosine_score, eer, plda_score, plda_train
from .data import SynthSpec, VectorStore, synth_gmm, synth_warped_speakers

__version__ = "0.1.0"
