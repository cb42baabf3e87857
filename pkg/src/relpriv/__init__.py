"""Differentially private relational learning on text-attributed graphs.

Trains a small token-sequence encoder on the relations of a graph under
(epsilon, delta)-DP for the relation set: decoupled negative sampling,
per-tuple gradient clipping through low-rank gradient caches, Gaussian
noising, DP-SGD / DP-Adam, an RDP accountant, a randomized-response
baseline, and a membership-inference audit suite.
"""

__version__ = "0.1.0"

from relpriv.errors import (
    CalibrationError,
    ConfigError,
    DataFormatError,
    RelprivError,
    TrainingError,
)
from relpriv.graph import (
    GraphSplit,
    TextAttributedGraph,
    TokenSeq,
    load_graph,
    save_graph,
    split_relations,
    synth_graph,
)
from relpriv.sampling import (
    Batch,
    RelationTuple,
    sample_batch,
    sample_negatives_decoupled,
    sample_negatives_inbatch,
)
from relpriv.encoder import (
    EncoderParams,
    ForwardTrace,
    LowRankGradCache,
    backward_tuple,
    encode,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from relpriv.losses import TupleScores, hinge, infonce, score, tuple_loss_grads
from relpriv.privacy import (
    GradVector,
    OptimizerState,
    clip,
    dp_adam_step,
    dp_sgd_step,
    memory_estimate,
    privatize_batch,
    tuple_grad_naive,
    tuple_grad_norm,
    tuple_grad_outer,
)
from relpriv.accounting import (
    AccountantState,
    calibrate_sigma,
    compose,
    fresh_state,
    rdp_subsampled_gaussian,
    to_epsilon,
)
from relpriv.randomized_response import flip_probability, randomized_response
from relpriv.training import PrivacySpec, PrivacyReport, TrainConfig, train
