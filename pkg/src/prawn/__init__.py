"""PRaWN: multi-task learning as read/write operations on permission-typed
parameters, with gradient-passing communication between tasks."""

__version__ = "0.1.0"

from .commpass import (  # noqa: F401
    FastWeights,
    MetaConfig,
    WeightMatrix,
    compute_fast_weights,
    listwise_gp_loss,
    pairwise_gp_loss,
    train_epoch,
)
from .datakit import SyntheticSpec, TaskDataset, Vocab, VocabPartition  # noqa: F401
from .readops import EncoderSpec, MultiTaskModel, ReadOpKind, ReadResult  # noqa: F401
from .registry import ParamMode, ParamRegistry, ParamTensor, TaskAgent  # noqa: F401
from .tensor import Tensor, backward, finite_diff_check  # noqa: F401
from .writeops import LossWeights, OptimizerState, adversarial_loss, orthogonality_loss, task_loss  # noqa: F401
