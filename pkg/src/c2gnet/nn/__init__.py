"""From-scratch CNN kernels, the two architectures and the optimizer."""

from .network import (
    LayerSpec,
    NetworkSpec,
    backward,
    build_deepcnet,
    build_deeplnino,
    flatten_params,
    forward,
    init_params,
    loss_and_grads,
    predict_proba,
    unflatten_params,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .optim import AdadeltaState, adadelta_step
