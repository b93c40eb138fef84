from .blocks import (
    ConvBlockSpec,
    Net,
    build_net,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    gap_backward,
    gap_forward,
    relu_backward,
    relu_forward,
    softmax_xent_backward,
    softmax_xent_forward,
)
from .checkpoint import load_tensors, save_tensors
from .train import AlphaSchedule, SgdSchedule, TrainConfig, evaluate, sgd_step, train
