from .bn import BNCache, bn_backward, bn_forward
from .compose import (
    GradientSet,
    LayerCache,
    LayerParams,
    LayerState,
    WhiteningLayer,
    corr_backward,
    corr_forward,
    layer_backward,
    layer_forward,
)
from .ldl import LDLCache, chol_forward, ldl_backward, pldlp_forward
from .stats import RunningCov, batch_cov, center, erank, update_running
from .zca import ZCACache, condition_spectrum, zca_backward, zca_forward, zca_transform

chol_backward = ldl_backward
pldlp_backward = ldl_backward
