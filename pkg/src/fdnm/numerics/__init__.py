from .gradcheck import GradCheckResult, check_gradients, max_rel_error, numeric_grad
from .ops import (
    BatchNormState,
    add,
    batch_norm,
    concat,
    concat_channels,
    conv1x1,
    conv2d,
    cos,
    cross_entropy,
    gap,
    getitem,
    instance_norm,
    linear,
    matmul,
    mean,
    mul,
    pairwise_distance,
    relu,
    reshape,
    row_distance,
    sigmoid,
    sin,
    split_channels,
    sub,
)
from .ops import sum as tsum
from .params import (
    CheckpointError,
    ParamStore,
    decode_checkpoint,
    encode_checkpoint,
    read_checkpoint,
    write_checkpoint,
)
from .tensor import ShapeError, Tensor, as_tensor, grad_enabled, make, no_grad
