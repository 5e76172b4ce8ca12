from .analyze import (
    AbstractState,
    GranularityPolicy,
    ValidRanges,
    analyze,
    endpoint_gradients,
    finalize,
    transfer_loop,
)
from .labeling import label_fine_grained
from .transfer import (
    transfer_conv,
    transfer_elementwise,
    transfer_matmul_fast,
    transfer_matmul_tight,
    transfer_softmax,
)

__all__ = [
    "AbstractState",
    "GranularityPolicy",
    "ValidRanges",
    "analyze",
    "endpoint_gradients",
    "finalize",
    "label_fine_grained",
    "transfer_conv",
    "transfer_elementwise",
    "transfer_loop",
    "transfer_matmul_fast",
    "transfer_matmul_tight",
    "transfer_softmax",
]
