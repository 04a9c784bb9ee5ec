"""ReLU^2 feedforward networks with exact input and parameter gradients."""
from .autodiff import GraphError, Tensor, no_grad
from .network import (
    INIT_SCHEMES,
    EvalResult,
    Layer,
    Network,
    StructureError,
    Tape,
    backward,
    evaluate,
    forward,
    init,
    load_checkpoint,
    relu2,
    relu2_prime,
    save_checkpoint,
)

__all__ = [
    "INIT_SCHEMES", "EvalResult", "GraphError", "Layer", "Network", "StructureError", "Tape", "Tensor",
    "backward", "evaluate", "forward", "init", "load_checkpoint", "no_grad", "relu2",
    "relu2_prime", "save_checkpoint",
]
