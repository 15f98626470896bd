"""Adam optimizer over named parameter tensors."""

from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    """Moment buffers, step counter and hyperparameters of one Adam run."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]],
              state: AdamState):
    """Apply one bias-corrected Adam update in place.

    Parameters without a gradient are treated as having a zero gradient, so
    they keep decaying moments but do not move unless their moments are
    non-zero.
    """
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    step_size = state.lr / bc1

    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        if g.shape != param.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {param.shape}")

        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        m, v = state.m[name], state.v[name]
        if m.shape != param.shape:
            raise DimensionError(f"moment buffer for {name} has shape {m.shape}, parameter {param.shape}")

        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)

        denom = np.sqrt(v / bc2) + state.eps
        param.data -= (step_size * m / denom).astype(param.dtype, copy=False)


class Adam:
    """Adam bound to a fixed set of named parameters."""

    def __init__(self, params: Iterable[Tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: Dict[str, Tensor] = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        grads = {name: p.grad for name, p in self.params.items()}
        adam_step(self.params, grads, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
