"""Parameter update rules for the alternating search and for retraining.

Three updaters cover the whole pipeline: SGD with momentum for network
weights (and, without momentum, for the loss logits), an adaptive-moment
optimizer for the architecture logits, and a global-norm gradient clip
applied to the weight gradients before their SGD step.
"""

import numpy as np

from .autodiff import Tensor
from .errors import ConfigurationError

__all__ = ["SGD", "Adam", "clip_gradients"]


class _Optimizer:
    """Shared plumbing: parameter list, lazy buffers, checkpoint state."""

    def __init__(self, params, lr):
        params = list(params)
        if not params:
            raise ConfigurationError("optimizer needs at least one parameter")
        for p in params:
            if not isinstance(p, Tensor):
                raise ConfigurationError(f"optimizer parameters must be Tensors, got {type(p)}")
        if lr <= 0.0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = float(lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class SGD(_Optimizer):
    """Stochastic gradient descent with optional momentum and L2 decay.

    Decay enters the gradient (g + wd * p) before the momentum buffer, so
    momentum smooths the decayed direction. Parameters whose .grad is None
    are skipped; their buffers keep their previous value.
    """

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        super().__init__(params, lr)
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0.0:
            raise ConfigurationError(f"weight decay must be non-negative, got {weight_decay}")
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [None] * len(self.params)

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self.velocity[i]
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[i] = v
            else:
                v = g
            p.data -= self.lr * v

    def state_dict(self):
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "velocity": [None if v is None else v.copy() for v in self.velocity],
        }

    def load_state_dict(self, state):
        if len(state["velocity"]) != len(self.params):
            raise ConfigurationError(
                f"checkpoint holds {len(state['velocity'])} momentum buffers "
                f"for {len(self.params)} parameters"
            )
        self.lr = float(state["lr"])
        self.momentum = float(state["momentum"])
        self.weight_decay = float(state["weight_decay"])
        self.velocity = _restore_buffers(state["velocity"], self.params, "momentum")


class Adam(_Optimizer):
    """Adaptive-moment descent with bias correction and L2 decay.

    The step counter is shared across parameters and advances once per
    step() call, matching the usual formulation; a parameter skipped for a
    None gradient keeps stale moments but still sees the advanced counter.
    """

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params, lr)
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigurationError(f"betas must lie in [0, 1), got {betas}")
        if eps <= 0.0:
            raise ConfigurationError(f"eps must be positive, got {eps}")
        if weight_decay < 0.0:
            raise ConfigurationError(f"weight decay must be non-negative, got {weight_decay}")
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = [None] * len(self.params)
        self.v = [None] * len(self.params)
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[i]
            v = self.v[i]
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            self.m[i] = m
            self.v[i] = v
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self):
        return {
            "lr": self.lr,
            "betas": self.betas,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "t": self.t,
            "m": [None if b is None else b.copy() for b in self.m],
            "v": [None if b is None else b.copy() for b in self.v],
        }

    def load_state_dict(self, state):
        if len(state["m"]) != len(self.params) or len(state["v"]) != len(self.params):
            raise ConfigurationError(
                f"checkpoint holds {len(state['m'])}/{len(state['v'])} moment buffers "
                f"for {len(self.params)} parameters"
            )
        self.lr = float(state["lr"])
        self.betas = tuple(float(b) for b in state["betas"])
        self.eps = float(state["eps"])
        self.weight_decay = float(state["weight_decay"])
        self.t = int(state["t"])
        self.m = _restore_buffers(state["m"], self.params, "first-moment")
        self.v = _restore_buffers(state["v"], self.params, "second-moment")


def _restore_buffers(saved, params, label):
    out = []
    for buf, p in zip(saved, params):
        if buf is None:
            out.append(None)
            continue
        arr = np.asarray(buf, dtype=np.float64).copy()
        if arr.shape != p.data.shape:
            raise ConfigurationError(
                f"checkpoint {label} buffer has shape {arr.shape} "
                f"for a parameter of shape {p.data.shape}"
            )
        out.append(arr)
    return out


def clip_gradients(grads, max_norm):
    """Scale a gradient collection so its global L2 norm is at most max_norm.

    Scaling happens in place when the norm exceeds the bound; otherwise the
    buffers are untouched. Returns (grads, pre-clip global norm).
    """
    if max_norm <= 0.0:
        raise ConfigurationError(f"max_norm must be positive, got {max_norm}")
    grads = list(grads)
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return grads, norm
