"""SGD with momentum and L2 weight decay."""

import numpy as np


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, velocities=None):
    """One in-place SGD update.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    ``params``/``grads``/``velocities`` are parallel lists of arrays; returns the
    velocity list (created as zeros when ``velocities`` is None).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if velocities is None:
        velocities = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return velocities


class SGD:
    def __init__(self, params, momentum=0.9, weight_decay=5e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr, grads=None):
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_step([p.data for p in self.params], grads, lr, self.momentum, self.weight_decay,
                 self.velocities)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
