"""
Stochastic gradient descent and multi-step learning-rate policies.
"""

import logging
import math
import re
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, DimensionError

logger = logging.getLogger("electroprune")


def sgd_step(model, gradients, lr, momentum=0.0, weight_decay=0.0):
    """
    Update the model parameters in place.

    Weight decay is added to the gradient as an L2 term before the
    momentum recurrence ``v <- momentum v + g``; the first step sets
    ``v = g``. Buffers live on ``model.velocity`` and persist between calls.

    Parameters
    ----------
    model : `electroprune.network.Model`
    gradients : dict
       Gradients keyed like `Model.parameters`. Parameters without a
       gradient are left untouched.
    lr : float
       The learning rate, which must be positive.
    momentum : float, optional
    weight_decay : float, optional
    """
    if lr <= 0:
        raise ConfigurationError(f"The learning rate must be positive, got {lr}.")
    for name, param in model.parameters().items():
        if name not in gradients:
            continue
        grad = gradients[name]
        if grad.shape != param.shape:
            raise DimensionError(
                name, f"gradient shape {grad.shape} does not match parameter {param.shape}"
            )
        if weight_decay:
            grad = grad + weight_decay * param
        if momentum:
            buffer = model.velocity.get(name)
            if buffer is None or buffer.shape != param.shape:
                buffer = np.array(grad, dtype=param.dtype)
            else:
                buffer = momentum * buffer + grad
            model.velocity[name] = buffer
            grad = buffer
        param -= lr * grad


@dataclass(frozen=True)
class LrPolicy:
    """
    A multi-step learning-rate policy.

    Parameters
    ----------
    milestones : tuple
       ``(start_epoch, lr)`` pairs; start epochs strictly increase from 0.
    name : str, optional
       The preset name this policy was resolved from.
    """

    milestones: tuple
    name: str = None

    def __post_init__(self):
        milestones = tuple((int(epoch), float(lr)) for epoch, lr in self.milestones)
        object.__setattr__(self, "milestones", milestones)
        if not milestones or milestones[0][0] != 0:
            raise ConfigurationError("A learning-rate policy must start at epoch 0.")
        epochs = [epoch for epoch, _ in milestones]
        if any(later <= earlier for earlier, later in zip(epochs, epochs[1:])):
            raise ConfigurationError(
                f"Learning-rate milestones must strictly increase, got {epochs}."
            )
        if any(lr <= 0 for _, lr in milestones):
            raise ConfigurationError("Every learning rate must be positive.")

    def scaled(self, divisor):
        """
        Compress the schedule by dividing every milestone epoch by ``divisor``.
        """
        milestones = []
        for epoch, lr in self.milestones:
            start = int(math.floor(epoch / divisor))
            if milestones and start <= milestones[-1][0]:
                raise ConfigurationError(
                    f"Scaling by {divisor} merges milestones of {self.name or self}."
                )
            milestones.append((start, lr))
        name = f"{self.name}/{divisor}" if self.name else None
        return LrPolicy(tuple(milestones), name=name)

    def to_string(self):
        return ",".join(f"{epoch}:{lr:g}" for epoch, lr in self.milestones)


#: Multi-step policies used by the full-length presets.
P1 = LrPolicy(((0, 1e-1), (100, 1e-2), (150, 1e-3)), name="P1")
P2 = LrPolicy(((0, 1e-2), (60, 1e-3), (90, 1e-4)), name="P2")
NAMED_POLICIES = {"P1": P1, "P2": P2}


def lr_at(policy, epoch):
    """
    The learning rate of the latest milestone starting at or before ``epoch``.
    """
    if epoch < 0:
        raise ConfigurationError(f"Epochs are non-negative, got {epoch}.")
    current = policy.milestones[0][1]
    for start, lr in policy.milestones:
        if start > epoch:
            break
        current = lr
    return current


def parse_policy(text):
    """
    Resolve a policy from its name or its milestone notation.

    ``P1``, ``P2`` and scaled forms such as ``P1/10`` are looked up by
    name; anything else is read as ``"0:0.1,100:0.01,150:0.001"``.
    """
    if isinstance(text, LrPolicy):
        return text
    if isinstance(text, (int, float)):
        return LrPolicy(((0, float(text)),))
    text = str(text).strip()
    match = re.fullmatch(r"(P\d+)(?:/(\d+))?", text)
    if match:
        base = NAMED_POLICIES.get(match.group(1))
        if base is None:
            raise ConfigurationError(f"Unknown learning-rate policy {text}.")
        return base.scaled(int(match.group(2))) if match.group(2) else base
    milestones = []
    try:
        for item in text.split(","):
            epoch, lr = item.split(":")
            milestones.append((int(epoch), float(lr)))
    except ValueError:
        raise ConfigurationError(
            f"Could not read the learning-rate policy {text!r}; "
            "expected a name such as P1 or milestones like 0:0.1,100:0.01."
        ) from None
    return LrPolicy(tuple(milestones))
