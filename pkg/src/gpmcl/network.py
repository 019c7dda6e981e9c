"""Network container: a layer stack plus one or more classifier heads.

``head_mode="single"`` shares one classifier across all tasks (inference
needs no task identity; the head is constrained by the projection memory
like any other layer). ``head_mode="multi"`` keeps one classifier per
task; task heads are trained freely and excluded from the memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Conv2d, Flatten, Linear, MaxPool2d, ReLU
from .seeding import generator


@dataclass
class Gradients:
    """Weight gradients aligned with a network's structure."""

    trunk: list  # entry per trunk layer: ndarray for weighted layers, None otherwise
    head: np.ndarray
    task: int


class Network:
    def __init__(self, layers: list, heads: list[Linear], head_mode: str):
        if head_mode not in ("single", "multi"):
            raise ValueError(f"head_mode must be 'single' or 'multi', got {head_mode!r}")
        if head_mode == "single" and len(heads) != 1:
            raise ValueError("single-head network takes exactly one head")
        self.layers = layers
        self.heads = heads
        self.head_mode = head_mode

    def head_for(self, task: int) -> Linear:
        if self.head_mode == "single":
            return self.heads[0]
        if not 0 <= task < len(self.heads):
            raise LookupError(f"no head for task index {task}")
        return self.heads[task]

    def forward(self, x: np.ndarray, task: int = 0, capture: bool = True) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            h = layer.forward(h, capture=capture)
        return self.head_for(task).forward(h, capture=capture)

    def backward(self, dlogits: np.ndarray, task: int = 0) -> Gradients:
        head = self.head_for(task)
        dy, dw_head = head.backward(dlogits)
        trunk_grads: list = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dy, dw = self.layers[i].backward(dy)
            trunk_grads[i] = dw
        return Gradients(trunk=trunk_grads, head=dw_head, task=task)

    def sgd_step(self, grads: Gradients, lr: float) -> None:
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        for layer, dw in zip(self.layers, grads.trunk):
            if dw is not None:
                layer.weight -= lr * dw
        self.head_for(grads.task).weight -= lr * grads.head

    def constrained_layers(self) -> list:
        """Layers whose gradients the projection memory constrains.

        All weighted trunk layers, plus the shared classifier in
        single-head mode; per-task heads are never constrained.
        """
        weighted = [layer for layer in self.layers if layer.weight is not None]
        if self.head_mode == "single":
            weighted.append(self.heads[0])
        return weighted

    def constrained_grads(self, grads: Gradients) -> list[np.ndarray]:
        """Gradient arrays aligned with :meth:`constrained_layers`."""
        out = [dw for dw in grads.trunk if dw is not None]
        if self.head_mode == "single":
            out.append(grads.head)
        return out

    def set_constrained_grads(self, grads: Gradients, arrays: list[np.ndarray]) -> None:
        it = iter(arrays)
        for i, dw in enumerate(grads.trunk):
            if dw is not None:
                grads.trunk[i] = next(it)
        if self.head_mode == "single":
            grads.head = next(it)

    def weight_snapshot(self) -> list[np.ndarray]:
        """Copies of constrained-layer weights (for interference analysis)."""
        return [layer.weight.copy() for layer in self.constrained_layers()]

    def all_weights(self) -> list[np.ndarray]:
        weighted = [layer.weight for layer in self.layers if layer.weight is not None]
        return weighted + [head.weight for head in self.heads]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    p = expz / expz.sum(axis=1, keepdims=True)
    eps = 1e-300
    loss = float(-np.log(p[np.arange(n), labels] + eps).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def mse_loss(outputs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Half squared error averaged over the batch (kept for linear-probe tests)."""
    n = outputs.shape[0]
    diff = outputs - targets
    loss = float(0.5 * np.einsum("ij,ij->", diff, diff) / n)
    return loss, diff / n


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


NETWORK_PRESETS = ("mlp-100-100", "mlp-linear", "small-conv")


def make_network(preset: str, input_shape: tuple, n_classes: int,
                 n_heads: int, head_mode: str, seed: int) -> Network:
    """Build a preset network for the given input shape.

    ``mlp-100-100``  flatten, two 100-unit ReLU layers, classifier;
    ``mlp-linear``   flatten, two 100-unit layers with no nonlinearity
                     (activations stay in exact low-rank subspaces, which
                     the zero-interference tests rely on);
    ``small-conv``   three 3x3 conv blocks (16/32/64 channels, each with
                     ReLU and 2x2 max-pool), a 128-unit ReLU layer,
                     classifier.
    """
    if head_mode == "single":
        n_heads = 1

    def rng(tag):
        return generator(seed, "init", preset, tag)

    if preset in ("mlp-100-100", "mlp-linear"):
        in_dim = int(np.prod(input_shape))
        layers: list = [Flatten(), Linear(in_dim, 100, rng("fc1"))]
        if preset == "mlp-100-100":
            layers.append(ReLU())
        layers.append(Linear(100, 100, rng("fc2")))
        if preset == "mlp-100-100":
            layers.append(ReLU())
        heads = [Linear(100, n_classes, rng(f"head{i}")) for i in range(n_heads)]
        return Network(layers, heads, head_mode)

    if preset == "small-conv":
        if len(input_shape) != 3:
            raise ValueError(f"small-conv needs (C, h, w) inputs, got {input_shape}")
        c, h, w = input_shape
        layers = []
        channels = (16, 32, 64)
        prev = c
        for i, ch in enumerate(channels):
            layers += [Conv2d(prev, ch, 3, rng(f"conv{i+1}"), stride=1, padding=1),
                       ReLU(), MaxPool2d(2)]
            prev = ch
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ValueError(f"input {input_shape} too small for small-conv")
        flat = prev * h * w
        layers += [Flatten(), Linear(flat, 128, rng("fc1")), ReLU()]
        heads = [Linear(128, n_classes, rng(f"head{i}")) for i in range(n_heads)]
        return Network(layers, heads, head_mode)

    raise ValueError(f"unknown network preset {preset!r} (choose from {NETWORK_PRESETS})")
