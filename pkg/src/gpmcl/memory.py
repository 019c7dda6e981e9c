"""Gradient projection memory: per-layer orthonormal bases of past-task
activation subspaces, and the projections that keep new gradient steps out
of them.

After a task is trained, activations of a sample batch are collected into
one representation matrix per constrained layer (inputs for linear layers,
unrolled patch vectors for convolutions). The part of that matrix already
explained by the stored basis is removed, the residual is factorized by
SVD, and the smallest set of leading left singular vectors that tops the
representation energy up to the layer's threshold is appended to the
basis. During training of subsequent tasks every gradient is projected
onto the orthogonal complement of the stored span:

* linear layers:      ``G <- G - G @ M @ M.T``  (memory in the input dim),
* convolution layers: ``G <- G - M @ M.T @ G``  (memory in the patch dim
  of the ``(C_i*k*k, C_o)``-shaped gradient).

Bases are append-only; columns written for one task are never modified.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import linalg
from .network import Gradients, Network
from .seeding import generator
from .validation import as_matrix

log = logging.getLogger(__name__)

# Re-orthonormalize a drifted basis beyond this Gram defect.
DRIFT_TOL = 1e-6

# Cap on representation columns per memory dimension before the SVD; conv
# layers can emit n_s * h_o * w_o patch columns, far more than carry
# information about a d-dimensional subspace.
MAX_COLS_PER_DIM = 20


@dataclass
class EpsilonSchedule:
    """Per-layer energy thresholds, optionally growing per task.

    The effective threshold for 1-indexed task ``t`` at layer slot ``l``
    is ``min(1, base[l] + increment * (t - 1))``.
    """

    base: tuple[float, ...]
    increment: float = 0.0

    def __post_init__(self):
        self.base = tuple(float(b) for b in np.atleast_1d(self.base))
        if not all(0.0 < b <= 1.0 for b in self.base):
            raise ValueError(f"threshold bases must lie in (0, 1], got {self.base}")
        if self.increment < 0.0:
            raise ValueError("threshold increment must be non-negative")

    def value(self, slot: int, task_number: int, n_slots: int) -> float:
        if len(self.base) == 1:
            base = self.base[0]
        elif len(self.base) == n_slots:
            base = self.base[slot]
        else:
            raise ValueError(
                f"{len(self.base)} threshold bases for {n_slots} constrained layers"
            )
        return min(1.0, base + self.increment * (task_number - 1))


@dataclass
class RepresentationMatrix:
    """Activations of one constrained layer, one column per sample/patch."""

    slot: int
    matrix: np.ndarray


def build_representation(net: Network, samples: np.ndarray, task: int = 0,
                         max_cols_per_dim: int = MAX_COLS_PER_DIM,
                         seed: int = 0) -> list[RepresentationMatrix]:
    """Forward ``samples`` and collect per-layer representation matrices.

    Convolutional layers whose patch count exceeds ``max_cols_per_dim``
    columns per memory dimension are column-subsampled (seeded, uniform
    without replacement) to keep the SVD tractable.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 1:
        raise ValueError("need at least one sample to build representations")
    net.forward(samples, task=task, capture=True)
    reps = []
    for slot, layer in enumerate(net.constrained_layers()):
        r = layer.representation()
        cap = max_cols_per_dim * r.shape[0]
        if r.shape[1] > cap:
            rng = generator(seed, "rep-subsample", task, slot)
            keep = np.sort(rng.choice(r.shape[1], size=cap, replace=False))
            r = r[:, keep]
        reps.append(RepresentationMatrix(slot=slot, matrix=np.ascontiguousarray(r)))
    return reps


def residualize(r: np.ndarray, basis: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Remove the span of ``basis`` from ``r``.

    Returns ``(r_hat, projected_energy, total_energy)`` where ``r_hat`` is
    the residual, ``projected_energy`` the squared Frobenius norm of the
    removed component and ``total_energy`` that of ``r`` itself.
    """
    r = as_matrix(r, "representation")
    basis = as_matrix(basis, "basis", allow_empty=True)
    total = linalg.frobenius_sq(r)
    if basis.shape[1] == 0:
        return r.copy(), 0.0, total
    if basis.shape[0] != r.shape[0]:
        raise ValueError(
            f"basis dimension {basis.shape[0]} does not match representation "
            f"dimension {r.shape[0]}"
        )
    r_proj = basis @ (basis.T @ r)
    projected = linalg.frobenius_sq(r_proj)
    return r - r_proj, min(projected, total), total


class GradientMemory:
    """Append-only per-layer orthonormal bases with cached projectors."""

    def __init__(self, dims: list[int], kinds: list[str]):
        if len(dims) != len(kinds):
            raise ValueError("dims and kinds must align")
        self.dims = list(dims)
        self.kinds = list(kinds)
        self.bases = [np.empty((d, 0)) for d in dims]
        self._projectors: list[np.ndarray | None] = [None] * len(dims)

    @classmethod
    def for_network(cls, net: Network) -> "GradientMemory":
        layers = net.constrained_layers()
        return cls([l.memory_dim for l in layers], [l.kind for l in layers])

    @property
    def n_slots(self) -> int:
        return len(self.dims)

    def sizes(self) -> list[int]:
        return [b.shape[1] for b in self.bases]

    def stored_parameters(self) -> int:
        return sum(b.size for b in self.bases)

    def max_parameters(self) -> int:
        # Architecture-fixed ceiling: a full d x d basis per layer.
        return sum(d * d for d in self.dims)

    def projector(self, slot: int) -> np.ndarray | None:
        # d x d projector M @ M.T, cached because it is reused every
        # training step of a task while the basis only changes between
        # tasks.
        if self._projectors[slot] is None and self.bases[slot].shape[1] > 0:
            m = self.bases[slot]
            self._projectors[slot] = m @ m.T
        return self._projectors[slot]

    def update(self, reps: list[RepresentationMatrix], eps: EpsilonSchedule,
               task_number: int) -> list[int]:
        """Append new bases extracted from ``reps``; returns per-slot counts.

        ``task_number`` is 1-indexed and drives the threshold schedule.
        """
        added = []
        for rep in reps:
            slot = rep.slot
            d = self.dims[slot]
            basis = self.bases[slot]
            r_hat, projected, total = residualize(rep.matrix, basis)
            eps_val = eps.value(slot, task_number, self.n_slots)
            room = d - basis.shape[1]
            if room == 0:
                warnings.warn(
                    f"memory slot {slot} is at full capacity ({d}x{d}); "
                    "gradients there are fully blocked",
                    RuntimeWarning,
                )
                added.append(0)
                continue
            u, s, _ = linalg.svd(r_hat)
            k = linalg.select_rank(s, total, projected, eps_val)
            # Round-off directions must not enter the basis even when the
            # energy criterion asks for them.
            effective_rank = int(np.sum(s > linalg.RANK_EPS * s[0])) if s[0] > 0 else 0
            k = min(k, effective_rank, room)
            if k > 0:
                self.bases[slot] = np.hstack([basis, u[:, :k]])
                self._projectors[slot] = None
                if linalg.orthonormality_defect(self.bases[slot]) > DRIFT_TOL:
                    log.warning("re-orthonormalizing drifted basis at slot %d", slot)
                    self.bases[slot] = linalg.orthonormalize(self.bases[slot])
            added.append(k)
        return added

    def project(self, net: Network, grads: Gradients) -> Gradients:
        """Project gradients onto the complement of every stored span."""
        arrays = net.constrained_grads(grads)
        if len(arrays) != self.n_slots:
            raise ValueError(
                f"{len(arrays)} constrained gradients for {self.n_slots} memory slots"
            )
        out = []
        for slot, g in enumerate(arrays):
            p = self.projector(slot)
            if p is None:
                out.append(g)
            elif self.kinds[slot] == "conv":
                if g.shape[0] != self.dims[slot]:
                    raise ValueError(
                        f"gradient rows {g.shape[0]} != memory dim {self.dims[slot]}"
                    )
                out.append(g - p @ g)
            else:
                if g.shape[1] != self.dims[slot]:
                    raise ValueError(
                        f"gradient cols {g.shape[1]} != memory dim {self.dims[slot]}"
                    )
                out.append(g - g @ p)
        net.set_constrained_grads(grads, out)
        return grads

    def orthogonality_defects(self, net: Network, grads: Gradients) -> list[float]:
        """Per-slot ``|M.T G|_F / max(1, |G|_F)`` for projected gradients."""
        defects = []
        for slot, g in enumerate(net.constrained_grads(grads)):
            m = self.bases[slot]
            if m.shape[1] == 0:
                defects.append(0.0)
                continue
            overlap = m.T @ g if self.kinds[slot] == "conv" else g @ m
            defects.append(
                float(np.linalg.norm(overlap) / max(1.0, np.linalg.norm(g)))
            )
        return defects
