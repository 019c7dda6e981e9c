"""Dense linear-algebra kernels for the projection memory.

The decomposition routines are implemented here rather than delegated to
LAPACK so that results are deterministic across BLAS builds and every step
is auditable: :func:`svd` is a one-sided Jacobi SVD (round-robin cyclic
ordering, columnwise rotations), which orthogonalizes the columns of the
input directly and therefore keeps high relative accuracy even for very
small singular values. Elementary array arithmetic uses numpy.

Conventions:

* thin SVD: ``a = u @ diag(s) @ vt`` with ``min(a.shape)`` singular values,
  sorted non-increasing;
* the first nonzero entry of every left singular vector is positive, so
  decompositions are reproducible in fixtures;
* singular values below ``RANK_EPS * s[0]`` are treated as zero wherever a
  rank is counted, to keep round-off directions out of stored bases.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .validation import NumericError, as_matrix, check_finite

# Relative cutoff below which a singular value counts as zero.
RANK_EPS = 1e-12

# Relative off-diagonal magnitude at which a column pair counts as orthogonal.
_JACOBI_TOL = 1e-14

_MAX_SWEEPS = 60


class SvdResult(NamedTuple):
    """Thin singular value decomposition ``u @ diag(s) @ vt``."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def frobenius_sq(a) -> float:
    """Squared Frobenius norm, the energy measure used by rank selection."""
    a = as_matrix(a, "a", allow_empty=True)
    return float(np.einsum("ij,ij->", a, a))


def orthonormality_defect(m) -> float:
    """Max-norm distance of ``m``'s Gram matrix from the identity.

    Zero columns of memory are a valid (empty) basis, so an empty matrix
    reports a defect of 0.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"basis must be 2-D, got ndim={m.ndim}")
    if m.shape[1] == 0:
        return 0.0
    check_finite(m, "basis")
    gram = m.T @ m
    return float(np.abs(gram - np.eye(m.shape[1])).max())


def select_rank(
    singular_values: Sequence[float],
    total_energy: float,
    projected_energy: float,
    eps_th: float,
) -> int:
    """Smallest number of leading singular directions meeting the threshold.

    Returns the minimum ``k`` with
    ``projected_energy + sum(s[:k]**2) >= eps_th * total_energy``.
    ``projected_energy`` is the energy already captured by an existing
    basis; with ``projected_energy == 0`` this is plain energy truncation.
    If even the full spectrum cannot meet the threshold, ``k`` is the
    number of singular values.
    """
    if not 0.0 < eps_th <= 1.0:
        raise ValueError(f"eps_th must be in (0, 1], got {eps_th}")
    if projected_energy < 0 or total_energy < 0:
        raise ValueError("energies must be non-negative")
    if projected_energy > total_energy * (1 + 1e-9) + 1e-12:
        raise ValueError(
            f"projected energy {projected_energy} exceeds total {total_energy}"
        )
    s = np.asarray(singular_values, dtype=np.float64)
    target = eps_th * total_energy
    accounted = projected_energy
    if accounted >= target:
        return 0
    for k, sigma in enumerate(s, start=1):
        accounted += sigma * sigma
        if accounted >= target:
            return k
    return len(s)


def svd(a) -> SvdResult:
    """Thin SVD by one-sided Jacobi rotations.

    Raises
    ------
    NumericError
        If the rotations have not converged after the sweep cap; carries
        the worst remaining relative off-diagonal as ``residual``.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if m >= n:
        u, s, v = _jacobi_onesided(a)
        return SvdResult(*_fix_signs(u, s, v.T))
    # Wide input: factor the transpose and swap the roles of u and v.
    u_t, s, v_t = _jacobi_onesided(a.T)
    return SvdResult(*_fix_signs(v_t, s, u_t.T))


def orthonormalize(m: np.ndarray, drop_tol: float = 1e-10) -> np.ndarray:
    """Re-orthonormalize ``m``'s columns in place-order by repeated MGS.

    Columns are processed in their original order (two Gram-Schmidt passes
    each, which restores orthogonality to round-off from a mildly drifted
    basis); a column whose residual falls below ``drop_tol`` relative to
    its input norm is numerically dependent on its predecessors and is
    dropped.
    """
    m = as_matrix(m, "basis", allow_empty=True)
    kept: list[np.ndarray] = []
    for j in range(m.shape[1]):
        v = m[:, j].copy()
        ref = np.linalg.norm(v)
        if ref == 0.0:
            continue
        for _ in range(2):
            for q in kept:
                v -= (q @ v) * q
        norm = np.linalg.norm(v)
        if norm > drop_tol * ref:
            kept.append(v / norm)
    if not kept:
        return np.empty((m.shape[0], 0))
    return np.column_stack(kept)


def _round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Circle-method tournament schedule: n-1 rounds of disjoint column
    # pairs, jointly covering every unordered pair exactly once. Disjoint
    # pairs within a round can be rotated in one vectorized step.
    padded = n if n % 2 == 0 else n + 1
    others = list(range(1, padded))
    rounds = []
    for _ in range(padded - 1):
        order = [0] + others
        left = order[: padded // 2]
        right = order[padded // 2:][::-1]
        pairs = [(p, q) for p, q in zip(left, right) if p < n and q < n]
        rounds.append(
            (
                np.array([p for p, _ in pairs], dtype=np.intp),
                np.array([q for _, q in pairs], dtype=np.intp),
            )
        )
        others = others[-1:] + others[:-1]
    return rounds


def _jacobi_onesided(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Orthogonalize the columns of b = a @ v by plane rotations; on exit
    # the column norms are the singular values and b's normalized columns
    # the left singular vectors. Requires rows >= cols.
    #
    # Rotation angles for one sweep are taken from the Gram matrix
    # g = b.T @ b (rebuilt fresh every sweep, updated two-sidedly per
    # round) and the sweep's rotations are accumulated into one n-by-n
    # orthogonal factor applied to b by a single product. Only orthogonal
    # factors ever touch b, so accuracy is set by the final column norms,
    # not by the Gram arithmetic; the Gram round-off only limits how small
    # an off-diagonal the stopping test can certify, hence the m-dependent
    # floor on the tolerance.
    m, n = a.shape
    b = np.array(a, dtype=np.float64, copy=True)
    v = np.eye(n)
    if n == 1:
        return _finalize(b, v)

    rounds = _round_robin_pairs(n)
    tol = max(_JACOBI_TOL, 4.0 * np.finfo(np.float64).eps * m)
    worst = np.inf
    for _ in range(_MAX_SWEEPS):
        g = b.T @ b
        rot = np.eye(n)
        worst = 0.0
        rotated = False
        for ip, iq in rounds:
            app = g[ip, ip]
            aqq = g[iq, iq]
            apq = g[ip, iq]
            # Incremental Gram updates can leave tiny negative diagonals.
            scale = np.sqrt(np.maximum(app * aqq, 0.0))
            live = scale > 0.0
            rel = np.zeros_like(apq)
            rel[live] = np.abs(apq[live]) / scale[live]
            worst = max(worst, float(rel.max(initial=0.0)))
            act = rel > tol
            if not act.any():
                continue
            rotated = True
            tau = (aqq[act] - app[act]) / (2.0 * apq[act])
            t = np.where(tau >= 0.0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            jp = ip[act]
            jq = iq[act]
            gp = g[:, jp]
            gq = g[:, jq]
            g[:, jp] = c * gp - s * gq
            g[:, jq] = s * gp + c * gq
            gp = g[jp, :]
            gq = g[jq, :]
            g[jp, :] = c[:, None] * gp - s[:, None] * gq
            g[jq, :] = s[:, None] * gp + c[:, None] * gq
            rp = rot[:, jp]
            rq = rot[:, jq]
            rot[:, jp] = c * rp - s * rq
            rot[:, jq] = s * rp + c * rq
        if rotated:
            b = b @ rot
            v = v @ rot
        if worst <= tol:
            return _finalize(b, v)
    raise NumericError(
        f"one-sided Jacobi SVD did not converge in {_MAX_SWEEPS} sweeps "
        f"(worst relative off-diagonal {worst:.3e})",
        residual=worst,
    )


def _finalize(b: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norms = np.linalg.norm(b, axis=0)
    order = np.argsort(-norms, kind="stable")
    s = norms[order]
    u = b[:, order]
    v = v[:, order]
    nonzero = s > 0.0
    u[:, nonzero] /= s[nonzero]
    if not nonzero.all():
        _complete_null_columns(u, np.flatnonzero(~nonzero))
    return u, s, v


def _complete_null_columns(u: np.ndarray, null_cols: np.ndarray) -> None:
    # Exactly rank-deficient inputs leave zero columns; fill them with an
    # orthonormal completion (canonical vectors, Gram-Schmidt twice) so u
    # always has orthonormal columns.
    m = u.shape[0]
    filled = [u[:, j] for j in range(u.shape[1]) if j not in set(null_cols)]
    candidate = 0
    for j in null_cols:
        while True:
            if candidate >= m:
                raise NumericError("failed to complete orthonormal basis")
            vec = np.zeros(m)
            vec[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                for q in filled:
                    vec -= (q @ vec) * q
            norm = np.linalg.norm(vec)
            if norm > 0.1:
                vec /= norm
                u[:, j] = vec
                filled.append(vec)
                break


def _fix_signs(
    u: np.ndarray, s: np.ndarray, vt: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Reproducibility convention: first nonzero entry of each left
    # singular vector is positive.
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(col)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            vt[j, :] = -vt[j, :]
    return u, s, vt
