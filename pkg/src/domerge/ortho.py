"""Data-free group orthogonalization of same-height matrices.

Perturbs each member of a group by a small additive delta so that the pairwise
column-space Gram masses shrink, under a hard per-member budget on the
relative Frobenius size of the perturbation. Used on the low-rank factor
groups of a layer before merging; also runs directly on full-rank matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import _as_matrix

# line-search halvings before a step is declared stuck
_MAX_BACKTRACKS = 30


@dataclass(frozen=True)
class OrthoConfig:
    """Tunables for the perturbation descent.

    mu: weight on the perturbation-size penalty. None picks
        initial_Lo / sum_i ||W_i||_F^2 so both loss terms start at
        comparable scale.
    step_size: initial trial step; internally scaled by
        1 / (sum_j ||W_j||_F^2 + mu) as a crude curvature estimate, then
        backtracked. The default is conservative; experiments that need the
        optimizer to actually converge on nearly-orthogonal groups should
        raise it (backtracking keeps any value safe).
    max_rel_perturbation: hard cap on ||delta_i||_F / ||W_i||_F, enforced by
        projection every step, never just at convergence.
    seed: recorded for provenance; the descent itself is deterministic
        (zero-initialized, no sampling).
    """

    mu: float | None = None
    max_steps: int = 200
    step_size: float = 1e-2
    rel_loss_tol: float = 1e-6
    max_rel_perturbation: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.mu is not None and self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not (0 < self.max_rel_perturbation < 1):
            raise ValueError("max_rel_perturbation must lie in (0, 1)")


@dataclass
class OrthoStats:
    initial_lo: float
    final_lo: float
    steps_taken: int
    per_member_rel_perturbation: list[float]
    # cross-Gram part of the loss after every accepted step, starting at the
    # initial value; non-increasing by construction of the acceptance rule
    lo_trajectory: list[float] = field(default_factory=list)


def _check_group(mats, deltas=None):
    mats = [_as_matrix(w, f"mats[{i}]") for i, w in enumerate(mats)]
    if not mats:
        raise ValueError("empty group")
    rows = mats[0].shape[0]
    for i, w in enumerate(mats):
        if w.shape[0] != rows:
            raise ValueError(f"mats[{i}] has {w.shape[0]} rows, expected {rows}")
    if deltas is not None:
        deltas = [np.asarray(d, dtype=np.float64) for d in deltas]
        if len(deltas) != len(mats):
            raise ValueError("deltas length must match group size")
        for i, (w, d) in enumerate(zip(mats, deltas)):
            if d.shape != w.shape:
                raise ValueError(f"deltas[{i}] shape {d.shape} != mats[{i}] shape {w.shape}")
    return mats, deltas


def _cross_gram_sum(perturbed) -> float:
    total = 0.0
    for i in range(len(perturbed)):
        for j in range(i + 1, len(perturbed)):
            total += float(np.linalg.norm(perturbed[i].T @ perturbed[j]) ** 2)
    return total


def ortho_loss(mats, deltas, mu: float) -> float:
    """sum_{i<j} ||(W_i+d_i)^T (W_j+d_j)||_F^2 + mu * sum_i ||d_i||_F^2."""
    mats, deltas = _check_group(mats, deltas)
    perturbed = [w + d for w, d in zip(mats, deltas)]
    reg = sum(float(np.linalg.norm(d) ** 2) for d in deltas)
    return _cross_gram_sum(perturbed) + mu * reg


def ortho_grad(mats, deltas, mu: float) -> list[np.ndarray]:
    """Analytic gradient of ortho_loss with respect to each delta.

    d/d(delta_i) = 2 sum_{j != i} X_j X_j^T X_i + 2 mu delta_i,
    with X_k = W_k + delta_k. Grouped as X_j (X_j^T X_i) so the work stays
    at Gram size, and so the gradient is exactly zero on a mutually
    orthogonal group with zero deltas.
    """
    mats, deltas = _check_group(mats, deltas)
    x = [w + d for w, d in zip(mats, deltas)]
    grads = []
    for i in range(len(x)):
        g = 2.0 * mu * deltas[i]
        for j in range(len(x)):
            if j != i:
                g = g + 2.0 * x[j] @ (x[j].T @ x[i])
        grads.append(g)
    return grads


def orthogonalize_group(mats, config: OrthoConfig | None = None):
    """Run projected gradient descent on the group; returns (perturbed, stats).

    Steps are accepted only when the total loss strictly decreases and the
    cross-Gram part does not increase, so the reported lo trajectory is
    non-increasing and final_lo <= initial_lo holds unconditionally. Each
    accepted iterate is projected member-wise onto the perturbation ball
    ||delta_i||_F <= max_rel_perturbation * ||W_i||_F.
    """
    if config is None:
        config = OrthoConfig()
    mats, _ = _check_group(mats)
    n = len(mats)
    member_norms = [float(np.linalg.norm(w)) for w in mats]
    deltas = [np.zeros_like(w) for w in mats]
    initial_lo = _cross_gram_sum(mats)

    if n == 1:
        stats = OrthoStats(0.0, 0.0, 0, [0.0], [0.0])
        return [w.copy() for w in mats], stats

    total_sq = sum(v * v for v in member_norms)
    mu = config.mu
    if mu is None:
        mu = initial_lo / total_sq if total_sq > 0 else 0.0
    # target a hair inside the budget so the measured ratio ||d||/||W||
    # stays <= max_rel_perturbation after its own rounding
    caps = [config.max_rel_perturbation * (1.0 - 1e-12) * v for v in member_norms]
    t_base = config.step_size / (total_sq + mu) if (total_sq + mu) > 0 else config.step_size

    cur_lo = initial_lo
    cur = initial_lo  # deltas are zero so the penalty term starts at 0
    trajectory = [initial_lo]
    steps = 0
    for _ in range(config.max_steps):
        grads = ortho_grad(mats, deltas, mu)
        t = t_base
        accepted = None
        for _ in range(_MAX_BACKTRACKS):
            trial = []
            for d, g, cap in zip(deltas, grads, caps):
                nd = d - t * g
                norm = np.linalg.norm(nd)
                if norm > cap:
                    nd = nd * (cap / norm) if norm > 0 else nd
                trial.append(nd)
            new = ortho_loss(mats, trial, mu)
            new_lo = _cross_gram_sum([w + d for w, d in zip(mats, trial)])
            if new < cur and new_lo <= cur_lo:
                accepted = (trial, new, new_lo)
                break
            t *= 0.5
        if accepted is None:
            break
        trial, new, new_lo = accepted
        rel_change = (cur - new) / cur if cur > 0 else 0.0
        deltas, cur, cur_lo = trial, new, new_lo
        trajectory.append(cur_lo)
        steps += 1
        if rel_change < config.rel_loss_tol:
            break

    rels = [
        float(np.linalg.norm(d) / v) if v > 0 else 0.0
        for d, v in zip(deltas, member_norms)
    ]
    stats = OrthoStats(
        initial_lo=initial_lo,
        final_lo=cur_lo,
        steps_taken=steps,
        per_member_rel_perturbation=rels,
        lo_trajectory=trajectory,
    )
    return [w + d for w, d in zip(mats, deltas)], stats
