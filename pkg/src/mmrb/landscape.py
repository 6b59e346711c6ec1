"""Loss-landscape experiments around single examples: many-restart ascent
studies, concentration statistics of the final losses, geometry of the found
maxima against a random-point baseline, and loss profiles along segments and
attack directions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attack as attack_mod
from .attack import AttackConfig, Objective, PerturbationBudget, budget_excess
from .util import (CHUNK_ROWS, STREAM_ATTACK, STREAM_BASELINE, chunk_slices,
                   derive_rng, parallel_map)

Array = np.ndarray


@dataclass
class MaximaSet:
    """Final iterates of independent ascent restarts around one example."""
    example_index: int
    x0: Array                   # [...] single example (no batch dim)
    label: int
    deltas: Array               # [restarts, ...]
    final_losses: Array         # [restarts]
    natural_loss: float
    natural_grad: Array


def restart_study(model, x0: Array, label: int, budget: PerturbationBudget,
                  cfg: AttackConfig, n_restarts: int, example_index: int = 0,
                  threads: int = 1) -> tuple[MaximaSet, Array]:
    """Run ``n_restarts`` independent PGD ascents from uniform random starts
    and keep every final perturbation, loss, and per-step trajectory.

    Restart r draws its start from the stream (cfg.seed, example_index, r),
    matching what a restarting attack would use.
    """
    if n_restarts < 2:
        raise ValueError("need at least 2 restarts")
    x0 = np.asarray(x0, dtype=np.float64)
    obj = Objective("xent")
    y_row = np.asarray([label])

    def run_chunk(sl: slice):
        rs = range(sl.start, sl.stop)
        xc = np.repeat(x0[None], len(rs), axis=0)
        yc = np.repeat(y_row, len(rs))
        delta0 = np.empty_like(xc)
        for i, r in enumerate(rs):
            rng = derive_rng(cfg.seed, STREAM_ATTACK, example_index, r)
            delta0[i] = attack_mod.sample_start(budget, x0.shape, rng)
        xf, vals, traj, _ = attack_mod.ascend(model, xc, yc, budget,
                                              cfg.steps, cfg.alpha, obj, delta0=delta0)
        return xf - xc, vals, traj

    parts = parallel_map(run_chunk, chunk_slices(n_restarts, CHUNK_ROWS), threads=threads)
    deltas = np.concatenate([p[0] for p in parts])
    finals = np.concatenate([p[1] for p in parts])
    trajectories = np.concatenate([p[2] for p in parts])

    # re-verify the budget here, independently of the attack module's checks
    for r in range(n_restarts):
        excess = budget_excess(x0[None], (x0 + deltas[r])[None], budget)
        if excess > attack_mod.BUDGET_TOL:
            raise AssertionError(f"restart {r} left the budget by {excess:.3e}")
    if not np.all(np.isfinite(finals)):
        raise AssertionError("non-finite final loss in restart study")

    natural_loss, natural_grad = attack_mod.objective_values_grad(
        model, x0[None], y_row, obj)
    maxima = MaximaSet(example_index, x0, int(label), deltas, finals,
                       float(natural_loss[0]), natural_grad[0])
    return maxima, trajectories


def concentration_stats(m: MaximaSet) -> dict:
    """Spread summary of the final losses; an outlier exceeds
    median + 5*IQR."""
    losses = np.asarray(m.final_losses, dtype=np.float64)
    if len(losses) < 10:
        raise ValueError("need at least 10 maxima")
    q1, med, q3 = np.percentile(losses, [25, 50, 75])
    iqr = q3 - q1
    return {
        "min": float(losses.min()),
        "max": float(losses.max()),
        "median": float(med),
        "iqr": float(iqr),
        "outlier_count": int((losses > med + 5.0 * iqr).sum()),
    }


def _pair_sample(count: int, n_pairs: int, rng) -> tuple[Array, Array]:
    total = count * (count - 1) // 2
    if total <= n_pairs:
        iu = np.triu_indices(count, k=1)
        return iu[0], iu[1]
    i = rng.integers(0, count, size=n_pairs)
    j = rng.integers(0, count - 1, size=n_pairs)
    j = np.where(j >= i, j + 1, j)
    return i, j


def _pair_stats(vectors: Array, i: Array, j: Array) -> tuple[Array, Array]:
    a = vectors[i]
    b = vectors[j]
    dists = np.sqrt(((a - b) ** 2).sum(axis=1))
    norms = np.linalg.norm(vectors, axis=1)
    dots = (a * b).sum(axis=1)
    denom = norms[i] * norms[j]
    cos = np.clip(np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 1.0), -1.0, 1.0)
    return dists, np.degrees(np.arccos(cos))


def maxima_geometry(m: MaximaSet, budget: PerturbationBudget,
                    max_pairs: int = 10_000, baseline_samples: int = 1000,
                    seed: int = 0) -> dict:
    """Pairwise L2 distances and angles (vectors rooted at the natural point)
    against the same statistics for uniform random points of the ball."""
    if len(m.final_losses) < 2:
        raise ValueError("need at least 2 maxima")
    flat = m.deltas.reshape(len(m.final_losses), -1)
    rng = derive_rng(seed, STREAM_BASELINE, m.example_index)
    i, j = _pair_sample(len(flat), max_pairs, rng)
    dists, angles = _pair_stats(flat, i, j)

    base = np.empty((baseline_samples, flat.shape[1]))
    for s in range(baseline_samples):
        base[s] = attack_mod.sample_start(budget, m.x0.shape, rng).reshape(-1)
    bi, bj = _pair_sample(baseline_samples, max_pairs, rng)
    base_dists, base_angles = _pair_stats(base, bi, bj)

    return {
        "pair_i": i, "pair_j": j,
        "distances": dists, "angles_deg": angles,
        "baseline_distances": base_dists, "baseline_angles_deg": base_angles,
        "mean_distance": float(dists.mean()),
        "mean_angle_deg": float(angles.mean()),
        "baseline_mean_distance": float(base_dists.mean()),
        "baseline_mean_angle_deg": float(base_angles.mean()),
        "baseline_mean_sq_distance": float((base_dists ** 2).mean()),
    }


def segment_probe(model, x0: Array, label: int, delta1: Array, delta2: Array,
                  n_points: int, budget: PerturbationBudget | None = None,
                  seed: int = 0) -> dict:
    """Loss along the segment between two perturbations, plus the loss at a
    fresh uniform random ball point for comparison."""
    if n_points < 3:
        raise ValueError("need at least 3 probe points")
    x0 = np.asarray(x0, dtype=np.float64)
    ts = np.linspace(0.0, 1.0, n_points)
    points = np.stack([x0 + (1.0 - t) * delta1 + t * delta2 for t in ts])
    y = np.full(len(ts), label)
    losses = attack_mod.objective_values(model, points, y, Objective("xent"))
    random_loss = None
    if budget is not None:
        rng = derive_rng(seed, STREAM_BASELINE)
        probe = x0 + attack_mod.sample_start(budget, x0.shape, rng)
        random_loss = float(attack_mod.objective_values(
            model, probe[None], np.asarray([label]), Objective("xent"))[0])
    return {"t": ts, "losses": losses, "random_point_loss": random_loss}


def direction_profile(source_model, target_model, x0: Array, label: int,
                      x_adv: Array, n_points: int) -> dict:
    """Both models' losses along the ray from the natural input to the
    adversarial one (t = 0 natural, t = 1 adversarial)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x0.shape != x_adv.shape:
        raise ValueError("shape mismatch between natural and adversarial input")
    ts = np.linspace(0.0, 1.0, n_points)
    points = np.stack([x0 + t * (x_adv - x0) for t in ts])
    y = np.full(len(ts), label)
    obj = Objective("xent")
    return {
        "t": ts,
        "loss_source": attack_mod.objective_values(source_model, points, y, obj),
        "loss_target": attack_mod.objective_values(target_model, points, y, obj),
    }
