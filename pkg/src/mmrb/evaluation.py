"""Robustness measurement: accuracy under attack (white-box and transfer),
epsilon sweeps with an exact monotonicity construction, source-by-target
transfer grids, gradient-angle histograms, and learned-weight inspection.

Every accuracy is backed by per-example verdict rows so reported numbers can
be recomputed from the emitted records.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attack as attack_mod
from .attack import AttackConfig, Objective, PerturbationBudget
from .nn import Model
from .util import STREAM_BASELINE, derive_rng

Array = np.ndarray


@dataclass
class EvalRow:
    attack: str
    source: str
    target: str
    accuracy: float
    n: int


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    verdicts: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"rows": [vars(r) for r in self.rows]}


def _verdict_rows(attack_name: str, source: str, target: str, y: Array,
                  natural_pred: Array, adv_pred: Array) -> list[dict]:
    rows = []
    for i in range(len(y)):
        rows.append({
            "example_index": i,
            "attack": attack_name,
            "source": source,
            "target": target,
            "label": int(y[i]),
            "natural_pred": int(natural_pred[i]),
            "adv_pred": int(adv_pred[i]),
            "correct": bool(adv_pred[i] == y[i]),
        })
    return rows


def robust_accuracy(target_model: Model, source_model: Model, x: Array, y: Array,
                    cfg: AttackConfig, budget: PerturbationBudget,
                    threads: int = 1) -> tuple[float, list[dict], attack_mod.AttackOutcome]:
    """Accuracy of the target on examples crafted with the source's gradients
    (source is the target itself in the white-box case)."""
    if target_model.num_classes != source_model.num_classes:
        raise ValueError("models disagree on class count")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    outcome = attack_mod.run_attack(source_model, x, y, budget, cfg, threads=threads)
    adv_pred = target_model.predict(outcome.x_adv)
    natural_pred = target_model.predict(x)
    accuracy = float((adv_pred == y).mean())
    verdicts = _verdict_rows(cfg.kind, "source", "target", y, natural_pred, adv_pred)
    return accuracy, verdicts, outcome


def natural_accuracy(model: Model, x: Array, y: Array) -> float:
    return float((model.predict(x) == np.asarray(y)).mean())


def sweep_alpha(epsilon: float, steps: int) -> float:
    """Step-size policy for sweeps: total movement proportional to epsilon."""
    return 2.5 * epsilon / steps


def epsilon_sweep(model: Model, x: Array, y: Array, norm: str, eps_list,
                  steps: int, restarts: int = 1, seed: int = 0,
                  box: tuple[float, float] = (0.0, 1.0),
                  threads: int = 1) -> dict:
    """Robust accuracy per epsilon under the same step-count policy.

    A perturbation found at a smaller epsilon stays feasible at any larger
    one, so each example's 'fooled' flag is carried forward; the curve is
    exactly non-increasing by construction.
    """
    eps_list = list(eps_list)
    if any(b < a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps list must be ascending")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    fooled = np.zeros(len(y), dtype=bool)
    accuracies = []
    fooled_matrix = []
    for eps in eps_list:
        if eps > 0.0:
            budget = PerturbationBudget(norm=norm, epsilon=eps, box=box)
            cfg = AttackConfig(kind="pgd", steps=steps, alpha=sweep_alpha(eps, steps),
                               restarts=restarts, random_start=True, seed=seed)
            outcome = attack_mod.run_attack(model, x, y, budget, cfg, threads=threads)
            fooled |= model.predict(outcome.x_adv) != y
        else:
            fooled |= model.predict(x) != y
        accuracies.append(1.0 - float(fooled.mean()))
        fooled_matrix.append(fooled.copy())
    return {"epsilon": np.asarray(eps_list, dtype=np.float64),
            "accuracy": np.asarray(accuracies, dtype=np.float64),
            "fooled": np.stack(fooled_matrix)}


def transfer_matrix(models: list[tuple[str, Model]], cfgs: list[tuple[str, AttackConfig]],
                    budget: PerturbationBudget, x: Array, y: Array,
                    threads: int = 1) -> EvalReport:
    """Full source-by-target accuracy grid for each attack config; the
    diagonal is exactly the white-box call."""
    if len(models) < 2:
        raise ValueError("need at least 2 models")
    report = EvalReport()
    for attack_name, cfg in cfgs:
        for source_label, source in models:
            for target_label, target in models:
                acc, verdicts, _ = robust_accuracy(target, source, x, y, cfg, budget,
                                                   threads=threads)
                report.rows.append(EvalRow(attack_name, source_label, target_label,
                                           acc, len(y)))
                for v in verdicts:
                    v["source"] = source_label
                    v["target"] = target_label
                    v["attack"] = attack_name
                report.verdicts.extend(verdicts)
    return report


def input_gradients(model: Model, x: Array, y: Array) -> Array:
    """Per-example cross-entropy input gradients, flattened to [n, d]."""
    _, grad = attack_mod.objective_values_grad(model, x, y, Objective("xent"))
    return grad.reshape(len(x), -1)


def gradient_angle_histogram(model_a: Model, model_b: Model, x: Array, y: Array,
                             bins: int = 30, seed: int = 0) -> dict:
    """Angles between the two models' input gradients at the same examples,
    against a baseline of angles between gradients at random example pairs
    of the first model."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    ga = input_gradients(model_a, x, y)
    gb = input_gradients(model_b, x, y)
    na = np.linalg.norm(ga, axis=1)
    nb = np.linalg.norm(gb, axis=1)
    ok = (na > 0) & (nb > 0)
    skipped = int((~ok).sum())
    cos = (ga[ok] * gb[ok]).sum(axis=1) / (na[ok] * nb[ok])
    angles = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))

    rng = derive_rng(seed, STREAM_BASELINE)
    n = len(x)
    i = rng.integers(0, n, size=len(angles) if len(angles) else n)
    j = rng.integers(0, n - 1, size=len(i))
    j = np.where(j >= i, j + 1, j)
    okb = (na[i] > 0) & (na[j] > 0)
    cos_b = (ga[i[okb]] * ga[j[okb]]).sum(axis=1) / (na[i[okb]] * na[j[okb]])
    baseline = np.degrees(np.arccos(np.clip(cos_b, -1.0, 1.0)))

    edges = np.linspace(0.0, 180.0, bins + 1)
    return {
        "angles_deg": angles,
        "baseline_deg": baseline,
        "skipped_zero_grad": skipped,
        "hist_counts": np.histogram(angles, bins=edges)[0],
        "baseline_counts": np.histogram(baseline, bins=edges)[0],
        "bin_edges": edges,
        "mean_angle_deg": float(angles.mean()) if len(angles) else float("nan"),
        "baseline_mean_deg": float(baseline.mean()) if len(baseline) else float("nan"),
    }


def inspect_weights(model: Model, utilization_threshold: float = 1e-3,
                    dominance_ratio: float = 0.9, hist_bins: int = 50) -> dict:
    """First-conv-layer filter census, per-filter dominant-weight ratios,
    final-layer per-class biases, and weight histograms.

    A filter counts as utilized when max|w| exceeds the threshold; it looks
    like a thresholding filter when its top weight carries more than the
    dominance share of the filter's L1 mass.
    """
    conv_idx = None
    affine_idx = None
    pi = 0
    for layer in model.spec.layers:
        if layer.kind == "conv" and conv_idx is None:
            conv_idx = pi
        if layer.kind in ("conv", "affine"):
            if layer.kind == "affine":
                affine_idx = pi
            pi += 1
    if conv_idx is None or affine_idx is None:
        raise ValueError("model needs a conv layer and a final affine layer")

    w = model.params.weights[conv_idx]            # [kh, kw, c_in, filters]
    filters = w.shape[-1]
    flat = np.abs(w.reshape(-1, filters))
    maxes = flat.max(axis=0)
    l1 = flat.sum(axis=0)
    utilized = maxes > utilization_threshold
    ratios = np.where(l1 > 0, maxes / np.where(l1 > 0, l1, 1.0), 0.0)
    thresholding = utilized & (ratios > dominance_ratio)

    all_weights = np.concatenate([p.reshape(-1) for p in model.params.weights])
    counts, edges = np.histogram(all_weights, bins=hist_bins)
    first_w = model.params.weights[conv_idx].reshape(-1)
    first_counts, first_edges = np.histogram(first_w, bins=hist_bins)

    biases = model.params.biases[affine_idx]
    return {
        "total_filters": int(filters),
        "utilized_filters": int(utilized.sum()),
        "thresholding_filters": int(thresholding.sum()),
        "dominant_ratios": ratios,
        "class_biases": biases.copy(),
        "bias_spread": float(biases.max() - biases.min()),
        "weight_hist": {"counts": counts, "edges": edges},
        "first_layer_hist": {"counts": first_counts, "edges": first_edges},
    }
