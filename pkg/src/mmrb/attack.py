"""Inner-maximization suite: norm-ball budgets, projections, FGSM, multi-
restart PGD, clipped-margin objectives, targeted descent, and randomized FGSM.

All attacks operate on batched numpy arrays (first axis = examples) against
any model exposing ``logits_tape``/``logits``/``predict``; per-example RNG
streams are derived from (seed, example index, restart index), so outcomes
are independent of chunking and thread count.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .tensor import Tensor
from .util import CHUNK_ROWS, STREAM_ATTACK, chunk_slices, derive_rng, parallel_map

Array = np.ndarray

BUDGET_TOL = 1e-9


@dataclass(frozen=True)
class PerturbationBudget:
    """The allowed perturbation set: a norm ball intersected with a pixel box."""
    norm: str = "linf"                    # linf | l2
    epsilon: float = 0.3
    box: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not self.box[0] < self.box[1]:
            raise ValueError("box requires lo < hi")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"                     # fgsm | fgsm_random | pgd | cw_pgd | targeted_pgd
    steps: int = 40
    alpha: float = 0.01
    restarts: int = 1
    random_start: bool = True
    kappa: float = 0.0                    # cw_pgd only
    target_rule: str = "runner_up"        # runner_up | fixed
    target_class: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.alpha <= 0 and self.kind not in ("fgsm", "fgsm_random"):
            raise ValueError("alpha must be > 0")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")


@dataclass
class AttackOutcome:
    """Result of one attack over a batch.

    ``final_loss`` is the attack's ascent objective at the kept iterate
    (cross-entropy for fgsm/pgd, clipped margin for cw_pgd, negated
    target-class cross-entropy for targeted_pgd); the kept restart maximizes
    it per example.
    """
    x_adv: Array
    final_loss: Array                     # [n]
    trajectory: Array                     # [n, steps], best restart
    per_restart_final: Array              # [n, restarts]
    success: Array                        # [n] bool
    zero_grad_events: int = 0


@dataclass(frozen=True)
class Objective:
    kind: str = "xent"                    # xent | cw | targeted
    kappa: float = 0.0
    targets: Array | None = field(default=None, compare=False)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def _project_once(x0: Array, x: Array, budget: PerturbationBudget) -> Array:
    lo, hi = budget.box
    d = x - x0
    if budget.norm == "linf":
        d = np.clip(d, -budget.epsilon, budget.epsilon)
    else:
        flat = d.reshape(d.shape[0], -1) if d.ndim >= 2 else d.reshape(1, -1)
        # reconstructing the delta as fl(x0 + d) - x0 perturbs it at the ulp
        # scale of x0's coordinates; without this slack in the feasibility
        # test an exact comparison would rescale forever. The slack is ~1e-15
        # for unit-scale data, far below the 1e-9 budget tolerance.
        flat0 = x0.reshape(flat.shape)
        mag = np.sqrt((flat0 ** 2).sum(axis=1, keepdims=True))
        limit = budget.epsilon + 8.0 * np.finfo(np.float64).eps * (mag + budget.epsilon)
        for _ in range(64):
            norms = np.sqrt((flat ** 2).sum(axis=1, keepdims=True))
            over = norms > limit
            if not np.any(over):
                break
            scale = np.where(over, budget.epsilon / np.where(norms > 0, norms, 1.0), 1.0)
            flat = flat * scale
        else:
            raise AssertionError("l2 rescale failed to reach the ball")
        d = flat.reshape(d.shape)
    return np.clip(x0 + d, lo, hi)


def project(x0, x, budget: PerturbationBudget) -> Array:
    """Map x into the budget set around x0: norm-ball clamp (per-coordinate
    for linf, radial rescale for l2) followed by a box clamp.

    For arrays of ndim >= 2 the first axis indexes examples and the l2 norm is
    taken per example. The result is a true fixed point, so projecting twice
    returns the first output bit-identically.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    out = _project_once(x0, np.asarray(x, dtype=np.float64), budget)
    for _ in range(8):
        nxt = _project_once(x0, out, budget)
        if np.array_equal(nxt, out):
            return out
        out = nxt
    raise AssertionError("projection failed to stabilize")


def budget_excess(x0: Array, x_adv: Array, budget: PerturbationBudget) -> float:
    """Largest constraint violation (0.0 when fully inside the budget)."""
    d = x_adv - x0
    lo, hi = budget.box
    box_excess = max(float((lo - x_adv).max(initial=0.0)), float((x_adv - hi).max(initial=0.0)))
    if budget.norm == "linf":
        norm_excess = float(np.abs(d).max(initial=0.0)) - budget.epsilon
    else:
        flat = d.reshape(d.shape[0], -1) if d.ndim >= 2 else d.reshape(1, -1)
        norm_excess = float(np.sqrt((flat ** 2).sum(axis=1)).max(initial=0.0)) - budget.epsilon
    return max(box_excess, norm_excess, 0.0)


def _check_budget(x0: Array, x_adv: Array, budget: PerturbationBudget) -> None:
    excess = budget_excess(x0, x_adv, budget)
    if excess > BUDGET_TOL:
        raise AssertionError(f"adversarial example violates budget by {excess:.3e}")


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def cw_margin_rows(logits: Tensor, labels, kappa: float) -> Tensor:
    """Per-example clipped margin min(max_{i != y} z_i - z_y, kappa).

    Gradient is +1 at the runner-up logit and -1 at the true logit while the
    margin is below kappa, and 0 once clipped; ties pick the lowest index.
    """
    n, k = logits.shape
    if k < 2:
        raise ValueError("margin objective requires at least 2 classes")
    y = np.asarray(labels)
    rows = np.arange(n)
    z = logits.data
    masked = z.copy()
    masked[rows, y] = -np.inf
    top = masked.argmax(axis=1)
    margin = z[rows, top] - z[rows, y]
    out = np.minimum(margin, kappa)
    active = margin < kappa

    def pull(g: Array) -> Array:
        d = np.zeros_like(z)
        gv = g * active
        d[rows, top] += gv
        d[rows, y] -= gv
        return d

    return tensor.custom_op(out, (logits,), (pull,), "cw_margin")


def cw_objective(logits, y: int, kappa: float) -> float:
    """Clipped margin for a single logit vector (the value the CW variants
    ascend)."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if z.size < 2:
        raise ValueError("margin objective requires at least 2 classes")
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    rest = np.delete(z, y)
    return float(min(rest.max() - z[y], kappa))


def _margin_raw(logits: Array, labels: Array) -> Array:
    n = logits.shape[0]
    rows = np.arange(n)
    masked = logits.copy()
    masked[rows, labels] = -np.inf
    return masked.max(axis=1) - logits[rows, labels]


def _objective_rows(logits: Tensor, y: Array, obj: Objective) -> Tensor:
    if obj.kind == "xent":
        return tensor.xent_rows(logits, y)
    if obj.kind == "cw":
        return cw_margin_rows(logits, y, obj.kappa)
    if obj.kind == "targeted":
        return tensor.smul(tensor.xent_rows(logits, obj.targets), -1.0)
    raise ValueError(f"unknown objective {obj.kind!r}")


def objective_values_grad(model, x: Array, y: Array, obj: Objective) -> tuple[Array, Array]:
    """Per-example objective values and the gradient of their sum wrt x."""
    custom = getattr(model, "objective_grad", None)
    if custom is not None:
        return custom(x, y, obj)
    logits, tape, x_node = model.logits_tape(x)
    rows = _objective_rows(logits, y, obj)
    grads = tensor.backward(tape, tensor.tsum(rows))
    return rows.data, grads[x_node].data


def objective_values(model, x: Array, y: Array, obj: Objective) -> Array:
    custom = getattr(model, "objective_grad", None)
    if custom is not None:
        return custom(x, y, obj)[0]
    logits = model.logits(x)
    if obj.kind == "xent":
        return tensor.xent_rows_data(logits, y)
    if obj.kind == "cw":
        return np.minimum(_margin_raw(logits, np.asarray(y)), obj.kappa)
    if obj.kind == "targeted":
        return -tensor.xent_rows_data(logits, obj.targets)
    raise ValueError(f"unknown objective {obj.kind!r}")


# ---------------------------------------------------------------------------
# ascent core
# ---------------------------------------------------------------------------

def sample_start(budget: PerturbationBudget, shape: tuple[int, ...], rng) -> Array:
    """Uniform start inside the norm ball (cube for linf; cube radially
    projected into the ball for l2)."""
    u = rng.uniform(-budget.epsilon, budget.epsilon, size=shape)
    if budget.norm == "l2":
        norm = float(np.sqrt((u ** 2).sum()))
        if norm > budget.epsilon and norm > 0:
            u = u * (budget.epsilon / norm)
    return u


def start_deltas(budget: PerturbationBudget, x0: Array, seed: int,
                 example_indices: Array, restart: int) -> Array:
    deltas = np.empty_like(x0)
    for i, ex in enumerate(example_indices):
        rng = derive_rng(seed, STREAM_ATTACK, int(ex), restart)
        deltas[i] = sample_start(budget, x0.shape[1:], rng)
    return deltas


def ascend(model, x0: Array, y: Array, budget: PerturbationBudget,
           steps: int, alpha: float, obj: Objective,
           delta0: Array | None = None) -> tuple[Array, Array, Array, int]:
    """Iterated projected ascent from x0 (+ delta0): the sign step for linf
    budgets, the normalized-gradient step for l2.

    Returns (x_final, final_values, trajectory[n, steps], zero_grad_events);
    trajectory[t] holds the objective at the iterate after update t+1.
    """
    n = x0.shape[0]
    if delta0 is not None:
        x = project(x0, x0 + delta0, budget)
    else:
        x = x0.copy()
    traj = np.empty((n, steps))
    events = 0
    for t in range(steps):
        vals, g = objective_values_grad(model, x, y, obj)
        if t > 0:
            traj[:, t - 1] = vals
        if budget.norm == "linf":
            step = alpha * np.sign(g)
        else:
            flat = g.reshape(n, -1)
            norms = np.sqrt((flat ** 2).sum(axis=1))
            zero = norms == 0.0
            events += int(zero.sum())
            scale = np.where(zero, 0.0, alpha / np.where(zero, 1.0, norms))
            step = (flat * scale[:, None]).reshape(g.shape)
        x = project(x0, x + step, budget)
    final_vals = objective_values(model, x, y, obj)
    traj[:, steps - 1] = final_vals
    return x, final_vals, traj, events


def _restart_attack(model, x0: Array, y: Array, budget: PerturbationBudget,
                    cfg: AttackConfig, obj_of, success_of,
                    example_indices=None, threads: int = 1) -> AttackOutcome:
    """Shared multi-restart driver; keeps the restart with the highest final
    objective per example. ``obj_of(sl, yc)`` builds the chunk objective."""
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y)
    n = x0.shape[0]
    if example_indices is None:
        example_indices = np.arange(n)
    example_indices = np.asarray(example_indices)

    def run_chunk(sl: slice):
        xc, yc, exc = x0[sl], y[sl], example_indices[sl]
        obj = obj_of(sl, yc)
        m = xc.shape[0]
        best_vals = np.full(m, -np.inf)
        best_x = xc.copy()
        best_traj = np.zeros((m, cfg.steps))
        prf = np.empty((m, cfg.restarts))
        events = 0
        for r in range(cfg.restarts):
            delta0 = None
            if cfg.random_start:
                delta0 = start_deltas(budget, xc, cfg.seed, exc, r)
            xf, vals, traj, ev = ascend(model, xc, yc, budget, cfg.steps, cfg.alpha, obj,
                                        delta0=delta0)
            events += ev
            prf[:, r] = vals
            improved = vals > best_vals
            best_vals = np.where(improved, vals, best_vals)
            best_x[improved] = xf[improved]
            best_traj[improved] = traj[improved]
        success = success_of(best_x, yc, obj)
        return best_x, best_vals, best_traj, prf, success, events

    slices = chunk_slices(n, CHUNK_ROWS)
    parts = parallel_map(run_chunk, slices, threads=threads)
    x_adv = np.concatenate([p[0] for p in parts])
    final = np.concatenate([p[1] for p in parts])
    traj = np.concatenate([p[2] for p in parts])
    prf = np.concatenate([p[3] for p in parts])
    success = np.concatenate([p[4] for p in parts])
    events = sum(p[5] for p in parts)
    _check_budget(x0, x_adv, budget)
    return AttackOutcome(x_adv, final, traj, prf, success, events)


# ---------------------------------------------------------------------------
# public attacks
# ---------------------------------------------------------------------------

def _misclassified(model):
    def success_of(x_adv, y, obj):
        return model.predict(x_adv) != y
    return success_of


def pgd(model, x, y, budget: PerturbationBudget, cfg: AttackConfig,
        example_indices=None, threads: int = 1) -> AttackOutcome:
    """Multi-restart projected gradient ascent on the cross-entropy."""
    if cfg.kind != "pgd":
        raise ValueError(f"pgd called with kind {cfg.kind!r}")
    return _restart_attack(model, x, y, budget, cfg,
                           obj_of=lambda sl, yc: Objective("xent"),
                           success_of=_misclassified(model),
                           example_indices=example_indices, threads=threads)


def fgsm(model, x, y, budget: PerturbationBudget, seed: int = 0,
         example_indices=None, threads: int = 1) -> AttackOutcome:
    """One signed-gradient step of size epsilon; identical to 1-step PGD with
    alpha = epsilon and no random start."""
    if budget.norm != "linf":
        raise ValueError("fgsm is defined for linf budgets only")
    alpha = budget.epsilon if budget.epsilon > 0 else np.finfo(float).tiny
    cfg = AttackConfig(kind="pgd", steps=1, alpha=alpha,
                       restarts=1, random_start=False, seed=seed)
    return _restart_attack(model, x, y, budget, cfg,
                           obj_of=lambda sl, yc: Objective("xent"),
                           success_of=_misclassified(model),
                           example_indices=example_indices, threads=threads)


def fgsm_random(model, x, y, budget: PerturbationBudget, seed: int = 0,
                example_indices=None, threads: int = 1) -> AttackOutcome:
    """Half-budget sign-of-uniform random move, then a half-budget signed
    gradient step from there; projected once at the end."""
    if budget.norm != "linf":
        raise ValueError("fgsm_random is defined for linf budgets only")
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x0.shape[0]
    if example_indices is None:
        example_indices = np.arange(n)
    example_indices = np.asarray(example_indices)
    half = budget.epsilon / 2.0
    obj = Objective("xent")

    def run_chunk(sl: slice):
        xc, yc, exc = x0[sl], y[sl], example_indices[sl]
        noise = np.empty_like(xc)
        for i, ex in enumerate(exc):
            rng = derive_rng(seed, STREAM_ATTACK, int(ex), 0)
            noise[i] = np.sign(rng.uniform(-1.0, 1.0, size=xc.shape[1:]))
        xr = xc + half * noise
        _, g = objective_values_grad(model, xr, yc, obj)
        x_adv = project(xc, xr + half * np.sign(g), budget)
        vals = objective_values(model, x_adv, yc, obj)
        return x_adv, vals

    slices = chunk_slices(n, CHUNK_ROWS)
    parts = parallel_map(run_chunk, slices, threads=threads)
    x_adv = np.concatenate([p[0] for p in parts])
    vals = np.concatenate([p[1] for p in parts])
    _check_budget(x0, x_adv, budget)
    success = model.predict(x_adv) != y
    return AttackOutcome(x_adv, vals, vals[:, None].copy(), vals[:, None].copy(), success)


def cw_pgd(model, x, y, budget: PerturbationBudget, cfg: AttackConfig,
           example_indices=None, threads: int = 1) -> AttackOutcome:
    """PGD ascending the clipped margin; success requires misclassification
    and, for kappa > 0, a margin of at least kappa."""
    if cfg.kind != "cw_pgd":
        raise ValueError(f"cw_pgd called with kind {cfg.kind!r}")

    def success_of(x_adv, yc, obj):
        raw = _margin_raw(model.logits(x_adv), np.asarray(yc))
        return (raw > 0) & (raw >= cfg.kappa)

    return _restart_attack(model, x, y, budget, cfg,
                           obj_of=lambda sl, yc: Objective("cw", kappa=cfg.kappa),
                           success_of=success_of,
                           example_indices=example_indices, threads=threads)


def select_targets(model, x0: Array, y: Array, cfg: AttackConfig) -> Array:
    if cfg.target_rule == "runner_up":
        logits = model.logits(x0)
        rows = np.arange(len(y))
        masked = logits.copy()
        masked[rows, y] = -np.inf
        return masked.argmax(axis=1)
    if cfg.target_rule == "fixed":
        if cfg.target_class is None:
            raise ValueError("fixed target rule requires target_class")
        targets = np.full(len(y), cfg.target_class, dtype=np.int64)
        if np.any(targets == np.asarray(y)):
            raise ValueError("target class equals the true label")
        return targets
    raise ValueError(f"unknown target rule {cfg.target_rule!r}")


def targeted_pgd(model, x, y, budget: PerturbationBudget, cfg: AttackConfig,
                 example_indices=None, threads: int = 1) -> AttackOutcome:
    """PGD pushing toward a target class; success = classified as target.
    ``final_loss`` is the negated target cross-entropy (the ascended value)."""
    if cfg.kind != "targeted_pgd":
        raise ValueError(f"targeted_pgd called with kind {cfg.kind!r}")
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    targets = select_targets(model, x0, y, cfg)

    def success_of(x_adv, yc, obj):
        return model.predict(x_adv) == obj.targets

    return _restart_attack(model, x0, y, budget, cfg,
                           obj_of=lambda sl, yc: Objective("targeted", targets=targets[sl]),
                           success_of=success_of,
                           example_indices=example_indices, threads=threads)


def run_attack(model, x, y, budget: PerturbationBudget, cfg: AttackConfig,
               example_indices=None, threads: int = 1) -> AttackOutcome:
    """Dispatch on cfg.kind."""
    if cfg.kind == "fgsm":
        return fgsm(model, x, y, budget, seed=cfg.seed,
                    example_indices=example_indices, threads=threads)
    if cfg.kind == "fgsm_random":
        return fgsm_random(model, x, y, budget, seed=cfg.seed,
                           example_indices=example_indices, threads=threads)
    if cfg.kind == "pgd":
        return pgd(model, x, y, budget, cfg, example_indices=example_indices, threads=threads)
    if cfg.kind == "cw_pgd":
        return cw_pgd(model, x, y, budget, cfg, example_indices=example_indices, threads=threads)
    if cfg.kind == "targeted_pgd":
        return targeted_pgd(model, x, y, budget, cfg,
                            example_indices=example_indices, threads=threads)
    raise ValueError(f"unknown attack kind {cfg.kind!r}")


def gradient_alignment(x: Array, x_adv: Array, grad_at_x: Array) -> float:
    """Cosine similarity between the realized perturbation and the natural-
    point gradient."""
    d = (np.asarray(x_adv) - np.asarray(x)).reshape(-1)
    g = np.asarray(grad_at_x).reshape(-1)
    if d.shape != g.shape:
        raise ValueError("shape mismatch")
    nd, ng = np.linalg.norm(d), np.linalg.norm(g)
    if nd == 0.0 or ng == 0.0:
        raise ValueError("zero vector")
    return float(d @ g / (nd * ng))
