"""Command-line front door: wires JSON experiment configs to the training,
attack, landscape, and evaluation machinery and writes reproducible reports.

Every result file embeds the fully-defaulted config echo and the seed;
rerunning with the same config yields byte-identical files. Wall-clock
timestamps live only in the run_meta.json sidecar.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation as eval_mod
from . import landscape as landscape_mod
from . import nn
from . import train as train_mod
from .attack import AttackConfig, PerturbationBudget
from .errors import ConfigError
from .util import stable_json

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/out",
    "data": {
        "kind": "digits",            # digits | mnist | cifar10
        "images": None,              # mnist IDX paths
        "labels": None,
        "files": [],                 # cifar10 batch files
        "n": 2000,                   # synthetic corpus size
        "n_train": 1000,
        "n_eval": 200,
        "augment": False,            # cifar train-split crops/flips
    },
    "model": {
        "preset": "mnist_capacity",
        "capacity_scale": 1,
        "checkpoint": None,          # operate on a saved model instead of training
    },
    "train": {
        "regime": "natural",         # natural | fgsm | pgd
        "epochs": 2,
        "batch_size": 50,
        "lr_schedule": [[0, 0.01]],
        "momentum": 0.9,
        "eval_slice": 200,
    },
    "attack": {
        "kind": "pgd",
        "norm": "linf",
        "epsilon": 0.3,
        "epsilon_units": "pixel",    # pixel | 255 (converted here, at the boundary)
        "steps": 40,
        "alpha": 0.01,
        "restarts": 1,
        "random_start": True,
        "kappa": 0.0,
        "target_rule": "runner_up",
        "target_class": None,
    },
    "eval": {
        "n_examples": 200,
        "source_checkpoint": None,   # transfer source for attack/explore
        "checkpoints": [],           # transfer grid: [[label, path], ...]
        "attacks": [],               # rows for attack/transfer; merged over attack section
        "eps_list": [],              # sweep
        "angle_examples": 0,         # gradient-angle histogram size (transfer)
    },
    "landscape": {
        "example_indices": [0],
        "n_restarts": 20,
        "segment_pairs": 10,
        "segment_points": 11,
        "direction_points": 11,
        "baseline_samples": 1000,
        "geometry_max_pairs": 10000,
    },
}


def merge_strict(defaults: dict, override: dict, path: str = "") -> dict:
    """Defaults overlaid with user values; unknown keys are rejected."""
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = merge_strict(defaults[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None, seed=None, output=None) -> dict:
    user = {}
    if path is not None:
        with open(path) as f:
            user = json.load(f)
    cfg = merge_strict(DEFAULT_CONFIG, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    if output is not None:
        cfg["output_dir"] = str(output)
    return cfg


def resolve_budget(acfg: dict) -> PerturbationBudget:
    eps = float(acfg["epsilon"])
    if acfg["epsilon_units"] == "255":
        eps = eps / 255.0
        assert 0.0 <= eps <= 1.0, "converted epsilon must land in [0, 1] pixel scale"
    elif acfg["epsilon_units"] != "pixel":
        raise ConfigError(f"unknown epsilon_units {acfg['epsilon_units']!r}")
    return PerturbationBudget(norm=acfg["norm"], epsilon=eps)


def resolve_attack(acfg: dict, seed: int) -> AttackConfig:
    return AttackConfig(
        kind=acfg["kind"], steps=int(acfg["steps"]), alpha=float(acfg["alpha"]),
        restarts=int(acfg["restarts"]), random_start=bool(acfg["random_start"]),
        kappa=float(acfg["kappa"]), target_rule=acfg["target_rule"],
        target_class=acfg["target_class"], seed=seed)


def load_dataset(cfg: dict):
    d = cfg["data"]
    seed = cfg["seed"]
    if d["kind"] == "digits":
        ds = data_mod.make_digits(int(d["n"]), seed=seed)
    elif d["kind"] == "mnist":
        if not d["images"] or not d["labels"]:
            raise ConfigError("mnist data needs images and labels paths")
        ds = data_mod.load_mnist(d["images"], d["labels"])
    elif d["kind"] == "cifar10":
        if not d["files"]:
            raise ConfigError("cifar10 data needs batch file paths")
        ds = data_mod.load_cifar10(d["files"])
    else:
        raise ConfigError(f"unknown data kind {d['kind']!r}")
    train_ds, eval_ds = data_mod.subset_split(ds, int(d["n_train"]), int(d["n_eval"]), seed)
    if d["augment"]:
        if d["kind"] != "cifar10":
            raise ConfigError("augmentation applies to cifar10 data only")
        train_ds = data_mod.Dataset(data_mod.augment_cifar(train_ds.images, seed),
                                    train_ds.labels, train_ds.provenance)
    return train_ds, eval_ds


def load_model(cfg: dict, section_path: str | None) -> nn.Model:
    if not section_path:
        raise ConfigError("a checkpoint path is required here")
    spec, params = nn.load_checkpoint(section_path)
    return nn.Model(spec, params)


# ---------------------------------------------------------------------------
# deterministic writers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    return str(v)


class OutputDir:
    def __init__(self, cfg: dict):
        self.dir = Path(cfg["output_dir"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.written: list[str] = []

    def csv(self, name: str, header: list[str], rows) -> None:
        lines = [f"# config: {stable_json(self.cfg)}", f"# seed: {self.cfg['seed']}",
                 ",".join(header)]
        for row in rows:
            lines.append(",".join(_fmt(v) for v in row))
        (self.dir / name).write_text("\n".join(lines) + "\n")
        self.written.append(name)

    def json(self, name: str, payload: dict) -> None:
        doc = {"config": self.cfg, "seed": self.cfg["seed"], **payload}
        (self.dir / name).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        self.written.append(name)

    def jsonl(self, name: str, rows: list[dict]) -> None:
        lines = [stable_json(r) for r in rows]
        (self.dir / name).write_text("\n".join(lines) + ("\n" if lines else ""))
        self.written.append(name)

    def sidecar(self, command: str) -> None:
        meta = {"command": command, "written": sorted(self.written),
                "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
        (self.dir / "run_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: dict, threads: int) -> None:
    out = OutputDir(cfg)
    train_ds, eval_ds = load_dataset(cfg)
    spec = nn.build_spec(cfg["model"]["preset"], int(cfg["model"]["capacity_scale"]))
    params = nn.init_params(spec, cfg["seed"])
    t = cfg["train"]
    regime = t["regime"]
    attack_cfg = budget = None
    if regime != "natural":
        kind = "fgsm" if regime == "fgsm" else "pgd"
        acfg = dict(cfg["attack"])
        acfg["kind"] = kind
        attack_cfg = resolve_attack(acfg, cfg["seed"])
        budget = resolve_budget(acfg)
    tcfg = train_mod.TrainConfig(
        regime=regime, attack=attack_cfg, budget=budget,
        epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
        lr_schedule=tuple((int(e), float(lr)) for e, lr in t["lr_schedule"]),
        momentum=float(t["momentum"]), seed=cfg["seed"],
        eval_slice=int(t["eval_slice"]))
    params, log = train_mod.train(spec, params, train_ds, tcfg,
                                  eval_set=eval_ds, threads=threads)
    nn.save_checkpoint(spec, params, out.dir / "checkpoint.mmrb")
    out.written.append("checkpoint.mmrb")
    out.csv("trainlog.csv", ["step", "epoch", "loss"],
            [(i, e, l) for i, (e, l) in enumerate(zip(log.step_epochs, log.step_losses))])
    final_eval = log.epoch_eval[-1] if log.epoch_eval else {}
    out.json("summary.json", {
        "n_params": nn.Model(spec, params).params.n_params(),
        "final_epoch_mean_loss": log.epoch_mean_loss(tcfg.epochs - 1),
        "final_natural_acc": final_eval.get("natural_acc"),
        "final_adv_acc": final_eval.get("adv_acc"),
        "lr_events": [[e, lr] for e, lr in log.lr_events],
    })
    out.sidecar("train")


def _eval_slice(cfg: dict):
    _, eval_ds = load_dataset(cfg)
    n = int(cfg["eval"]["n_examples"])
    return eval_ds.images[:n], eval_ds.labels[:n]


def _attack_rows(cfg: dict) -> list[dict]:
    rows = cfg["eval"]["attacks"] or [{}]
    return [merge_strict(cfg["attack"], row, "eval.attacks") for row in rows]


def cmd_attack(cfg: dict, threads: int) -> None:
    out = OutputDir(cfg)
    target = load_model(cfg, cfg["model"]["checkpoint"])
    source_path = cfg["eval"]["source_checkpoint"]
    source = load_model(cfg, source_path) if source_path else target
    x, y = _eval_slice(cfg)
    rows = [("natural", None, eval_mod.natural_accuracy(target, x, y))]
    verdicts = []
    for acfg in _attack_rows(cfg):
        attack_cfg = resolve_attack(acfg, cfg["seed"])
        budget = resolve_budget(acfg)
        acc, vds, _ = eval_mod.robust_accuracy(target, source, x, y, attack_cfg, budget,
                                               threads=threads)
        name = f"{attack_cfg.kind}[steps={attack_cfg.steps},restarts={attack_cfg.restarts}," \
               f"eps={budget.epsilon!r},norm={budget.norm}]"
        rows.append((name, attack_cfg.kind, acc))
        for v in vds:
            v["source"] = "source" if source_path else "target"
            v["attack"] = name
        verdicts.extend(vds)
    out.json("report.json", {"rows": [
        {"attack": name, "kind": kind, "accuracy": acc, "n": len(y)}
        for name, kind, acc in rows]})
    out.jsonl("verdicts.jsonl", verdicts)
    out.sidecar("attack")


def cmd_explore(cfg: dict, threads: int) -> None:
    out = OutputDir(cfg)
    model = load_model(cfg, cfg["model"]["checkpoint"])
    source_path = cfg["eval"]["source_checkpoint"]
    second = load_model(cfg, source_path) if source_path else None
    x, y = _eval_slice(cfg)
    lcfg = cfg["landscape"]
    acfg = resolve_attack(cfg["attack"], cfg["seed"])
    budget = resolve_budget(cfg["attack"])

    traj_rows, hist_rows, geo_rows, seg_rows, dir_rows, stats = [], [], [], [], [], []
    for ex in lcfg["example_indices"]:
        ex = int(ex)
        maxima, trajectories = landscape_mod.restart_study(
            model, x[ex], int(y[ex]), budget, acfg, int(lcfg["n_restarts"]),
            example_index=ex, threads=threads)
        for r in range(trajectories.shape[0]):
            for s in range(trajectories.shape[1]):
                traj_rows.append((ex, r, s, trajectories[r, s]))
        counts, edges = np.histogram(maxima.final_losses, bins=20)
        hist_rows += [(ex, edges[b], edges[b + 1], int(counts[b])) for b in range(len(counts))]
        geometry = landscape_mod.maxima_geometry(
            maxima, budget, max_pairs=int(lcfg["geometry_max_pairs"]),
            baseline_samples=int(lcfg["baseline_samples"]), seed=cfg["seed"])
        for k in range(len(geometry["pair_i"])):
            geo_rows.append((ex, int(geometry["pair_i"][k]), int(geometry["pair_j"][k]),
                             geometry["distances"][k], geometry["angles_deg"][k]))
        spread = landscape_mod.concentration_stats(maxima) \
            if len(maxima.final_losses) >= 10 else None
        pair_rng = np.random.default_rng(cfg["seed"])
        n_restarts = len(maxima.final_losses)
        for p in range(int(lcfg["segment_pairs"])):
            i, j = pair_rng.choice(n_restarts, size=2, replace=False)
            probe = landscape_mod.segment_probe(
                model, x[ex], int(y[ex]), maxima.deltas[i], maxima.deltas[j],
                int(lcfg["segment_points"]), budget=budget, seed=cfg["seed"] + p)
            for t, loss in zip(probe["t"], probe["losses"]):
                seg_rows.append((ex, p, t, loss, probe["random_point_loss"]))
        if second is not None:
            best = int(np.argmax(maxima.final_losses))
            profile = landscape_mod.direction_profile(
                model, second, x[ex], int(y[ex]), x[ex] + maxima.deltas[best],
                int(lcfg["direction_points"]))
            for t, ls, lt in zip(profile["t"], profile["loss_source"], profile["loss_target"]):
                dir_rows.append((ex, t, ls, lt))
        stats.append({"example_index": ex, "concentration": spread,
                      "mean_angle_deg": geometry["mean_angle_deg"],
                      "mean_distance": geometry["mean_distance"],
                      "baseline_mean_distance": geometry["baseline_mean_distance"],
                      "natural_loss": maxima.natural_loss})
    out.csv("trajectories.csv", ["example", "restart", "step", "loss"], traj_rows)
    out.csv("histogram.csv", ["example", "lo", "hi", "count"], hist_rows)
    out.csv("geometry.csv", ["example", "i", "j", "distance", "angle_deg"], geo_rows)
    out.csv("segments.csv", ["example", "pair", "t", "loss", "random_point_loss"], seg_rows)
    if dir_rows:
        out.csv("direction.csv", ["example", "t", "loss_source", "loss_target"], dir_rows)
    out.json("stats.json", {"examples": stats})
    out.sidecar("explore")


def cmd_sweep(cfg: dict, threads: int) -> None:
    out = OutputDir(cfg)
    model = load_model(cfg, cfg["model"]["checkpoint"])
    x, y = _eval_slice(cfg)
    eps_list = [float(e) for e in cfg["eval"]["eps_list"]]
    if not eps_list:
        raise ConfigError("sweep needs eval.eps_list")
    acfg = cfg["attack"]
    curve = eval_mod.epsilon_sweep(model, x, y, acfg["norm"], eps_list,
                                   steps=int(acfg["steps"]), restarts=int(acfg["restarts"]),
                                   seed=cfg["seed"], threads=threads)
    out.csv("curve.csv", ["epsilon", "accuracy"],
            list(zip(curve["epsilon"], curve["accuracy"])))
    rows = []
    for ei, eps in enumerate(curve["epsilon"]):
        for i in range(len(y)):
            rows.append({"epsilon": float(eps), "example_index": i,
                         "fooled": bool(curve["fooled"][ei, i])})
    out.jsonl("verdicts.jsonl", rows)
    out.sidecar("sweep")


def cmd_transfer(cfg: dict, threads: int) -> None:
    out = OutputDir(cfg)
    entries = cfg["eval"]["checkpoints"]
    if len(entries) < 2:
        raise ConfigError("transfer needs at least 2 eval.checkpoints entries")
    models = [(label, load_model(cfg, path)) for label, path in entries]
    x, y = _eval_slice(cfg)
    cfgs = []
    for acfg in _attack_rows(cfg):
        attack_cfg = resolve_attack(acfg, cfg["seed"])
        cfgs.append((attack_cfg.kind, attack_cfg))
        budget = resolve_budget(acfg)
    report = eval_mod.transfer_matrix(models, cfgs, budget, x, y, threads=threads)
    out.json("report.json", report.to_json())
    out.jsonl("verdicts.jsonl", report.verdicts)
    n_angles = int(cfg["eval"]["angle_examples"])
    if n_angles > 0:
        hist = eval_mod.gradient_angle_histogram(models[0][1], models[1][1],
                                                 x[:n_angles], y[:n_angles],
                                                 seed=cfg["seed"])
        rows = [(hist["bin_edges"][b], hist["bin_edges"][b + 1],
                 int(hist["hist_counts"][b]), int(hist["baseline_counts"][b]))
                for b in range(len(hist["hist_counts"]))]
        out.csv("angles.csv", ["lo", "hi", "count", "baseline_count"], rows)
    out.sidecar("transfer")


def cmd_inspect(cfg: dict, threads: int) -> None:
    out = OutputDir(cfg)
    model = load_model(cfg, cfg["model"]["checkpoint"])
    census = eval_mod.inspect_weights(model)
    out.json("inspect.json", {
        "total_filters": census["total_filters"],
        "utilized_filters": census["utilized_filters"],
        "thresholding_filters": census["thresholding_filters"],
        "class_biases": [float(b) for b in census["class_biases"]],
        "bias_spread": census["bias_spread"],
    })
    rows = [("all", census["weight_hist"]["edges"][b], census["weight_hist"]["edges"][b + 1],
             int(census["weight_hist"]["counts"][b]))
            for b in range(len(census["weight_hist"]["counts"]))]
    rows += [("first_conv", census["first_layer_hist"]["edges"][b],
              census["first_layer_hist"]["edges"][b + 1],
              int(census["first_layer_hist"]["counts"][b]))
             for b in range(len(census["first_layer_hist"]["counts"]))]
    out.csv("weights_hist.csv", ["layer", "lo", "hi", "count"], rows)
    out.sidecar("inspect")


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "explore": cmd_explore,
    "sweep": cmd_sweep,
    "transfer": cmd_transfer,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mmrb",
                                     description="minimax robustness workbench")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON experiment config")
        p.add_argument("--output", default=None, help="output directory override")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int, default=None, help="seed override")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, output=args.output)
        COMMANDS[args.command](cfg, max(1, args.threads))
    except Exception as exc:   # noqa: BLE001 - the CLI boundary reports and fails
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
