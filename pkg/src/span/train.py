"""Training/evaluation loop for the desk-scale runs.

Single-sample steps with Adam, deterministic seeded shuffling, checkpoint
selection on the validation metric (accuracy for classification, Dice for
segmentation), final metrics from the selected checkpoint via direct class
probability argmax.
"""

from __future__ import annotations

import json
import subprocess
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tape, adam_step
from .errors import ConfigError
from .losses import hybrid_seg_loss, softmax_ce
from .model import (
    ModelConfig,
    forward_mil,
    forward_unet,
    init_params,
    save_checkpoint,
)
from .sparse import deserialize


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 6

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown optimizer keys {sorted(extra)}")
        return cls(**d)


@dataclass
class RunConfig:
    data_dir: str
    out_dir: str
    model: ModelConfig
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    precision: str = "f32"
    eval_split: str = "test"
    max_train: int | None = None

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.optim, dict):
            self.optim = OptimConfig.from_dict(self.optim)

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def to_dict(self) -> dict:
        return {
            "data_dir": str(self.data_dir),
            "out_dir": str(self.out_dir),
            "model": self.model.to_dict(),
            "optim": {f.name: getattr(self.optim, f.name) for f in fields(OptimConfig)},
            "seed": self.seed,
            "precision": self.precision,
            "eval_split": self.eval_split,
            "max_train": self.max_train,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown run config keys {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def build_identifier() -> str:
    """git-describe-style build id, falling back to the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"span-{__version__}"


def load_split(data_dir, split: str):
    """Read (SparseMap, label-or-mask) samples listed by the manifest."""
    root = Path(data_dir)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    if split not in manifest["splits"]:
        raise ConfigError(f"split {split!r} not in manifest")
    task = manifest["spec"]["task"]
    samples = []
    for entry in manifest["splits"][split]:
        smap = deserialize((root / entry["file"]).read_bytes())
        if task == "classification":
            samples.append((smap, int(entry["label"])))
        else:
            mask_map = deserialize((root / entry["mask"]).read_bytes())
            samples.append((smap, mask_map.features.ravel().astype(np.int64)))
    return task, samples, manifest["spec"]


def _predict(smap, task, config, store):
    if task == "classification":
        _, probs = forward_mil(smap, config, store)
        return probs
    logits, _ = forward_unet(smap, config, store)
    from .losses import softmax

    return softmax(logits.data)


def evaluate(task, samples, config: ModelConfig, store) -> dict:
    """Argmax metrics: accuracy/macro-F1 or mean per-map Dice/IoU."""
    if task == "classification":
        labels, preds = [], []
        for smap, label in samples:
            probs = _predict(smap, task, config, store)
            preds.append(int(np.argmax(probs)))
            labels.append(label)
        labels = np.asarray(labels)
        preds = np.asarray(preds)
        acc = float((labels == preds).mean())
        f1s = []
        for c in range(config.num_classes):
            tp = int(((preds == c) & (labels == c)).sum())
            fp = int(((preds == c) & (labels != c)).sum())
            fn = int(((preds != c) & (labels == c)).sum())
            f1s.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
        return {"accuracy": acc, "macro_f1": float(np.mean(f1s))}
    dices, ious = [], []
    for smap, mask in samples:
        probs = _predict(smap, task, config, store)
        pred = np.argmax(probs, axis=1)
        tp = int(((pred == 1) & (mask == 1)).sum())
        fp = int(((pred == 1) & (mask == 0)).sum())
        fn = int(((pred == 0) & (mask == 1)).sum())
        dices.append((2 * tp + 1e-9) / (2 * tp + fp + fn + 1e-9))
        ious.append((tp + 1e-9) / (tp + fp + fn + 1e-9))
    return {"dice": float(np.mean(dices)), "iou": float(np.mean(ious))}


def train_step(smap, target, task, config, store, optim) -> float:
    tape = Tape()
    if task == "classification":
        logits, _ = forward_mil(smap, config, store, tape)
        loss, _ = softmax_ce(tape, logits, target)
    else:
        logits, _ = forward_unet(smap, config, store, tape)
        loss, _ = hybrid_seg_loss(tape, logits, target, config.loss)
    tape.backward(loss)
    adam_step(store, lr=optim.lr, beta1=optim.beta1, beta2=optim.beta2, eps=optim.eps)
    store.zero_grad()
    return float(loss.data)


def train_model(run: RunConfig, log=print):
    """Full training run; returns (store, results dict)."""
    t0 = time.perf_counter()
    task, train_samples, _ = load_split(run.data_dir, "train")
    _, val_samples, _ = load_split(run.data_dir, "val")
    if run.max_train is not None:
        train_samples = train_samples[: run.max_train]
    store = init_params(run.model, seed=run.seed, dtype=run.dtype)
    metric_key = "accuracy" if task == "classification" else "dice"
    best = {"metric": -1.0, "values": store.copy_values(), "epoch": -1}
    history = []
    if run.optim.epochs == 0:
        best["metric"] = evaluate(task, val_samples, run.model, store)[metric_key]
        best["epoch"] = 0
    rng = np.random.default_rng(run.seed + 1)
    for epoch in range(run.optim.epochs):
        order = rng.permutation(len(train_samples))
        losses = []
        for i in order:
            smap, target = train_samples[i]
            losses.append(train_step(smap, target, task, run.model, store, run.optim))
        val = evaluate(task, val_samples, run.model, store)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        **{f"val_{k}": v for k, v in val.items()}})
        log(f"epoch {epoch}: loss {np.mean(losses):.4f} val_{metric_key} {val[metric_key]:.4f}")
        if val[metric_key] > best["metric"]:
            best = {"metric": val[metric_key], "values": store.copy_values(),
                    "epoch": epoch}
    store.load_values(best["values"])
    _, eval_samples, _ = load_split(run.data_dir, run.eval_split)
    metrics = evaluate(task, eval_samples, run.model, store)
    results = {
        "task": task,
        "metrics": metrics,
        "best_epoch": best["epoch"],
        "history": history,
        "train_seconds": time.perf_counter() - t0,
        "eval_split": run.eval_split,
    }
    return store, results


def write_metrics(path, run: RunConfig, results: dict):
    """key=value lines for shell pipelines, then the full JSON block."""
    doc = {"config": run.to_dict(), "build": build_identifier(), **results}
    lines = []
    for k, v in results["metrics"].items():
        lines.append(f"{k}={v:.6f}")
    lines.append(f"task={results['task']}")
    lines.append(f"best_epoch={results['best_epoch']}")
    lines.append(f"build={doc['build']}")
    for flag in ("no_sac", "no_car", "use_shift", "num_ctx", "use_rpb", "skip_mode"):
        lines.append(f"model.{flag}={getattr(run.model, flag)}")
    body = "\n".join(lines) + "\n\n" + json.dumps(doc, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(body)


def run_training(run: RunConfig, log=print) -> dict:
    """Train, then write checkpoint.spnc, config.json, metrics.txt to out_dir."""
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store, results = train_model(run, log=log)
    save_checkpoint(out / "checkpoint.spnc", store)
    with open(out / "config.json", "w") as fh:
        json.dump(run.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_metrics(out / "metrics.txt", run, results)
    return results
