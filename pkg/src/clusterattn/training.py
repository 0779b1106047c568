"""Adam training loop, evaluation, and metrics logging.

Everything is deterministic in the run seed: the seed fixes synthetic
data, parameter init, and per-epoch batch order, so reruns produce
byte-identical metrics files and checkpoints.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import TrainingError
from . import tensor as tn
from .checkpoint import save_checkpoint
from .encoder import ClusterModel, model_forward
from .tensor import Tensor

METRICS_HEADER = ["epoch", "split", "loss", "top1", "top5"]


@dataclass
class AdamConfig:
    """Fixed defaults for the desk-scale runs."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, params: dict[str, Tensor], config: AdamConfig | None = None):
        self.params = params
        self.config = config or AdamConfig()
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self):
        c = self.config
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - c.beta1 ** t
        bias2 = 1.0 - c.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= (c.lr / bias1) * m / (np.sqrt(v / bias2) + c.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# forward helpers


def batch_logits(model: ClusterModel, images: np.ndarray) -> Tensor:
    """Stacked (n, classes) logits; builds one graph across the batch."""
    rows = [tn.reshape(model_forward(img, model)[0], (1, model.config.num_classes))
            for img in images]
    return rows[0] if len(rows) == 1 else tn.concat(rows, axis=0)


@dataclass
class EvalResult:
    loss: float
    top1: float
    top5: float | None
    count: int


def evaluate(model: ClusterModel, images: np.ndarray, labels: np.ndarray,
             workers: int = 1) -> EvalResult:
    """Forward-only accuracy/loss; optionally thread-parallel over samples.

    Parameters are shared read-only; each worker runs its own no-grad
    forward, so results do not depend on the worker count.
    """
    def one(idx: int) -> np.ndarray:
        with tn.no_grad():
            logits, _ = model_forward(images[idx], model)
        return logits.data

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            all_logits = list(pool.map(one, range(len(images))))
    else:
        all_logits = [one(i) for i in range(len(images))]
    logits = np.stack(all_logits).astype(np.float64)
    n, c = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float((lse - shifted[np.arange(n), labels]).mean())
    ranked = np.argsort(-logits, axis=1, kind="stable")
    top1 = float((ranked[:, 0] == labels).mean())
    top5 = None
    if c >= 5:
        top5 = float((ranked[:, :5] == labels[:, None]).any(axis=1).mean())
    return EvalResult(loss=loss, top1=top1, top5=top5, count=n)


# ---------------------------------------------------------------------------
# metrics file


def write_metrics_header(path):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(METRICS_HEADER)


def append_metrics_row(path, epoch, split: str, loss: float, top1: float,
                       top5: float | None):
    path = Path(path)
    if not path.exists():
        write_metrics_header(path)
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow(
            [epoch, split, f"{loss:.6f}", f"{top1:.6f}",
             "" if top5 is None else f"{top5:.6f}"])


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    epochs: int
    final_loss: float | None
    final_top1: float | None
    best_top1: float | None
    best_epoch: int | None


def train_model(model: ClusterModel, images: np.ndarray, labels: np.ndarray,
                epochs: int, batch_size: int, seed: int, out_dir,
                adam: AdamConfig | None = None) -> TrainResult:
    """Train in place; write metrics.csv plus final.cfk and best.cfk.

    The metrics loss column is the mean training-batch loss of the epoch;
    top1/top5 come from a full evaluation pass with the epoch's final
    weights (so evaluating final.cfk on the training set reproduces the
    last row exactly). best.cfk holds the weights of the epoch with the
    highest evaluation top1 (earliest wins ties).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    write_metrics_header(metrics_path)

    opt = Adam(model.params, adam)
    rng = np.random.default_rng(seed)
    n = len(images)
    dtype = model.dtype

    best_top1 = None
    best_epoch = None
    best_arrays: dict[str, np.ndarray] | None = None
    final_loss = None
    final_top1 = None

    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            logits = batch_logits(model, images[batch].astype(dtype))
            loss = tn.cross_entropy(logits, labels[batch])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite training loss {value} at epoch {epoch}, "
                    f"batch starting at sample {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += value * len(batch)
        train_loss = loss_sum / n
        result = evaluate(model, images.astype(dtype), labels)
        append_metrics_row(metrics_path, epoch, "train", train_loss,
                           result.top1, result.top5)
        final_loss, final_top1 = train_loss, result.top1
        if best_top1 is None or result.top1 > best_top1:
            best_top1 = result.top1
            best_epoch = epoch
            best_arrays = {k: t.data.copy() for k, t in model.params.items()}

    save_checkpoint(model, out_dir / "final.cfk", meta={"epochs_trained": str(epochs)})
    if best_arrays is not None:
        saved = {k: t.data for k, t in model.params.items()}
        for k, t in model.params.items():
            t.data = best_arrays[k]
        save_checkpoint(model, out_dir / "best.cfk",
                        meta={"epochs_trained": str(best_epoch)})
        for k, t in model.params.items():
            t.data = saved[k]
    else:
        save_checkpoint(model, out_dir / "best.cfk", meta={"epochs_trained": "0"})
    return TrainResult(epochs=epochs, final_loss=final_loss, final_top1=final_top1,
                       best_top1=best_top1, best_epoch=best_epoch)
