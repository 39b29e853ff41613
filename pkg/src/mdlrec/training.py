"""Multi-task loss, training loop, evaluation, attention export and the scaling sweep."""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Batch
from .metrics import auc, qauc_detail
from .model import Model, ModelConfig, build_model, flops_estimate
from .params import optimizer_step

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    epochs: int = 6
    batch_size: int = 256
    lr_dense: float = 1e-3
    lr_sparse: float = 0.05
    eval_every: int = 0           # steps between evaluations; 0 means once per epoch
    seed: int = 0
    task_weights: list[float] | None = None

    def validate(self, n_tasks: int) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 0:
            raise ValueError("epochs/eval_every must be >= 0 and batch_size >= 1")
        if self.lr_dense < 0 or self.lr_sparse < 0:
            raise ValueError("learning rates must be >= 0")
        if self.task_weights is not None:
            if len(self.task_weights) != n_tasks or min(self.task_weights) < 0:
                raise ValueError(f"task_weights needs {n_tasks} non-negative entries")

    def weights(self, n_tasks: int) -> np.ndarray:
        if self.task_weights is None:
            return np.ones(n_tasks)
        return np.asarray(self.task_weights, dtype=np.float64)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**raw)


def multi_task_loss(tape: Tape, probs: Tensor, labels: np.ndarray, weights) -> Tensor:
    """Mean over instances of the task-weighted binary cross-entropy."""
    labels = np.asarray(labels, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if probs.shape != labels.shape or weights.shape != (labels.shape[1],):
        raise ad.ShapeError(f"loss: probs {probs.shape}, labels {labels.shape}, weights {weights.shape}")
    p = ad.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one_minus = ad.add(ad.scale(p, -1.0), tape.constant(1.0))
    pos = ad.mul(ad.log(p), tape.constant(labels * weights))
    neg = ad.mul(ad.log(one_minus), tape.constant((1.0 - labels) * weights))
    return ad.scale(ad.total(ad.add(pos, neg)), -1.0 / labels.shape[0])


def train_step(model: Model, batch: Batch, config: TrainConfig) -> float:
    tape = Tape()
    tensors = model.store.on_tape(tape)
    fwd = model.forward(batch, tape, tensors)
    loss = multi_task_loss(tape, fwd.probs, batch.labels, config.weights(model.schema.n_tasks))
    value = float(loss.value)
    if not np.isfinite(value):
        return value
    grads = ad.backward(tape, loss)
    optimizer_step(model.store, grads, config.lr_dense, config.lr_sparse)
    return value


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MDL_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(model: Model, batch: Batch, probs: np.ndarray | None = None) -> dict:
    """QAUC per (scenario, task) over instances belonging to that scenario, plus per-task AUC."""
    if probs is None:
        probs = model.predict(batch)
    keys = batch.group_keys
    scn_names = [s for s, _ in model.schema.scenarios]
    task_names = [t for t, _ in model.schema.tasks]
    pairs = [(k, n) for k in range(len(scn_names)) for n in range(len(task_names))]

    def one(pair):
        k, n = pair
        sel = batch.member[:, k] > 0
        if not sel.any():
            return None
        try:
            return qauc_detail(probs[sel, n], batch.labels[sel, n], keys[sel])
        except ValueError:
            return None

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(one, pairs))
    qauc_map, skipped = {}, {}
    for (k, n), res in zip(pairs, results):
        name = f"{scn_names[k]}_{task_names[n]}"
        qauc_map[name] = None if res is None else res.value
        skipped[name] = None if res is None else res.skipped
    valid = [v for v in qauc_map.values() if v is not None]
    task_auc = {}
    for n, t in enumerate(task_names):
        value = auc(probs[:, n], batch.labels[:, n])
        task_auc[t] = None if np.isnan(value) else value
    return {
        "qauc": qauc_map,
        "qauc_skipped_groups": skipped,
        "mean_qauc": float(np.mean(valid)) if valid else None,
        "auc": task_auc,
    }


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0


def train(model: Model, train_data: Batch, eval_data: Batch | None, config: TrainConfig) -> TrainResult:
    config.validate(model.schema.n_tasks)
    model.schema.check_batch(train_data)
    if eval_data is not None:
        model.schema.check_batch(eval_data)
    rng = np.random.default_rng(config.seed)
    n = len(train_data)
    history: list[dict] = []
    losses: list[float] = []
    step = 0
    started = time.perf_counter()

    def checkpoint():
        row = {"step": step, "loss": float(np.mean(losses)) if losses else float("nan")}
        if eval_data is not None:
            row.update({f"qauc_{k}": v for k, v in evaluate(model, eval_data)["qauc"].items()})
        history.append(row)
        losses.clear()
        log.info("step %d loss %.5f", step, row["loss"])

    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            value = train_step(model, train_data.take(order[start:start + config.batch_size]), config)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at batch index {step}")
            losses.append(value)
            step += 1
            if config.eval_every and step % config.eval_every == 0:
                checkpoint()
        if not config.eval_every:
            checkpoint()
    if not history or history[-1]["step"] != step:
        checkpoint()
    seconds = time.perf_counter() - started
    metrics = evaluate(model, eval_data) if eval_data is not None else {}
    metrics.update({"n_params": model.n_params, "train_seconds": seconds, "steps": step,
                    "final_loss": history[-1]["loss"]})
    return TrainResult(model, history, metrics, seconds)


def dump_attention(model: Model, batch: Batch) -> list[dict]:
    """Batch- and head-averaged attention per (layer, query token, feature token)."""
    if model.config.arch != "mdl":
        raise ValueError(f"attention dumps need an 'mdl' model, got {model.config.arch!r}")
    tape = Tape()
    tensors = {k: tape.constant(v) for k, v in model.store.params.items()}
    fwd = model.forward(batch, tape, tensors)
    rows = []
    for role in ("task", "scenario"):
        for layer, weights in enumerate(fwd.attention.get(role, [])):
            mean = weights.mean(axis=(0, 1))  # (T_q, N_f)
            for q in range(mean.shape[0]):
                for f in range(mean.shape[1]):
                    rows.append({"layer": layer, "token_role": role, "token_index": q,
                                 "feature_index": f, "weight": float(mean[q, f])})
    return rows


def attention_matrix(rows: list[dict], role: str, layer: int) -> np.ndarray:
    sel = [r for r in rows if r["token_role"] == role and r["layer"] == layer]
    nq = 1 + max(r["token_index"] for r in sel)
    nf = 1 + max(r["feature_index"] for r in sel)
    out = np.zeros((nq, nf))
    for r in sel:
        out[r["token_index"], r["feature_index"]] = r["weight"]
    return out


def scaling_sweep(grid: list[ModelConfig], schema, train_data: Batch, eval_data: Batch,
                  config: TrainConfig, seeds: list[int]) -> list[dict]:
    if not grid:
        raise ValueError("scaling sweep needs a non-empty grid")
    rows = []
    for cfg in grid:
        for seed in seeds:
            model = build_model(cfg, schema, seed)
            tc = TrainConfig(**{**asdict(config), "seed": seed})
            result = train(model, train_data, eval_data, tc)
            row = {"arch": cfg.arch, "d": cfg.d, "layers": cfg.layers, "seed": seed,
                   "params": model.n_params, "flops": flops_estimate(cfg, schema),
                   "mean_qauc": result.metrics["mean_qauc"]}
            row.update({f"qauc_{k}": v for k, v in result.metrics["qauc"].items()})
            rows.append(row)
    return rows
