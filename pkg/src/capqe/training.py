"""MSE training with Adam and dev-Spearman checkpoint selection."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import Checkpoint
from .errors import (EmptyDataset, LengthMismatch, MissingTarget, NonFiniteLoss, ShapeMismatch,
                     VersionMismatch)
from .metrics import evaluate, mse, report_from_scores
from .model import ModelConfig, ModelParams, backward, collate, forward_batch, init_params

logger = logging.getLogger(__name__)

LR_GRID = (1e-4, 1e-5, 1e-6)
LABEL_GRID = (0, 5, 10, 20)
DEFAULT_EPOCHS = 20


def mse_loss(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise LengthMismatch(f"{preds.shape} vs {targets.shape}")
    if preds.size == 0:
        raise LengthMismatch("empty batch")
    return mse(preds, targets)


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def init(cls, params: ModelParams, **kw) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0, **kw)


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not modified."""
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    m_blocks, v_blocks, g_blocks = state.m.blocks(), state.v.blocks(), grads.blocks()
    for name, p in params.blocks().items():
        g = g_blocks[name]
        if g.shape != p.shape or m_blocks[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: param {p.shape}, grad {g.shape}, "
                                f"moment {m_blocks[name].shape}")
        m = b1 * m_blocks[name] + (1.0 - b1) * g
        v = b2 * v_blocks[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return (ModelParams(**new_p),
            replace(state, m=ModelParams(**new_m), v=ModelParams(**new_v), t=t))


# -- training loop ----------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 256
    max_steps: int | None = None   # None: DEFAULT_EPOCHS passes over the training set
    eval_every: int = 100
    seed: int = 0
    num_labels: int = 16
    warm_start: Checkpoint | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def steps_for(self, n_train: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return DEFAULT_EPOCHS * math.ceil(n_train / self.batch_size)


@dataclass(frozen=True)
class EvalRecord:
    step: int
    train_loss: float | None
    dev_spearman: float | None
    dev_mse: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_step: int = 0

    @property
    def best(self) -> EvalRecord:
        return next(r for r in self.records if r.step == self.best_step)

    def to_rows(self):
        return [[r.step, r.train_loss, r.dev_spearman, r.dev_mse] for r in self.records]


def _rank_key(rho):
    return -math.inf if rho is None else rho


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index arrays: one shuffled pass per epoch, last partial batch kept."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]


def resolve_model_config(cfg: TrainConfig, model_config: ModelConfig | None) -> ModelConfig:
    base = model_config or ModelConfig()
    return replace(base, num_labels=cfg.num_labels)


def initial_params(cfg: TrainConfig, config: ModelConfig, init: ModelParams | None) -> ModelParams:
    if cfg.warm_start is not None:
        ws = cfg.warm_start.config
        if (ws.proj_dim, ws.num_labels) != (config.proj_dim, config.num_labels):
            raise VersionMismatch(
                f"warm start has proj_dim={ws.proj_dim}, num_labels={ws.num_labels}; "
                f"run wants proj_dim={config.proj_dim}, num_labels={config.num_labels}")
        return cfg.warm_start.params.copy()
    if init is not None:
        init.check(config)
        return init.copy()
    return init_params(config, cfg.seed)


def train(train_set, dev_set, cfg: TrainConfig, model_config: ModelConfig | None = None,
          init: ModelParams | None = None):
    """Fit the QE model by minimizing batch MSE; keep the checkpoint with the best dev Spearman.

    Returns ``(best_checkpoint, history)``. Ties in dev Spearman go to the
    earliest step. Fully determined by ``cfg.seed`` and the data.
    """
    if len(train_set) == 0:
        raise EmptyDataset("training set is empty")
    if len(dev_set) == 0:
        raise EmptyDataset("dev set is empty")
    config = resolve_model_config(cfg, model_config)
    params = initial_params(cfg, config, init)
    train_batch = collate(train_set, config.num_labels)
    dev_batch = collate(dev_set, config.num_labels)
    if train_batch.targets is None or dev_batch.targets is None:
        raise MissingTarget("train and dev samples need targets")

    rng = np.random.default_rng(cfg.seed)
    state = AdamState.init(params)
    history = TrainHistory()
    best_params, best_rho = params.copy(), None
    total = cfg.steps_for(len(train_set))
    pending_losses = []

    def evaluate_dev(step):
        nonlocal best_params, best_rho
        preds = forward_batch(params, config, dev_batch)
        rep = report_from_scores(preds, dev_batch.targets)
        train_loss = float(np.mean(pending_losses)) if pending_losses else None
        pending_losses.clear()
        history.records.append(EvalRecord(step, train_loss, rep.spearman, rep.mse))
        if len(history.records) == 1 or _rank_key(rep.spearman) > _rank_key(best_rho):
            best_params, best_rho = params.copy(), rep.spearman
            history.best_step = step
        logger.info("step %d train_loss %s dev_spearman %s dev_mse %.5f",
                    step, train_loss, rep.spearman, rep.mse)

    evaluate_dev(0)
    stream = batches(len(train_set), cfg.batch_size, rng)
    for step in range(1, total + 1):
        idx = next(stream)
        loss, grads = backward(params, config, train_batch.take(idx), rng=rng)
        if not math.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        pending_losses.append(loss)
        params, state = adam_step(params, grads, state, cfg.learning_rate)
        if step % cfg.eval_every == 0 or step == total:
            evaluate_dev(step)

    provenance = "fine-tuned" if cfg.warm_start is not None else "trained"
    ckpt = Checkpoint(best_params, config, history.best_step, best_rho, provenance,
                      {"learning_rate": cfg.learning_rate, "seed": cfg.seed})
    return ckpt, history


def write_history_csv(history: TrainHistory, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "dev_spearman", "dev_mse"])
        for row in history.to_rows():
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])


# -- grid search ------------------------------------------------------------

GRID_COLUMNS = ("lr", "K", "spearman_dev", "spearman_test", "mse_dev", "mse_test")


@dataclass
class GridResult:
    rows: list
    best_index: int
    best_checkpoint: Checkpoint
    histories: list

    @property
    def best_row(self) -> dict:
        return self.rows[self.best_index]


def grid_search(train_set, dev_set, test_set=None, lrs=LR_GRID, label_counts=LABEL_GRID,
                base: TrainConfig | None = None, model_config: ModelConfig | None = None,
                cell_overrides=None) -> GridResult:
    """Train one model per (lr, K) cell and pick the cell with the best dev Spearman.

    ``cell_overrides`` optionally maps ``(lr, K)`` to extra TrainConfig fields
    for that cell.
    """
    lrs, label_counts = list(lrs), list(label_counts)
    if not lrs or not label_counts:
        raise ValueError("grids must be non-empty")
    base = base or TrainConfig()
    rows, ckpts, histories = [], [], []
    for lr in lrs:
        for k in label_counts:
            extra = (cell_overrides or {}).get((lr, k), {})
            cfg = replace(base, learning_rate=lr, num_labels=k, **extra)
            ckpt, hist = train(train_set, dev_set, cfg, model_config)
            dev = evaluate(ckpt, dev_set)
            test = evaluate(ckpt, test_set) if test_set else None
            rows.append({
                "lr": lr, "K": k,
                "spearman_dev": dev.spearman,
                "spearman_test": test.spearman if test else None,
                "mse_dev": dev.mse,
                "mse_test": test.mse if test else None,
            })
            ckpts.append(ckpt)
            histories.append(hist)
    best = max(range(len(rows)), key=lambda i: (_rank_key(rows[i]["spearman_dev"]), -i))
    return GridResult(rows, best, ckpts[best], histories)


def write_grid(result: GridResult, csv_path=None, json_path=None) -> None:
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=GRID_COLUMNS)
            w.writeheader()
            for row in result.rows:
                w.writerow({k: "" if row[k] is None else row[k] for k in GRID_COLUMNS})
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump({"columns": list(GRID_COLUMNS), "rows": result.rows,
                       "selected": result.best_row}, fh, indent=2)
