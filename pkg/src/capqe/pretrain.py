"""Image-text matching pretraining with in-batch negatives.

Within a batch of B ground-truth pairs, every image is scored against every
caption using the QE head's pre-sigmoid logit, and a softmax over each row
must pick out the image's own caption. Object-label features always come from
the image side of a pair.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import Checkpoint
from .errors import DimensionMismatch, EmptyDataset, NonFiniteLoss, NonSquare
from .model import (Batch, ModelConfig, ModelParams, collate, project, project_backward,
                    sample_masks)
from .training import AdamState, TrainConfig, adam_step, batches, initial_params, resolve_model_config

logger = logging.getLogger(__name__)


@dataclass
class _PairCache:
    proj: object
    v_oi: np.ndarray
    v_os: np.ndarray
    v_is: np.ndarray
    z: np.ndarray        # (B, B, 2K+1) after head dropout
    logits: np.ndarray   # (B, B)


def _pair_forward(params: ModelParams, config: ModelConfig, batch: Batch, masks=None) -> _PairCache:
    n = len(batch)
    if n < 2:
        raise DimensionMismatch("batch size", ">= 2", n)
    proj = project(params, config, batch, masks)
    K = config.num_labels
    v_oi = proj.img @ params.B_oi.T           # depends on image side only
    v_os = proj.sen @ params.B_os.T
    v_is = proj.sen @ params.B_is.T
    z_oi = np.einsum("ikp,ip->ik", proj.lbl, v_oi) * batch.label_mask
    z_os = np.einsum("ikp,jp->ijk", proj.lbl, v_os) * batch.label_mask[:, None, :]
    z_is = proj.img @ v_is.T
    z = np.empty((n, n, 2 * K + 1))
    z[:, :, :K] = z_oi[:, None, :]
    z[:, :, K:2 * K] = z_os
    z[:, :, 2 * K] = z_is
    if masks is not None:
        z *= masks.head
    logits = z @ params.W_out[0] + params.b_out[0]
    return _PairCache(proj, v_oi, v_os, v_is, z, logits)


def in_batch_logits(params: ModelParams, config: ModelConfig, batch) -> np.ndarray:
    """``(B, B)`` matrix; entry ``(i, j)`` scores image ``i`` (with its labels) against caption ``j``."""
    if not isinstance(batch, Batch):
        batch = collate(batch, config.num_labels)
    return _pair_forward(params, config, batch).logits


def nce_loss(logits):
    """Row-wise softmax cross-entropy against the diagonal, plus matching accuracy.

    A row counts as correct only when its diagonal entry is strictly the largest.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise NonSquare(f"expected a square matrix, got shape {logits.shape}")
    n = logits.shape[0]
    if n < 2:
        raise NonSquare("need at least a 2x2 matrix")
    row_max = logits.max(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(np.exp(logits - row_max).sum(axis=1))
    diag = np.diag(logits)
    loss = float(np.mean(lse - diag))
    off = logits.copy()
    np.fill_diagonal(off, -np.inf)
    accuracy = float(np.mean(diag > off.max(axis=1)))
    return loss, accuracy


def _nce_grad(logits):
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    soft = np.exp(shifted)
    soft /= soft.sum(axis=1, keepdims=True)
    soft[np.arange(n), np.arange(n)] -= 1.0
    return soft / n


def pair_backward(params: ModelParams, config: ModelConfig, batch: Batch, rng=None, masks=None):
    """NCE loss, accuracy and exact gradients (dropout masks held fixed)."""
    n = len(batch)
    if masks is None and rng is not None:
        masks = sample_masks(config, n, rng, head_shape=(n, n, 2 * config.num_labels + 1))
    cache = _pair_forward(params, config, batch, masks)
    loss, acc = nce_loss(cache.logits)
    d_logits = _nce_grad(cache.logits)
    grads = params.zeros_like()
    grads.W_out += np.einsum("ij,ijc->c", d_logits, cache.z)[None, :]
    grads.b_out += d_logits.sum()

    K = config.num_labels
    proj = cache.proj
    dz = d_logits[:, :, None] * params.W_out[0]
    if masks is not None:
        dz = dz * masks.head
    lmask = batch.label_mask
    dz_oi = dz[:, :, :K].sum(axis=1) * lmask
    dz_os = dz[:, :, K:2 * K] * lmask[:, None, :]
    dz_is = dz[:, :, 2 * K]

    r_oi = np.einsum("ik,ikp->ip", dz_oi, proj.lbl)
    grads.B_oi += r_oi.T @ proj.img
    # z_os[i,j,k] = lbl[i,k] . (B_os sen[j])
    r_os = np.einsum("ijk,ikp->jp", dz_os, proj.lbl)
    grads.B_os += r_os.T @ proj.sen
    grads.B_is += proj.img.T @ dz_is @ proj.sen

    d_lbl = dz_oi[:, :, None] * cache.v_oi[:, None, :] + np.einsum("ijk,jp->ikp", dz_os, cache.v_os)
    d_img = r_oi @ params.B_oi + dz_is @ cache.v_is
    d_sen = r_os @ params.B_os + dz_is.T @ (proj.img @ params.B_is)
    project_backward(config, proj, d_img, d_lbl, d_sen, grads)
    return loss, acc, grads


def matching_accuracy(params: ModelParams, config: ModelConfig, pairs, batch_size: int = 32,
                      n_batches: int = 100, seed: int = 0) -> float:
    """Mean in-batch accuracy over ``n_batches`` random batches drawn from ``pairs``."""
    batch = pairs if isinstance(pairs, Batch) else collate(pairs, config.num_labels)
    if len(batch) < batch_size:
        raise EmptyDataset(f"need at least {batch_size} pairs, have {len(batch)}")
    rng = np.random.default_rng(seed)
    accs = []
    for _ in range(n_batches):
        idx = rng.choice(len(batch), size=batch_size, replace=False)
        accs.append(nce_loss(in_batch_logits(params, config, batch.take(idx)))[1])
    return float(np.mean(accs))


@dataclass
class PretrainHistory:
    records: list = field(default_factory=list)   # (step, train_loss, dev_accuracy)


def pretrain(pairs, cfg: TrainConfig, model_config: ModelConfig | None = None, dev_pairs=None,
             init: ModelParams | None = None):
    """Adam on the in-batch NCE loss. Returns ``(final_checkpoint, history)``."""
    config = resolve_model_config(cfg, model_config)
    if len(pairs) < max(2, cfg.batch_size):
        raise EmptyDataset(f"need at least {max(2, cfg.batch_size)} pairs, have {len(pairs)}")
    params = initial_params(cfg, config, init)
    data = collate(pairs, config.num_labels)
    dev = collate(dev_pairs, config.num_labels) if dev_pairs else None
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.init(params)
    history = PretrainHistory()
    total = cfg.steps_for(len(pairs))
    losses = []

    def log_eval(step):
        dev_acc = None
        if dev is not None and len(dev) >= 2:
            dev_acc = matching_accuracy(params, config, dev, min(cfg.batch_size, len(dev)),
                                        n_batches=10, seed=cfg.seed)
        history.records.append((step, float(np.mean(losses)) if losses else None, dev_acc))
        losses.clear()
        logger.info("pretrain step %d dev matching accuracy %s", step, dev_acc)

    log_eval(0)
    stream = batches(len(pairs), cfg.batch_size, rng)
    for step in range(1, total + 1):
        idx = next(stream)
        if len(idx) < 2:
            # a trailing single pair has no negatives
            idx = next(stream)
        loss, _, grads = pair_backward(params, config, data.take(idx), rng=rng)
        if not math.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        losses.append(loss)
        params, state = adam_step(params, grads, state, cfg.learning_rate)
        if step % cfg.eval_every == 0 or step == total:
            log_eval(step)

    ckpt = Checkpoint(params, config, total, None, "pretrained",
                      {"learning_rate": cfg.learning_rate, "seed": cfg.seed})
    return ckpt, history
