"""Bilinear quality-estimation network.

Image, object-label and sentence embeddings each go through their own dense
layer with a leaky-ReLU. The projected vectors get a trailing constant 1 and
are combined pairwise by three bilinear layers (label-image, label-sentence,
image-sentence). The ``2K + 1`` bilinear outputs are fed to a sigmoid unit.

Everything is plain numpy; gradients are derived by hand in :func:`backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, MissingTarget, NonFiniteIntermediate

IMAGE_DIM = 64
LABEL_DIM = 256
SENTENCE_DIM = 512


@dataclass(frozen=True)
class ModelConfig:
    proj_dim: int = 64
    num_labels: int = 16
    leaky_slope: float = 0.01
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.proj_dim < 1:
            raise ValueError("proj_dim must be >= 1")
        if self.num_labels < 0:
            raise ValueError("num_labels must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(proj_dim=int(d["proj_dim"]), num_labels=int(d["num_labels"]),
                   leaky_slope=float(d["leaky_slope"]), dropout_rate=float(d["dropout_rate"]))


@dataclass
class ModelParams:
    W_img: np.ndarray
    b_img: np.ndarray
    W_lbl: np.ndarray
    b_lbl: np.ndarray
    W_sen: np.ndarray
    b_sen: np.ndarray
    B_oi: np.ndarray
    B_os: np.ndarray
    B_is: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    @staticmethod
    def shapes(config: ModelConfig) -> dict:
        P, K = config.proj_dim, config.num_labels
        return {
            "W_img": (P, IMAGE_DIM), "b_img": (P,),
            "W_lbl": (P, LABEL_DIM), "b_lbl": (P,),
            "W_sen": (P, SENTENCE_DIM), "b_sen": (P,),
            "B_oi": (P + 1, P + 1), "B_os": (P + 1, P + 1), "B_is": (P + 1, P + 1),
            "W_out": (1, 2 * K + 1), "b_out": (1,),
        }

    def blocks(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_blocks(cls, blocks) -> "ModelParams":
        return cls(**{name: np.asarray(blocks[name], dtype=np.float64)
                      for name in (f.name for f in fields(cls))})

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls(**{k: np.zeros(s) for k, s in cls.shapes(config).items()})

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.blocks().items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{k: np.zeros_like(v) for k, v in self.blocks().items()})

    def check(self, config: ModelConfig) -> None:
        for name, shape in self.shapes(config).items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionMismatch(name, shape, got)
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteIntermediate(f"parameter block {name} is not finite")

    def num_parameters(self) -> int:
        return sum(v.size for v in self.blocks().values())


# Gradients share the parameter container's layout.
Gradients = ModelParams


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform in +-sqrt(1/fan_in) for every matrix, zero biases."""
    rng = np.random.default_rng(seed)
    blocks = {}
    for name, shape in ModelParams.shapes(config).items():
        if name.startswith("b_"):
            blocks[name] = np.zeros(shape)
        else:
            scale = np.sqrt(1.0 / shape[1])
            blocks[name] = rng.uniform(-scale, scale, size=shape)
    return ModelParams(**blocks)


# -- batches ----------------------------------------------------------------

@dataclass
class Batch:
    image: np.ndarray        # (N, 64)
    labels: np.ndarray       # (N, K, 256), zero rows where absent
    label_mask: np.ndarray   # (N, K), 1.0 present / 0.0 absent
    sentence: np.ndarray     # (N, 512)
    targets: np.ndarray | None = None

    def __len__(self):
        return self.image.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.image[idx], self.labels[idx], self.label_mask[idx],
                     self.sentence[idx], None if self.targets is None else self.targets[idx])


def collate(samples: Sequence, num_labels: int) -> Batch:
    """Stack samples into dense arrays, keeping the first ``num_labels`` labels by rank."""
    n = len(samples)
    image = np.zeros((n, IMAGE_DIM))
    labels = np.zeros((n, num_labels, LABEL_DIM))
    mask = np.zeros((n, num_labels))
    sentence = np.zeros((n, SENTENCE_DIM))
    targets = np.zeros(n)
    have_targets = True
    for i, s in enumerate(samples):
        image[i] = s.image
        sentence[i] = s.sentence
        m = min(num_labels, len(s.labels))
        if m:
            labels[i, :m] = s.labels[:m]
            mask[i, :m] = 1.0
        if s.target is None:
            have_targets = False
        else:
            targets[i] = s.target
    return Batch(image, labels, mask, sentence, targets if have_targets else None)


def _as_batch(batch, config: ModelConfig) -> Batch:
    if isinstance(batch, Batch):
        if batch.labels.shape[1] != config.num_labels:
            raise DimensionMismatch("labels", config.num_labels, batch.labels.shape[1])
        return batch
    return collate(batch, config.num_labels)


# -- primitive layers -------------------------------------------------------

def bilinear(x, y, B) -> float:
    """``x^T B y``."""
    x, y, B = np.asarray(x, dtype=float), np.asarray(y, dtype=float), np.asarray(B, dtype=float)
    if B.shape != (x.shape[-1], y.shape[-1]):
        raise DimensionMismatch("B", (x.shape[-1], y.shape[-1]), B.shape)
    return float(x @ B @ y)


def leaky_relu(h, slope):
    return np.where(h >= 0, h, slope * h)


def dense_forward(x, W, b, slope):
    x, W, b = np.asarray(x, dtype=float), np.asarray(W, dtype=float), np.asarray(b, dtype=float)
    if W.shape[1] != x.shape[-1]:
        raise DimensionMismatch("x", W.shape[1], x.shape[-1])
    if b.shape != (W.shape[0],):
        raise DimensionMismatch("b", (W.shape[0],), b.shape)
    return leaky_relu(x @ W.T + b, slope)


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# float64 sigmoid rounds to exactly 0 or 1 once |logit| passes ~37 (upper) or
# ~745 (lower); clamp so scores stay strictly inside the unit interval
_SCORE_LO = np.finfo(float).tiny
_SCORE_HI = np.nextafter(1.0, 0.0)


def score_from_logits(x):
    return np.clip(sigmoid(x), _SCORE_LO, _SCORE_HI)


def _augment(a):
    return np.concatenate([a, np.ones(a.shape[:-1] + (1,))], axis=-1)


# -- dropout ----------------------------------------------------------------

@dataclass
class DropoutMasks:
    """Inverted-dropout multipliers (0 or ``1/(1-rate)``) for every layer input."""

    image: np.ndarray
    labels: np.ndarray
    sentence: np.ndarray
    proj_image: np.ndarray
    proj_labels: np.ndarray
    proj_sentence: np.ndarray
    head: np.ndarray

    @classmethod
    def ones(cls, config: ModelConfig, n: int, head_shape=None) -> "DropoutMasks":
        P, K = config.proj_dim, config.num_labels
        return cls(np.ones((n, IMAGE_DIM)), np.ones((n, K, LABEL_DIM)), np.ones((n, SENTENCE_DIM)),
                   np.ones((n, P)), np.ones((n, K, P)), np.ones((n, P)),
                   np.ones(head_shape or (n, 2 * K + 1)))


def sample_masks(config: ModelConfig, n: int, rng: np.random.Generator,
                 head_shape=None) -> DropoutMasks | None:
    rate = config.dropout_rate
    if rate == 0.0:
        return None
    keep = 1.0 - rate
    P, K = config.proj_dim, config.num_labels

    def draw(shape):
        return (rng.random(shape) < keep) / keep

    return DropoutMasks(
        image=draw((n, IMAGE_DIM)), labels=draw((n, K, LABEL_DIM)), sentence=draw((n, SENTENCE_DIM)),
        proj_image=draw((n, P)), proj_labels=draw((n, K, P)), proj_sentence=draw((n, P)),
        head=draw(head_shape or (n, 2 * K + 1)),
    )


# -- projection stage (shared with pretraining) -----------------------------

@dataclass
class Projection:
    x_img: np.ndarray
    x_lbl: np.ndarray
    x_sen: np.ndarray
    h_img: np.ndarray
    h_lbl: np.ndarray
    h_sen: np.ndarray
    img: np.ndarray    # augmented, (N, P+1)
    lbl: np.ndarray    # augmented, (N, K, P+1)
    sen: np.ndarray    # augmented, (N, P+1)
    label_mask: np.ndarray
    masks: DropoutMasks | None


def project(params: ModelParams, config: ModelConfig, batch: Batch,
            masks: DropoutMasks | None = None) -> Projection:
    x_img, x_lbl, x_sen = batch.image, batch.labels, batch.sentence
    if masks is not None:
        x_img, x_lbl, x_sen = x_img * masks.image, x_lbl * masks.labels, x_sen * masks.sentence
    h_img = x_img @ params.W_img.T + params.b_img
    h_lbl = x_lbl @ params.W_lbl.T + params.b_lbl
    h_sen = x_sen @ params.W_sen.T + params.b_sen
    slope = config.leaky_slope
    a_img, a_lbl, a_sen = leaky_relu(h_img, slope), leaky_relu(h_lbl, slope), leaky_relu(h_sen, slope)
    if masks is not None:
        a_img, a_lbl, a_sen = a_img * masks.proj_image, a_lbl * masks.proj_labels, a_sen * masks.proj_sentence
    return Projection(x_img, x_lbl, x_sen, h_img, h_lbl, h_sen,
                      _augment(a_img), _augment(a_lbl), _augment(a_sen), batch.label_mask, masks)


def project_backward(config: ModelConfig, proj: Projection, d_img, d_lbl, d_sen,
                     grads: ModelParams) -> None:
    """Accumulate dense-layer gradients given gradients w.r.t. the augmented vectors."""
    slope = config.leaky_slope
    masks = proj.masks
    d_img, d_lbl, d_sen = d_img[..., :-1], d_lbl[..., :-1], d_sen[..., :-1]
    if masks is not None:
        d_img, d_lbl, d_sen = d_img * masks.proj_image, d_lbl * masks.proj_labels, d_sen * masks.proj_sentence
    d_img = d_img * np.where(proj.h_img >= 0, 1.0, slope)
    d_lbl = d_lbl * np.where(proj.h_lbl >= 0, 1.0, slope)
    d_sen = d_sen * np.where(proj.h_sen >= 0, 1.0, slope)
    grads.W_img += d_img.T @ proj.x_img
    grads.b_img += d_img.sum(axis=0)
    P = d_lbl.shape[-1]
    flat_d = d_lbl.reshape(-1, P)
    grads.W_lbl += flat_d.T @ proj.x_lbl.reshape(-1, LABEL_DIM)
    grads.b_lbl += flat_d.sum(axis=0)
    grads.W_sen += d_sen.T @ proj.x_sen
    grads.b_sen += d_sen.sum(axis=0)


# -- QE head ----------------------------------------------------------------

@dataclass
class _HeadCache:
    proj: Projection
    v_oi: np.ndarray   # B_oi @ img, (N, P+1)
    v_os: np.ndarray   # B_os @ sen
    v_is: np.ndarray   # B_is @ sen
    z: np.ndarray      # after head dropout
    logits: np.ndarray


def _head_forward(params: ModelParams, config: ModelConfig, batch: Batch,
                  masks: DropoutMasks | None) -> _HeadCache:
    proj = project(params, config, batch, masks)
    v_oi = proj.img @ params.B_oi.T
    v_os = proj.sen @ params.B_os.T
    v_is = proj.sen @ params.B_is.T
    z_oi = np.einsum("nkp,np->nk", proj.lbl, v_oi) * batch.label_mask
    z_os = np.einsum("nkp,np->nk", proj.lbl, v_os) * batch.label_mask
    z_is = np.einsum("np,np->n", proj.img, v_is)
    z = np.concatenate([z_oi, z_os, z_is[:, None]], axis=1)
    if masks is not None:
        z = z * masks.head
    logits = z @ params.W_out[0] + params.b_out[0]
    if not np.all(np.isfinite(logits)):
        raise NonFiniteIntermediate("non-finite logit in forward pass")
    return _HeadCache(proj, v_oi, v_os, v_is, z, logits)


def logits_batch(params, config, batch, rng=None, masks=None) -> np.ndarray:
    """Pre-sigmoid outputs. Dropout is applied only if ``rng`` or ``masks`` is given."""
    batch = _as_batch(batch, config)
    if masks is None and rng is not None:
        masks = sample_masks(config, len(batch), rng)
    return _head_forward(params, config, batch, masks).logits


def forward_batch(params, config, batch, rng=None, masks=None) -> np.ndarray:
    return score_from_logits(logits_batch(params, config, batch, rng, masks))


def forward(params: ModelParams, config: ModelConfig, sample, mode: str = "infer",
            rng: np.random.Generator | None = None) -> float:
    """Score a single sample. ``mode="train"`` needs an ``rng`` for dropout."""
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng")
    elif mode == "infer":
        rng = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(forward_batch(params, config, [sample], rng=rng)[0])


def backward(params: ModelParams, config: ModelConfig, batch, rng=None,
             masks: DropoutMasks | None = None):
    """Batch-mean squared error and its exact gradient.

    Dropout masks are drawn from ``rng`` (or passed directly) and then held
    fixed, so the gradient is that of the sampled sub-network.
    """
    batch = _as_batch(batch, config)
    n = len(batch)
    if n == 0:
        raise ValueError("batch must be non-empty")
    if batch.targets is None:
        raise MissingTarget("every sample in a training batch needs a target")
    if masks is None and rng is not None:
        masks = sample_masks(config, n, rng)
    cache = _head_forward(params, config, batch, masks)
    scores = score_from_logits(cache.logits)
    resid = scores - batch.targets
    loss = float(np.mean(resid ** 2))
    d_logits = (2.0 / n) * resid * scores * (1.0 - scores)
    grads = params.zeros_like()
    head_backward(params, config, cache.proj, cache.v_oi, cache.v_os, cache.v_is,
                  cache.z, d_logits, grads)
    return loss, grads


def head_backward(params, config, proj, v_oi, v_os, v_is, z, d_logits, grads) -> None:
    K = config.num_labels
    grads.W_out += (d_logits @ z)[None, :]
    grads.b_out += d_logits.sum()
    dz = np.outer(d_logits, params.W_out[0])
    if proj.masks is not None:
        dz = dz * proj.masks.head
    dz_oi = dz[:, :K] * proj.label_mask
    dz_os = dz[:, K:2 * K] * proj.label_mask
    dz_is = dz[:, 2 * K]

    r_oi = np.einsum("nk,nkp->np", dz_oi, proj.lbl)
    r_os = np.einsum("nk,nkp->np", dz_os, proj.lbl)
    grads.B_oi += r_oi.T @ proj.img
    grads.B_os += r_os.T @ proj.sen
    grads.B_is += (dz_is[:, None] * proj.img).T @ proj.sen

    d_lbl = dz_oi[:, :, None] * v_oi[:, None, :] + dz_os[:, :, None] * v_os[:, None, :]
    d_img = r_oi @ params.B_oi + dz_is[:, None] * v_is
    d_sen = r_os @ params.B_os + dz_is[:, None] * (proj.img @ params.B_is)
    project_backward(config, proj, d_img, d_lbl, d_sen, grads)
