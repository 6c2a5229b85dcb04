"""Planted synthetic datasets with known structure.

Used by the test-suite and for smoke-testing the CLI without real embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import Sample
from .model import IMAGE_DIM, LABEL_DIM, SENTENCE_DIM, sigmoid
from .ratings import SCORE_DENOMINATOR


def quantize_eighths(p):
    return np.floor(np.asarray(p) * SCORE_DENOMINATOR + 0.5) / SCORE_DENOMINATOR


@dataclass
class PlantedBilinear:
    """Embeddings generated from low-dimensional latents; target logit is bilinear in the latents.

    ``image = z_img A_img + noise``, ``sentence = z_sen A_sen + noise`` and the
    logit is ``scale * z_img^T C z_sen``. Since ``A`` has full row rank this is
    a bilinear form of the embeddings themselves (up to the noise).
    """

    A_img: np.ndarray     # (d, 64)
    A_sen: np.ndarray     # (d, 512)
    C: np.ndarray         # (d, d)
    scale: float
    noise: float

    @classmethod
    def random(cls, rng, latent_dim: int = 8, logit_std: float = 2.0,
               noise: float = 0.1) -> "PlantedBilinear":
        A_img = rng.normal(size=(latent_dim, IMAGE_DIM)) / np.sqrt(latent_dim)
        A_sen = rng.normal(size=(latent_dim, SENTENCE_DIM)) / np.sqrt(latent_dim)
        C = rng.normal(size=(latent_dim, latent_dim))
        # z^T C z' has variance ||C||_F^2 for standard-normal latents
        return cls(A_img, A_sen, C, logit_std / np.linalg.norm(C), noise)

    @property
    def latent_dim(self) -> int:
        return self.C.shape[0]

    def embed(self, z, A, rng):
        return z @ A + self.noise * rng.normal(size=z.shape[:-1] + (A.shape[1],))

    def logits(self, z_img, z_sen):
        return self.scale * np.einsum("ni,ij,nj->n", z_img, self.C, z_sen)


def planted_qe_samples(n: int, seed: int, num_labels: int = 4, captions_per_image: int = 3,
                       planted: PlantedBilinear | None = None, prefix: str = "s"):
    """Samples whose targets come from a planted bilinear form, quantized to eighths.

    Label embeddings are unrelated noise. Returns ``(samples, planted)`` so that
    dev/test sets can share the same planted form.
    """
    rng = np.random.default_rng(seed)
    planted = planted or PlantedBilinear.random(np.random.default_rng(seed + 7919))
    d = planted.latent_dim
    n_images = -(-n // captions_per_image)
    z_img = rng.normal(size=(n_images, d))
    images = planted.embed(z_img, planted.A_img, rng)
    labels = rng.normal(size=(n_images, num_labels, LABEL_DIM))
    z_sen = rng.normal(size=(n, d))
    sentences = planted.embed(z_sen, planted.A_sen, rng)
    img_of = np.arange(n) // captions_per_image
    targets = quantize_eighths(sigmoid(planted.logits(z_img[img_of], z_sen)))
    return [Sample(f"{prefix}{i}", f"{prefix}img{img_of[i]}", images[img_of[i]], labels[img_of[i]],
                   sentences[i], float(targets[i])) for i in range(n)], planted


@dataclass
class PlantedAlignment:
    """Sentence embedding = linear map of the image embedding plus noise."""

    M: np.ndarray            # (512, 64)
    G: np.ndarray            # (K, 256, 64), label embeddings derived from the image
    noise: float

    @classmethod
    def random(cls, rng, num_labels: int = 4, noise: float = 0.5) -> "PlantedAlignment":
        M = rng.normal(size=(SENTENCE_DIM, IMAGE_DIM)) / np.sqrt(IMAGE_DIM)
        G = rng.normal(size=(num_labels, LABEL_DIM, IMAGE_DIM)) / np.sqrt(IMAGE_DIM)
        return cls(M, G, noise)

    def caption(self, image, rng):
        return image @ self.M.T + self.noise * rng.normal(size=image.shape[:-1] + (SENTENCE_DIM,))

    def labels(self, image, rng):
        lbl = np.einsum("kdi,ni->nkd", self.G, image)
        return lbl + self.noise * rng.normal(size=lbl.shape)


def planted_pairs(n: int, seed: int, alignment: PlantedAlignment, prefix: str = "p"):
    """Ground-truth (image, caption) pairs with no quality target."""
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(n, IMAGE_DIM))
    labels = alignment.labels(images, rng)
    sentences = alignment.caption(images, rng)
    return [Sample(f"{prefix}{i}", f"{prefix}img{i}", images[i], labels[i], sentences[i])
            for i in range(n)]


def planted_transfer_samples(n: int, seed: int, alignment: PlantedAlignment, prefix: str = "q",
                             sharpness: float = 6.0):
    """QE samples whose quality is how well the caption matches its image.

    Each caption is generated from a blend ``a * image + sqrt(1 - a^2) * other``
    of its own image and an unrelated one; the target is a sigmoid of ``a``,
    quantized to eighths.
    """
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(n, IMAGE_DIM))
    others = rng.normal(size=(n, IMAGE_DIM))
    a = rng.uniform(0.0, 1.0, size=n)
    blend = a[:, None] * images + np.sqrt(1.0 - a ** 2)[:, None] * others
    sentences = alignment.caption(blend, rng)
    labels = alignment.labels(images, rng)
    targets = quantize_eighths(sigmoid(sharpness * (a - 0.5)))
    return [Sample(f"{prefix}{i}", f"{prefix}img{i}", images[i], labels[i], sentences[i],
                   float(targets[i])) for i in range(n)]
