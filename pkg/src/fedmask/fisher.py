"""Diagonal Fisher estimation, cross-domain sensitivity scores, and binary masks.

The diagonal Fisher of a model is the per-parameter mean of squared loss
gradients over a dataset. Comparing the diagonals computed on a client's own
data and on style-simulated data yields a per-parameter domain-sensitivity
score in [0, 1]; the top slice of those scores becomes the binary mask of
parameters kept local during aggregation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nn.layers import NonFiniteError
from .nn.model import Model
from .nn.params import LayoutError, ParameterLayout
from .seeding import rng_for


@dataclass
class FisherDiagonal:
    """Per-parameter nonnegative sensitivity values, mean of squared gradients."""

    values: np.ndarray
    layout: ParameterLayout
    sample_count: int


@dataclass
class ResFimScores:
    """Normalized absolute Fisher differences, one score in [0, 1] per parameter."""

    values: np.ndarray
    layout: ParameterLayout


@dataclass
class BinaryMask:
    """One bit per parameter; set bits are kept local, cleared bits aggregated."""

    bits: np.ndarray
    layout: ParameterLayout
    delta_percent: float

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())


def _stack(samples) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label for s in samples])
    return images, labels


def fisher_diagonal(
    model: Model,
    samples,
    mode: str = "empirical",
    seed: int = 0,
    max_samples: int = 64,
    batch_size: int = 16,
    label_draws: int = 1,
) -> FisherDiagonal:
    """Estimate the diagonal Fisher of ``model`` over ``samples`` in eval mode.

    ``empirical`` uses the dataset labels; ``sampled`` draws labels per pixel
    from the model's own predictive distribution (``label_draws`` draws per
    sample). Datasets larger than ``max_samples`` are subsampled uniformly
    without replacement, seeded. Accumulation runs in index order so results
    are reproducible bit for bit.
    """
    if len(samples) == 0:
        raise ValueError("fisher_diagonal needs a non-empty dataset")
    if mode not in ("empirical", "sampled"):
        raise ValueError(f"unknown fisher mode {mode!r}")

    samples = list(samples)
    if max_samples and len(samples) > max_samples:
        rng = rng_for(seed, "fisher-subsample")
        keep = np.sort(rng.choice(len(samples), size=max_samples, replace=False))
        samples = [samples[i] for i in keep]

    layout = model.layout()
    acc = np.zeros(layout.total)
    n = len(samples)
    for start in range(0, n, batch_size):
        chunk = samples[start : start + batch_size]
        images, labels = _stack(chunk)
        if mode == "empirical":
            _, grads = model.per_sample_loss_and_grads(images, labels)
            acc += (grads**2).sum(axis=0)
        else:
            logits = model.forward(images, train=False)
            z = logits - logits.max(axis=-1, keepdims=True)
            probs = np.exp(z)
            probs /= probs.sum(axis=-1, keepdims=True)
            draw_acc = np.zeros(layout.total)
            for d in range(label_draws):
                rng = rng_for(seed, "fisher-draw", start, d)
                u = rng.random(labels.shape)
                drawn = _sample_labels(probs, u)
                _, grads = model.per_sample_loss_and_grads(images, drawn)
                draw_acc += (grads**2).sum(axis=0)
            acc += draw_acc / label_draws
    values = acc / n
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("non-finite Fisher values")
    return FisherDiagonal(values=values, layout=layout, sample_count=n)


def _sample_labels(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Draw one class index per site from categorical probabilities."""
    cdf = probs.cumsum(axis=-1)
    return (u[..., None] >= cdf).sum(axis=-1).astype(np.int64)


def resfim(
    f_real: FisherDiagonal,
    f_sim: FisherDiagonal,
    eps: float = 1e-12,
    normalization: str = "global",
) -> ResFimScores:
    """Score each parameter's domain sensitivity from two Fisher diagonals.

    The absolute difference of the two diagonals is divided by
    max(largest difference over all parameters, eps), giving scores in [0, 1].
    ``normalization="elementwise"`` instead divides each entry by
    max(itself, eps), the literal per-entry reading, kept for comparison.
    """
    if f_real.layout != f_sim.layout:
        raise LayoutError("fisher layouts differ")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = np.abs(f_real.values - f_sim.values)
    if normalization == "global":
        scores = d / max(float(d.max(initial=0.0)), eps)
    elif normalization == "elementwise":
        scores = d / np.maximum(d, eps)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return ResFimScores(values=scores, layout=f_real.layout)


def build_mask(scores: ResFimScores, delta_percent: float) -> BinaryMask:
    """Set exactly round(delta% * P) bits on the largest scores.

    Rounding is half-up; ties are broken toward the lower parameter index.
    """
    if not 0.0 <= delta_percent <= 100.0:
        raise ValueError(f"delta_percent {delta_percent} out of [0, 100]")
    p = scores.layout.total
    k = int(np.floor(delta_percent / 100.0 * p + 0.5))
    bits = np.zeros(p, dtype=bool)
    if k > 0:
        order = np.argsort(-scores.values, kind="stable")
        bits[order[:k]] = True
    return BinaryMask(bits=bits, layout=scores.layout, delta_percent=delta_percent)


STATIC_POLICIES = ("fedavg", "fedbn", "fedper", "local")


def static_mask(layout: ParameterLayout, policy: str) -> BinaryMask:
    """Layer-level baseline masks.

    fedavg keeps nothing local, local keeps everything, fedbn keeps the BN
    scale/shift parameters, fedper keeps the classifier layer.
    """
    bits = np.zeros(layout.total, dtype=bool)
    if policy == "fedavg":
        delta = 0.0
    elif policy == "local":
        bits[:] = True
        delta = 100.0
    elif policy == "fedbn":
        hit = False
        for e in layout.entries:
            if e.name in ("gamma", "beta"):
                bits[e.offset : e.offset + e.length] = True
                hit = True
        if not hit:
            raise ValueError("fedbn policy requires BatchNorm layers in the model")
        delta = 100.0 * bits.sum() / layout.total
    elif policy == "fedper":
        hit = False
        for e in layout.entries:
            if e.layer == "classifier" or e.layer.startswith("classifier."):
                bits[e.offset : e.offset + e.length] = True
                hit = True
        if not hit:
            raise ValueError("fedper policy requires a classifier layer in the model")
        delta = 100.0 * bits.sum() / layout.total
    else:
        raise ValueError(f"unknown static mask policy {policy!r}")
    return BinaryMask(bits=bits, layout=layout, delta_percent=delta)


def per_layer_masking_rate(mask: BinaryMask) -> dict[str, float]:
    """Fraction of set bits per layout layer id."""
    rates: dict[str, float] = {}
    for layer in mask.layout.layer_ids():
        total = 0
        set_bits = 0
        for sl in mask.layout.slices_for_layer(layer):
            total += sl.stop - sl.start
            set_bits += int(mask.bits[sl].sum())
        rates[layer] = set_bits / total
    return rates


def per_block_masking_rate(mask: BinaryMask) -> dict[str, float]:
    """Masking rates grouped by block prefix (the part before the first dot)."""
    totals: dict[str, int] = {}
    set_bits: dict[str, int] = {}
    for e in mask.layout.entries:
        block = e.layer.split(".")[0]
        totals[block] = totals.get(block, 0) + e.length
        set_bits[block] = set_bits.get(block, 0) + int(mask.bits[e.offset : e.offset + e.length].sum())
    return {b: set_bits[b] / totals[b] for b in totals}


MASK_MAGIC = b"BMSK"


def mask_to_bytes(mask: BinaryMask) -> bytes:
    """Bit-packed mask blob with the 8-byte layout hash prepended."""
    packed = np.packbits(mask.bits.astype(np.uint8))
    return (
        MASK_MAGIC
        + mask.layout.hash_bytes
        + struct.pack("<dI", mask.delta_percent, mask.bits.size)
        + packed.tobytes()
    )


def mask_from_bytes(blob: bytes, layout: ParameterLayout) -> BinaryMask:
    if blob[:4] != MASK_MAGIC:
        raise ValueError("not a mask blob (bad magic)")
    if blob[4:12] != layout.hash_bytes:
        raise LayoutError("mask blob layout hash does not match the given layout")
    delta, nbits = struct.unpack_from("<dI", blob, 12)
    packed = np.frombuffer(blob, dtype=np.uint8, offset=24)
    bits = np.unpackbits(packed, count=nbits).astype(bool)
    return BinaryMask(bits=bits, layout=layout, delta_percent=delta)
