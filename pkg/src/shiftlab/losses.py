"""The four training losses.

Classification loss on labeled source samples; a domain-confusion loss
driven by the discriminator; a contrastive centroid alignment loss that
pulls same-class centroids of the two domains together while pushing
cross-class pairs apart; and a pairwise discriminative alignment loss
doing the same at the sample level. The two alignment losses consume
pseudo-labels and per-sample confidence weights on the target side.

Ratio losses use means rather than sums in numerator and denominator so
batch size and class count do not rescale them, and every ratio
denominator carries an epsilon of 1e-8.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tape,
    Tensor,
    add,
    add_n,
    affine,
    clamp_min,
    div,
    euclidean_distance,
    gather_rows,
    log as log_op,
    matmul,
    mean_all,
    pairwise_distances,
    scale_by,
    sum_all,
)

__all__ = [
    "PROB_FLOOR",
    "RATIO_EPS",
    "WeightedBatch",
    "CentroidBank",
    "cross_entropy",
    "domain_adversarial_loss",
    "update_centroids",
    "centroid_alignment_loss",
    "discriminative_alignment_loss",
]

log = logging.getLogger(__name__)

# Probabilities are floored at this before any log.
PROB_FLOOR = 1e-12
# Added to every ratio denominator.
RATIO_EPS = 1e-8


@dataclass
class WeightedBatch:
    """Features with labels and per-sample confidence weights.

    Labels are true classes for source batches and pseudo-labels for
    target batches. Weights are plain numbers, never differentiated.
    """

    features: Tensor
    labels: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.weights.shape != (n,):
            raise ShapeError(
                f"batch of {n} features with labels {self.labels.shape}, "
                f"weights {self.weights.shape}"
            )
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("batch weights must be finite")
        if self.weights.size and (self.weights.min() < 0.0 or self.weights.max() > 1.0):
            raise ValueError("batch weights must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("batch labels must be non-negative")


def cross_entropy(tape: Tape | None, probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-probability of the given label per row."""
    picked = gather_rows(tape, probs, labels)
    return affine(tape, mean_all(tape, log_op(tape, clamp_min(tape, picked, PROB_FLOOR))), -1.0)


def domain_adversarial_loss(tape: Tape | None, d_src: Tensor, d_tgt: Tensor) -> Tensor:
    """Binary cross-entropy with source labeled 0 and target labeled 1.

    Minimizing this trains the discriminator; the gradient reversal inside
    the discriminator path makes the extractor ascend it, so one descent
    direction realizes the adversarial game.
    """
    for name, t in (("d_src", d_src), ("d_tgt", d_tgt)):
        if t.shape[1] != 1:
            raise ShapeError(f"{name} must be n x 1, got {t.shape}")
        if np.any(t.values <= 0.0) or np.any(t.values >= 1.0):
            raise ValueError(f"{name}: discriminator outputs must lie strictly in (0, 1)")
    src_term = mean_all(
        tape, log_op(tape, clamp_min(tape, affine(tape, d_src, -1.0, 1.0), PROB_FLOOR))
    )
    tgt_term = mean_all(tape, log_op(tape, clamp_min(tape, d_tgt, PROB_FLOOR)))
    return affine(tape, add(tape, src_term, tgt_term), -1.0)


class CentroidBank:
    """Per-domain, per-class weighted moving-average feature centroids.

    Stored centroids are constants for gradient purposes; only the current
    batch's contribution, recorded as a tensor expression during
    ``update_centroids``, is differentiated. Expressions are tagged with
    the tape that built them so a stale expression from an earlier step is
    never reused.
    """

    def __init__(self, num_classes: int, ema_coeff: float = 0.7) -> None:
        if not 0.0 < ema_coeff <= 1.0:
            raise ValueError(f"ema_coeff must be in (0, 1], got {ema_coeff}")
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.num_classes = num_classes
        self.ema_coeff = ema_coeff
        self._values: dict[tuple[str, int], np.ndarray] = {}
        self._exprs: dict[tuple[str, int], tuple[Tape | None, Tensor]] = {}

    def initialized(self, domain: str, klass: int) -> bool:
        return (domain, klass) in self._values

    def value(self, domain: str, klass: int) -> np.ndarray:
        return self._values[(domain, klass)]

    def eligible_classes(self) -> list[int]:
        """Classes with both source and target centroids initialized."""
        return [
            k
            for k in range(self.num_classes)
            if ("source", k) in self._values and ("target", k) in self._values
        ]

    def _term(self, tape: Tape | None, domain: str, klass: int) -> Tensor:
        """Centroid as a graph node: this step's expression, else a constant."""
        entry = self._exprs.get((domain, klass))
        if entry is not None and entry[0] is tape:
            return entry[1]
        return Tensor(self._values[(domain, klass)])


def update_centroids(
    tape: Tape | None, bank: CentroidBank, batch: WeightedBatch, domain: str
) -> None:
    """Fold one batch into the bank's centroids for ``domain``.

    Batch centroid of class k is the weight-normalized mean of its
    features; it is mixed into the stored centroid with the bank's EMA
    coefficient, or adopted outright the first time the class appears.
    Classes absent from the batch (or present only with zero weight) are
    untouched.
    """
    if domain not in ("source", "target"):
        raise ValueError(f"domain must be source|target, got {domain!r}")
    if batch.labels.size and batch.labels.max() >= bank.num_classes:
        raise ValueError(
            f"label {int(batch.labels.max())} out of range for {bank.num_classes} classes"
        )
    theta = bank.ema_coeff
    for k in np.unique(batch.labels):
        k = int(k)
        mask = batch.labels == k
        total_w = float(batch.weights[mask].sum())
        if total_w == 0.0:
            continue
        coeff = np.where(mask, batch.weights, 0.0) / total_w
        contrib = matmul(tape, Tensor(coeff.reshape(1, -1)), batch.features)
        if bank.initialized(domain, k):
            old = bank.value(domain, k)
            expr = add(tape, affine(tape, contrib, 1.0 - theta), Tensor(theta * old))
        else:
            expr = contrib
        bank._values[(domain, k)] = expr.values[0].copy()
        bank._exprs[(domain, k)] = (tape, expr)


def centroid_alignment_loss(tape: Tape | None, bank: CentroidBank) -> Tensor:
    """Contrastive ratio over domain centroid pairs.

    Numerator: mean distance between source and target centroids of the
    same class. Denominator: mean over ordered cross-class pairs (i, k),
    i != k, of the distance from source centroid i to target centroid k.
    With a single eligible class there are no cross pairs and the plain
    numerator is returned; with none, the loss is 0 and carries no
    gradient.
    """
    eligible = bank.eligible_classes()
    if not eligible:
        log.warning("centroid alignment skipped: no class has centroids in both domains")
        return Tensor([[0.0]])
    src = {k: bank._term(tape, "source", k) for k in eligible}
    tgt = {k: bank._term(tape, "target", k) for k in eligible}
    same = [euclidean_distance(tape, src[k], tgt[k]) for k in eligible]
    numerator = affine(tape, add_n(tape, same), 1.0 / len(same))
    if len(eligible) < 2:
        return numerator
    cross = [
        euclidean_distance(tape, src[i], tgt[k])
        for i in eligible
        for k in eligible
        if i != k
    ]
    denominator = affine(tape, add_n(tape, cross), 1.0 / len(cross))
    return div(tape, numerator, affine(tape, denominator, 1.0, RATIO_EPS))


def discriminative_alignment_loss(
    tape: Tape | None,
    batch_src: WeightedBatch,
    batch_tgt: WeightedBatch,
    diagnostics: dict | None = None,
) -> Tensor:
    """Sample-level contrastive ratio across the two batches.

    Every source-target pair contributes sqrt(w_s * w_t) times the feature
    distance; pairs with matching labels form the numerator mean, the rest
    the denominator mean. If either side is empty the batch contributes
    nothing (returned loss 0, counted in ``diagnostics``).
    """
    if batch_src.labels.size == 0 or batch_tgt.labels.size == 0:
        raise ValueError("discriminative alignment needs non-empty batches")
    same = batch_src.labels[:, None] == batch_tgt.labels[None, :]
    n_same = int(same.sum())
    n_diff = same.size - n_same
    if n_same == 0 or n_diff == 0:
        if diagnostics is not None:
            key = "no_same_label_pairs" if n_same == 0 else "no_diff_label_pairs"
            diagnostics[key] = diagnostics.get(key, 0) + 1
        return Tensor([[0.0]])
    pair_w = np.sqrt(np.outer(batch_src.weights, batch_tgt.weights))
    dists = pairwise_distances(tape, batch_src.features, batch_tgt.features)
    numerator = sum_all(tape, scale_by(tape, dists, pair_w * same / n_same))
    denominator = sum_all(tape, scale_by(tape, dists, pair_w * ~same / n_diff))
    return div(tape, numerator, affine(tape, denominator, 1.0, RATIO_EPS))
