"""Hard example mining and augmented-candidate selection.

For each anchor in an input mini-batch, confusable identities are sampled
from a softmax over the anchor row's logits with the anchor's own class
excluded from the normalizer and given zero mass.  One random image per
sampled identity is augmented; the candidate whose raw logit at the
anchor's class is largest survives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import imaging
from .model import ce_label_smoothing_grad

__all__ = [
    "HardDistribution",
    "HardCandidateSet",
    "hard_probabilities",
    "sample_hard_identities",
    "build_hard_batch",
    "select_hardest",
    "aug_loss",
    "aug_loss_grad",
]


@dataclass
class HardDistribution:
    anchor_class: int
    probs: np.ndarray  # (N,) float64, zero at anchor_class, sums to 1


@dataclass
class HardCandidateSet:
    """Per-anchor group of augmented hard-example candidates.

    ``logits`` and ``selected`` stay unset until the candidates have been
    pushed through the shared network and ranked.
    """

    anchor_index: int
    anchor_class: int
    classes: np.ndarray              # (n_h,) sampled identity classes
    images: list[np.ndarray]         # n_h augmented images
    params: list[imaging.AugmentationParams]
    flip_only: np.ndarray            # (n_h,) bool
    logits: np.ndarray | None = field(default=None)
    selected: int | None = field(default=None)


def hard_probabilities(logit_row: np.ndarray, anchor_class: int) -> HardDistribution:
    """Softmax over one logit row with the anchor class excluded."""
    row = np.asarray(logit_row, dtype=np.float64).reshape(-1)
    n = row.shape[0]
    if n < 2:
        raise ValueError("need at least two classes to mine against an anchor")
    if not 0 <= anchor_class < n:
        raise ValueError(f"anchor class {anchor_class} outside [0, {n})")
    if not np.isfinite(row).all():
        raise ValueError("logits must be finite")
    others = np.delete(row, anchor_class)
    shifted = np.exp(others - others.max())
    probs = np.zeros(n, dtype=np.float64)
    probs[np.arange(n) != anchor_class] = shifted / shifted.sum()
    return HardDistribution(anchor_class, probs)


def sample_hard_identities(dist: HardDistribution, n_h: int,
                           rng: np.random.Generator) -> np.ndarray:
    """n_h categorical draws with replacement; anchor mass is zero."""
    if n_h < 1:
        raise ValueError("n_h must be >= 1")
    return rng.choice(dist.probs.shape[0], size=n_h, replace=True, p=dist.probs)


def build_hard_batch(input_logits: np.ndarray, input_labels: np.ndarray,
                     datasets, policy: imaging.AugmentationPolicy, n_h: int,
                     rng: np.random.Generator, store: data_mod.ImageStore,
                     flip_only_first: bool = True,
                     thread_pool=None) -> list[HardCandidateSet]:
    """One HardCandidateSet per anchor row of the input batch.

    Stream consumption per anchor: one categorical draw of n_h identities
    from the exclusion softmax, then one spawned child stream per candidate
    covering its image pick and augmentation parameters, merged in
    candidate order.  Candidate 0 receives flip-only parameters unless
    ``flip_only_first`` is disabled.
    """
    sets = []
    jobs = []
    for anchor, (row, label) in enumerate(zip(input_logits, input_labels)):
        dist = hard_probabilities(row, int(label))
        classes = sample_hard_identities(dist, n_h, rng)
        streams = rng.spawn(n_h)
        entry = HardCandidateSet(
            anchor_index=anchor,
            anchor_class=int(label),
            classes=classes,
            images=[None] * n_h,
            params=[None] * n_h,
            flip_only=np.zeros(n_h, dtype=bool),
        )
        for c, (cls, stream) in enumerate(zip(classes, streams)):
            raw = data_mod.image_of_identity(datasets, int(cls), stream, store)
            if flip_only_first and c == 0:
                params = imaging.flip_only_params(policy.flip_probability, stream)
                entry.flip_only[c] = True
            else:
                params = imaging.sample_augmentation(policy, stream)
            entry.params[c] = params
            jobs.append((entry, c, raw, params))
        sets.append(entry)

    if thread_pool is not None:
        def run(job):
            entry, c, raw, params = job
            entry.images[c] = imaging.apply_augmentation(raw, params)
        list(thread_pool.map(run, jobs))
    else:
        stack = imaging.apply_augmentation_batch(
            np.stack([raw for _, _, raw, _ in jobs]),
            [params for _, _, _, params in jobs])
        for (entry, c, _, _), img in zip(jobs, stack):
            entry.images[c] = img
    return sets


def select_hardest(candidate_logits: np.ndarray, anchor_class: int) -> int:
    """Index of the candidate with the largest raw logit at the anchor's
    class column; ties go to the lowest index."""
    logits = np.atleast_2d(candidate_logits)
    if logits.shape[0] < 1:
        raise ValueError("need at least one candidate")
    return int(np.argmax(logits[:, anchor_class]))


def aug_loss(selected_logits: np.ndarray, selected_labels: np.ndarray,
             eps: float, n_classes: int) -> float:
    """Mean smoothed CE of the selected candidates against their own labels."""
    loss, _ = aug_loss_grad(selected_logits, selected_labels, eps, n_classes)
    return loss


def aug_loss_grad(selected_logits: np.ndarray, selected_labels: np.ndarray,
                  eps: float, n_classes: int):
    return ce_label_smoothing_grad(selected_logits, selected_labels, eps, n_classes)
