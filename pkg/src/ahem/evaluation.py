"""Matching scores and single-shot CMC evaluation.

A probe matches gallery entries by s = 1 - ||zp - zg|| / 2 on unit
features; CMC(k) is the fraction of probes whose true match appears in
the top k, with score ties broken by gallery index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .model import l2_normalize

__all__ = [
    "EvalProtocol",
    "CmcCurve",
    "match_score",
    "cmc_single_shot",
    "run_trials",
]

NORM_TOLERANCE = 1e-4
DEFAULT_RANKS = (1, 5, 10)


@dataclass(frozen=True)
class EvalProtocol:
    probe_id_count: int
    gallery_id_count: int
    trials: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.probe_id_count < 1 or self.gallery_id_count < 1 or self.trials < 1:
            raise ValueError("protocol counts must be >= 1")
        if self.probe_id_count > self.gallery_id_count:
            raise ValueError("every probe identity needs a gallery match")


@dataclass(frozen=True)
class CmcCurve:
    ranks: tuple[int, ...]
    accuracies: tuple[float, ...]

    def at(self, rank: int) -> float:
        return self.accuracies[self.ranks.index(rank)]


def _check_unit_rows(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    norms = np.sqrt((arr ** 2).sum(axis=1))
    if np.abs(norms - 1.0).max() > NORM_TOLERANCE:
        worst = float(np.abs(norms - 1.0).max())
        raise ValueError(f"{what} must be L2 normalized (worst deviation {worst:.2e})")
    return arr


def _scores_against_gallery(probe_row: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    dists = np.sqrt(((gallery - probe_row) ** 2).sum(axis=1))
    return 1.0 - dists / 2.0


def match_score(z_probe: np.ndarray, z_gallery: np.ndarray) -> float:
    """1 - ||zp - zg|| / 2 for unit vectors; lands in [0, 1]."""
    zp = _check_unit_rows(z_probe, "probe feature")[0]
    zg = _check_unit_rows(z_gallery, "gallery feature")[0]
    return float(_scores_against_gallery(zp, zg[None, :])[0])


def cmc_single_shot(probe_features: np.ndarray, probe_ids, gallery_features: np.ndarray,
                    gallery_ids, ranks=DEFAULT_RANKS) -> CmcCurve:
    """Single-shot CMC: each probe identity has exactly one gallery match."""
    probes = _check_unit_rows(probe_features, "probe features")
    gallery = _check_unit_rows(gallery_features, "gallery features")
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if probes.shape[0] != probe_ids.shape[0] or gallery.shape[0] != gallery_ids.shape[0]:
        raise ValueError("feature/id count mismatch")

    ranks = tuple(int(k) for k in ranks)
    hits = np.zeros(len(ranks), dtype=np.int64)
    for row, pid in zip(probes, probe_ids):
        matches = np.flatnonzero(gallery_ids == pid)
        if matches.size != 1:
            raise ValueError(
                f"probe identity {pid!r} must appear exactly once in the gallery, "
                f"found {matches.size}")
        scores = _scores_against_gallery(row, gallery)
        order = np.argsort(-scores, kind="stable")  # ties -> lowest gallery index
        position = int(np.flatnonzero(order == matches[0])[0]) + 1
        hits += np.array([position <= k for k in ranks], dtype=np.int64)
    accs = tuple(float(h) / probes.shape[0] for h in hits)
    return CmcCurve(ranks, accs)


def run_trials(model, dataset: data_mod.DomainDataset, protocol: EvalProtocol,
               store: data_mod.ImageStore, ranks=DEFAULT_RANKS):
    """Repeated probe/gallery sampling on one held-out domain.

    Per trial: sample gallery identities, then probe identities among them;
    one image per identity per side, with a probe image distinct from the
    gallery image (identities with a single image are rejected).  Returns
    (averaged curve, per-trial curves).
    """
    n_ids = len(dataset.identities)
    if n_ids < protocol.gallery_id_count:
        raise ValueError(
            f"domain {dataset.name} has {n_ids} identities, protocol needs "
            f"{protocol.gallery_id_count}")
    rng = np.random.default_rng(protocol.seed)
    curves = []
    for _ in range(protocol.trials):
        gallery_ids = rng.choice(n_ids, size=protocol.gallery_id_count, replace=False)
        probe_ids = rng.choice(gallery_ids, size=protocol.probe_id_count, replace=False)

        gallery_pick = {}
        images, owners, sides = [], [], []
        for ident in gallery_ids:
            rec = dataset.identities[int(ident)]
            pick = int(rng.integers(len(rec.images)))
            gallery_pick[int(ident)] = pick
            images.append(store.get(rec.images[pick]))
            owners.append(int(ident))
            sides.append("g")
        for ident in probe_ids:
            rec = dataset.identities[int(ident)]
            if len(rec.images) < 2:
                raise ValueError(
                    f"identity {rec.label} has a single image; probe and gallery "
                    "images must be distinct")
            pick = int(rng.integers(len(rec.images) - 1))
            if pick >= gallery_pick[int(ident)]:
                pick += 1
            images.append(store.get(rec.images[pick]))
            owners.append(int(ident))
            sides.append("p")

        feats = model.extract_features(np.stack(images))
        feats, _ = l2_normalize(feats)
        gal_mask = np.array([s == "g" for s in sides])
        owners = np.array(owners)
        curve = cmc_single_shot(
            feats[~gal_mask], owners[~gal_mask], feats[gal_mask], owners[gal_mask],
            ranks=ranks)
        curves.append(curve)

    ranks_t = curves[0].ranks
    avg = tuple(
        float(np.mean([c.accuracies[i] for c in curves])) for i in range(len(ranks_t)))
    return CmcCurve(ranks_t, avg), curves
