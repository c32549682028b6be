"""Two-pass training loop with hard-example mining and candidate selection.

One iteration in the full method: augment the input batch with flips only,
take its smoothed-CE loss, mine confusable identities from the exclusion
softmax, push the augmented candidates through the same network, keep the
hardest candidate per anchor, and step SGD on the mean of the two losses.
Ablation modes drop or rewire the branches.

All randomness flows through generators derived from the config seed, so a
run is reproducible bit for bit in single-threaded mode.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import imaging, mining
from .model import (ReidModel, ce_label_smoothing_grad, reference_arch,
                    save_checkpoint)

__all__ = [
    "MODES",
    "TrainConfig",
    "IterationRecord",
    "TrainContext",
    "parse_config",
    "train_iteration",
    "train",
    "flip_only_rate",
    "thread_count",
]

MODES = ("baseline", "augment", "mining", "augment_mining", "aug_mining_select")
METRICS_HEADER = ("iteration", "epoch", "lr", "L_batch", "L_aug", "L_total",
                  "flip_only_rate")


@dataclass
class TrainConfig:
    seed: int
    n_bs: int = 16
    n_h: int = 4
    epochs: int = 30
    initial_lr: float = 0.01
    lr_decay: float = 0.1
    decay_epoch: int | None = None
    momentum: float = 0.9
    weight_decay: float = 0.0005
    smoothing: float = 0.1
    dropout: float = 0.5
    policy: str = "moderate"
    mode: str = "aug_mining_select"
    input_height: int = data_mod.DEFAULT_HEIGHT
    input_width: int = data_mod.DEFAULT_WIDTH

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.policy not in imaging.POLICY_PRESETS:
            raise ValueError(
                f"unknown policy {self.policy!r}; choose from "
                f"{tuple(imaging.POLICY_PRESETS)}")
        if self.n_h < 1:
            raise ValueError("n_h must be >= 1")
        if self.n_bs < 1 or self.epochs < 0:
            raise ValueError("n_bs must be >= 1 and epochs >= 0")
        if self.mode in ("mining", "augment_mining"):
            # these ablations use a single un-selected hard example
            self.n_h = 1

    @property
    def effective_decay_epoch(self) -> int:
        """Explicit decay epoch, or the default 20-of-30 point scaled to
        the configured epoch count."""
        if self.decay_epoch is not None:
            return self.decay_epoch
        return round(self.epochs * 20 / 30)

    def lr_at(self, epoch: int) -> float:
        if epoch >= self.effective_decay_epoch:
            return self.initial_lr * self.lr_decay
        return self.initial_lr

    @property
    def policy_preset(self) -> imaging.AugmentationPolicy:
        return imaging.POLICY_PRESETS[self.policy]


_INT_FIELDS = {"seed", "n_bs", "n_h", "epochs", "decay_epoch",
               "input_height", "input_width"}
_FLOAT_FIELDS = {"initial_lr", "lr_decay", "momentum", "weight_decay",
                 "smoothing", "dropout"}


def parse_config(text: str) -> TrainConfig:
    """Parse plain-text key=value lines into a TrainConfig.

    Unknown keys are rejected; a seed is mandatory.  Blank lines and lines
    starting with '#' are ignored.
    """
    known = {f.name for f in fields(TrainConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate config key {key!r}")
        if key in _INT_FIELDS:
            values[key] = int(value)
        elif key in _FLOAT_FIELDS:
            values[key] = float(value)
        else:
            values[key] = value
    if "seed" not in values:
        raise ValueError("config must set a seed (reproducibility is mandatory)")
    return TrainConfig(**values)


@dataclass
class IterationRecord:
    iteration: int
    epoch: int
    lr: float
    l_batch: float
    l_aug: float | None
    l_total: float
    flip_only_fraction: float | None


@dataclass
class TrainContext:
    """Everything an iteration needs besides the model and the batch."""

    datasets: list
    label_space: data_mod.LabelSpace
    store: data_mod.ImageStore
    thread_pool: ThreadPoolExecutor | None = None


def thread_count() -> int:
    """Parallelism degree from AHEM_THREADS; 1 (the default) is the
    strictly single-threaded deterministic mode."""
    raw = os.environ.get("AHEM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"AHEM_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"AHEM_THREADS must be >= 1, got {n}")
    return n


def _augment_input(images: np.ndarray, policy: imaging.AugmentationPolicy,
                   full_policy: bool, rng: np.random.Generator) -> np.ndarray:
    if full_policy:
        params = [imaging.sample_augmentation(policy, rng)
                  for _ in range(images.shape[0])]
    else:
        params = [imaging.flip_only_params(policy.flip_probability, rng)
                  for _ in range(images.shape[0])]
    return imaging.apply_augmentation_batch(images, params)


def train_iteration(model: ReidModel, batch: data_mod.MiniBatch,
                    config: TrainConfig, ctx: TrainContext,
                    rng: np.random.Generator, lr: float,
                    iteration: int = 0, epoch: int = 0) -> IterationRecord:
    """Run one optimization step and return its record.

    Stream consumption order: input augmentation params (one candidate per
    image), input-pass dropout, mining draws (see build_hard_batch),
    hard-pass dropout.
    """
    policy = config.policy_preset
    n = batch.labels.shape[0]
    full_input_aug = config.mode in ("augment", "augment_mining")
    hard_branch = config.mode in ("mining", "augment_mining", "aug_mining_select")

    images = _augment_input(batch.images, policy, full_input_aug, rng)
    emb, cache_in = model.forward_features(images, train_mode=True, rng=rng)
    logits_in = model.classify(emb)
    l_batch, dlogits_in = ce_label_smoothing_grad(
        logits_in, batch.labels, config.smoothing, model.num_classes)

    model.zero_grad()
    if not hard_branch:
        model.backward(cache_in, dlogits_in)
        model.sgd_step(lr, config.momentum, config.weight_decay)
        return IterationRecord(iteration, epoch, lr, l_batch, None, l_batch, None)

    sets = mining.build_hard_batch(
        logits_in, batch.labels, ctx.datasets, policy, config.n_h, rng,
        ctx.store, flip_only_first=config.mode != "augment_mining",
        thread_pool=ctx.thread_pool)
    hard_images = np.stack([img for s in sets for img in s.images])
    emb_h, cache_h = model.forward_features(hard_images, train_mode=True, rng=rng)
    logits_h = model.classify(emb_h)

    selected_rows = []
    selected_labels = []
    flip_hits = []
    for s in sets:
        s.logits = logits_h[s.anchor_index * config.n_h:(s.anchor_index + 1) * config.n_h]
        s.selected = mining.select_hardest(s.logits, s.anchor_class)
        selected_rows.append(s.anchor_index * config.n_h + s.selected)
        selected_labels.append(int(s.classes[s.selected]))
        flip_hits.append(bool(s.flip_only[s.selected]))
    l_aug, dsel = mining.aug_loss_grad(
        logits_h[selected_rows], np.array(selected_labels), config.smoothing,
        model.num_classes)

    dlogits_h = np.zeros_like(logits_h)
    dlogits_h[selected_rows] = dsel
    model.backward(cache_in, 0.5 * dlogits_in)
    model.backward(cache_h, 0.5 * dlogits_h)
    model.sgd_step(lr, config.momentum, config.weight_decay)

    l_total = (l_batch + l_aug) / 2.0
    fraction = float(np.mean(flip_hits))
    return IterationRecord(iteration, epoch, lr, l_batch, l_aug, l_total, fraction)


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(records: list[IterationRecord], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for r in records:
        writer.writerow([
            r.iteration, r.epoch, _format_value(r.lr), _format_value(r.l_batch),
            _format_value(r.l_aug), _format_value(r.l_total),
            _format_value(r.flip_only_fraction),
        ])
    Path(path).write_text(buf.getvalue())


def train(config: TrainConfig, dataset_root, out_dir):
    """Full training run; writes per-epoch checkpoints, a final checkpoint
    and a metrics CSV.  Returns (records, final checkpoint path, csv path)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise data_mod.DatasetError(f"cannot create output directory {out}: {exc}") from exc

    datasets = data_mod.load_dataset(dataset_root)
    label_space = data_mod.union_label_space(datasets)
    store = data_mod.ImageStore(config.input_height, config.input_width)
    sampler = data_mod.EpochSampler(datasets, label_space, store)

    init_ss, train_ss = np.random.SeedSequence(config.seed).spawn(2)
    model = ReidModel(
        reference_arch(),
        label_space.N,
        dropout=config.dropout,
        input_size=(config.input_height, config.input_width),
        seed=config.seed,
        rng=np.random.default_rng(init_ss),
    )
    rng = np.random.default_rng(train_ss)

    workers = thread_count()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    ctx = TrainContext(datasets, label_space, store, pool)

    records: list[IterationRecord] = []
    iteration = 0
    try:
        for epoch in range(config.epochs):
            lr = config.lr_at(epoch)
            for batch in sampler.epoch_batches(config.n_bs, rng):
                records.append(train_iteration(
                    model, batch, config, ctx, rng, lr, iteration, epoch))
                iteration += 1
            save_checkpoint(model, out / f"checkpoint_epoch{epoch + 1:03d}.ckpt")
    finally:
        if pool is not None:
            pool.shutdown()

    final_path = out / "checkpoint.ckpt"
    save_checkpoint(model, final_path)
    metrics_path = out / "metrics.csv"
    write_metrics(records, metrics_path)
    return records, final_path, metrics_path


def flip_only_rate(records: list[IterationRecord], window) -> float:
    """Mean flip-only selection fraction over iterations start <= i < stop."""
    start, stop = window
    hits = [r.flip_only_fraction for r in records
            if start <= r.iteration < stop]
    if not hits:
        raise ValueError(f"no iterations in window [{start}, {stop})")
    if any(h is None for h in hits):
        raise ValueError("window contains iterations without a selection branch")
    return float(np.mean(hits))
