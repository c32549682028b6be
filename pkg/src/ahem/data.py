"""Multi-domain identity datasets.

On disk a corpus is ``root/<domain>/<identity>/<image>.ppm``.  Domains,
identities and images are always enumerated in lexicographic order so that
every derived structure is independent of filesystem enumeration order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imaging

__all__ = [
    "DatasetError",
    "IdentityRecord",
    "DomainDataset",
    "LabelSpace",
    "MiniBatch",
    "SyntheticSpec",
    "ImageStore",
    "EpochSampler",
    "load_dataset",
    "union_label_space",
    "image_of_identity",
    "generate_synthetic",
]

DEFAULT_HEIGHT = 64
DEFAULT_WIDTH = 32


class DatasetError(Exception):
    """Raised for malformed dataset trees; the message names the path."""


@dataclass(frozen=True)
class IdentityRecord:
    label: str
    images: tuple[Path, ...]


@dataclass(frozen=True)
class DomainDataset:
    name: str
    identities: tuple[IdentityRecord, ...]

    @property
    def num_images(self) -> int:
        return sum(len(rec.images) for rec in self.identities)


@dataclass(frozen=True)
class LabelSpace:
    """Union of per-domain identity label sets.

    Global class c of local identity l in domain d is offset(d) + l where
    offsets are cumulative domain sizes; the mapping is a bijection onto
    [0, N).
    """

    per_domain_sizes: tuple[int, ...]

    @property
    def K(self) -> int:
        return len(self.per_domain_sizes)

    @property
    def N(self) -> int:
        return sum(self.per_domain_sizes)

    @property
    def offsets(self) -> tuple[int, ...]:
        out = []
        total = 0
        for size in self.per_domain_sizes:
            out.append(total)
            total += size
        return tuple(out)

    def global_class(self, domain_index: int, local_label: int) -> int:
        if not 0 <= local_label < self.per_domain_sizes[domain_index]:
            raise ValueError(
                f"local label {local_label} outside domain {domain_index} "
                f"(size {self.per_domain_sizes[domain_index]})"
            )
        return self.offsets[domain_index] + local_label

    def locate(self, global_class: int) -> tuple[int, int]:
        if not 0 <= global_class < self.N:
            raise ValueError(f"global class {global_class} outside [0, {self.N})")
        for d, (off, size) in enumerate(zip(self.offsets, self.per_domain_sizes)):
            if global_class < off + size:
                return d, global_class - off
        raise AssertionError("unreachable")


@dataclass
class MiniBatch:
    images: np.ndarray  # (n, H, W, 3) float32
    labels: np.ndarray  # (n,) int64 global classes


def load_dataset(root_path) -> list[DomainDataset]:
    """Load every domain under ``root_path``, sorted lexicographically."""
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    domains = []
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not domain_dirs:
        raise DatasetError(f"dataset root has no domain directories: {root}")
    for domain_dir in domain_dirs:
        identities = []
        for ident_dir in sorted(p for p in domain_dir.iterdir() if p.is_dir()):
            images = tuple(sorted(ident_dir.glob("*.ppm")))
            if not images:
                raise DatasetError(f"identity has no images: {ident_dir}")
            identities.append(IdentityRecord(ident_dir.name, images))
        if not identities:
            raise DatasetError(f"domain has no identities: {domain_dir}")
        domains.append(DomainDataset(domain_dir.name, tuple(identities)))
    return domains


def union_label_space(datasets: list[DomainDataset]) -> LabelSpace:
    if not datasets:
        raise ValueError("need at least one dataset")
    return LabelSpace(tuple(len(ds.identities) for ds in datasets))


class ImageStore:
    """Loads, resizes and caches dataset images at one canonical size."""

    def __init__(self, height: int = DEFAULT_HEIGHT, width: int = DEFAULT_WIDTH):
        self.height = height
        self.width = width
        self._cache: dict[Path, np.ndarray] = {}

    def get(self, path: Path) -> np.ndarray:
        cached = self._cache.get(path)
        if cached is None:
            try:
                img = imaging.read_ppm(path)
            except (OSError, ValueError) as exc:
                raise DatasetError(f"unreadable image: {path}: {exc}") from exc
            cached = imaging.resize_bilinear(img, self.height, self.width)
            self._cache[path] = cached
        return cached


def image_of_identity(datasets: list[DomainDataset], global_class: int,
                      rng: np.random.Generator, store: ImageStore) -> np.ndarray:
    """Uniform draw over one identity's images at the canonical size."""
    space = union_label_space(datasets)
    domain_index, local = space.locate(global_class)
    record = datasets[domain_index].identities[local]
    pick = int(rng.integers(len(record.images)))
    return store.get(record.images[pick])


class EpochSampler:
    """Without-replacement mini-batches over epoch-shuffled training images."""

    def __init__(self, datasets: list[DomainDataset], label_space: LabelSpace,
                 store: ImageStore):
        self.store = store
        self.entries: list[tuple[Path, int]] = []
        for d, ds in enumerate(datasets):
            for local, rec in enumerate(ds.identities):
                cls = label_space.global_class(d, local)
                for path in rec.images:
                    self.entries.append((path, cls))
        if not self.entries:
            raise DatasetError("no training images")
        self._order: list[int] = []
        self._cursor = 0

    @property
    def num_images(self) -> int:
        return len(self.entries)

    def batches_per_epoch(self, n_bs: int) -> int:
        return -(-len(self.entries) // n_bs)

    def sample_minibatch(self, n_bs: int, rng: np.random.Generator) -> MiniBatch:
        """Next batch of the current epoch permutation; reshuffles at epoch end."""
        if self._cursor >= len(self._order):
            self._order = list(rng.permutation(len(self.entries)))
            self._cursor = 0
        take = self._order[self._cursor:self._cursor + n_bs]
        self._cursor += len(take)
        images = np.stack([self.store.get(self.entries[i][0]) for i in take])
        labels = np.array([self.entries[i][1] for i in take], dtype=np.int64)
        return MiniBatch(images, labels)

    def epoch_batches(self, n_bs: int, rng: np.random.Generator):
        """Yield batches covering exactly one shuffled epoch."""
        self._order = list(rng.permutation(len(self.entries)))
        self._cursor = 0
        for _ in range(self.batches_per_epoch(n_bs)):
            yield self.sample_minibatch(n_bs, rng)


# ---------------------------------------------------------------------------
# synthetic corpus generator


@dataclass(frozen=True)
class SyntheticSpec:
    domains: int
    identities_per_domain: int
    images_per_identity: int
    height: int = DEFAULT_HEIGHT
    width: int = DEFAULT_WIDTH
    seed: int = 0

    def __post_init__(self):
        for name in ("domains", "identities_per_domain", "images_per_identity",
                     "height", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


_SPEC_FIELDS = ("domains", "identities_per_domain", "images_per_identity",
                "height", "width", "seed")


def parse_synthetic_spec(text: str) -> SyntheticSpec:
    """Parse key=value lines into a SyntheticSpec; a seed is mandatory."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        if key not in _SPEC_FIELDS:
            raise ValueError(f"line {lineno}: unknown spec key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate spec key {key!r}")
        values[key] = int(value.strip())
    if "seed" not in values:
        raise ValueError("synthetic spec must set a seed")
    return SyntheticSpec(**values)


def _domain_style(seed: int, d: int) -> dict:
    rng = np.random.default_rng([seed, 7, d])
    return {
        # channelwise multiplicative tint plus global brightness: a crude
        # stand-in for camera color balance and exposure
        "tint": rng.uniform(0.55, 1.25, size=3),
        "brightness": float(rng.uniform(0.65, 1.2)),
        "noise_sigma": float(rng.uniform(0.01, 0.05)),
        "background": rng.uniform(0.25, 0.75, size=3),
    }


def _identity_attrs(seed: int, d: int, ident: int) -> dict:
    rng = np.random.default_rng([seed, 11, d, ident])
    return {
        "torso_color": rng.uniform(0.08, 0.95, size=3),
        "leg_color": rng.uniform(0.08, 0.95, size=3),
        "torso_width": float(rng.uniform(0.34, 0.58)),
        "torso_top": float(rng.uniform(0.18, 0.26)),
        "torso_bottom": float(rng.uniform(0.5, 0.6)),
        "head_radius": float(rng.uniform(0.05, 0.085)),
    }


def _render_person(spec: SyntheticSpec, style: dict, attrs: dict,
                   rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    img = np.tile(style["background"].astype(np.float32), (h, w, 1))

    # per-image pose jitter
    dx = rng.uniform(-0.08, 0.08) * w
    dy = rng.uniform(-0.04, 0.04) * h
    width_scale = rng.uniform(0.88, 1.12)

    cx = w / 2.0 + dx
    torso_half = attrs["torso_width"] * w * width_scale / 2.0
    torso_top = attrs["torso_top"] * h + dy
    torso_bot = attrs["torso_bottom"] * h + dy
    leg_bot = 0.95 * h + dy

    ys = np.arange(h, dtype=np.float32)[:, None]
    xs = np.arange(w, dtype=np.float32)[None, :]

    head_r = attrs["head_radius"] * h
    head_cy = torso_top - head_r - 0.02 * h
    head = (ys - head_cy) ** 2 + (xs - cx) ** 2 <= head_r ** 2
    img[head] = np.array([0.85, 0.72, 0.6], dtype=np.float32)

    torso = (ys >= torso_top) & (ys < torso_bot) & (np.abs(xs - cx) <= torso_half)
    img[torso] = attrs["torso_color"].astype(np.float32)

    leg_half = torso_half * 0.42
    gap = torso_half * 0.18
    legs = (ys >= torso_bot) & (ys < leg_bot) & (
        (np.abs(xs - (cx - gap - leg_half)) <= leg_half)
        | (np.abs(xs - (cx + gap + leg_half)) <= leg_half)
    )
    img[legs] = attrs["leg_color"].astype(np.float32)

    # camera style: tint, exposure, sensor noise
    img = img * style["tint"].astype(np.float32) * np.float32(style["brightness"])
    img += rng.normal(0.0, style["noise_sigma"], size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, out_path) -> Path:
    """Write a synthetic multi-domain PPM tree plus a manifest.

    Identity appearance (torso and leg colors, proportions) persists across
    a given identity's images; each domain applies its own tint, exposure
    and noise so domains differ in style while identity stays recoverable.
    Byte-identical for identical specs.
    """
    root = Path(out_path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create output directory {root}: {exc}") from exc
    manifest_lines = []
    for d in range(spec.domains):
        style = _domain_style(spec.seed, d)
        domain_name = f"domain{d:02d}"
        for ident in range(spec.identities_per_domain):
            attrs = _identity_attrs(spec.seed, d, ident)
            ident_dir = root / domain_name / f"id{ident:04d}"
            ident_dir.mkdir(parents=True, exist_ok=True)
            for j in range(spec.images_per_identity):
                rng = np.random.default_rng([spec.seed, 13, d, ident, j])
                img = _render_person(spec, style, attrs, rng)
                imaging.write_ppm(ident_dir / f"img{j:04d}.ppm", img)
        manifest_lines.append(
            f"{domain_name} {spec.identities_per_domain} "
            f"{spec.identities_per_domain * spec.images_per_identity}"
        )
    (root / "manifest.txt").write_text("\n".join(manifest_lines) + "\n")
    return root
