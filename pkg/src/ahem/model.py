"""Reference feature extractor, classifier and training numerics.

Everything is plain numpy on NHWC float32 arrays.  Layers expose
``forward(x, train, rng) -> (y, cache)`` and ``backward(cache, dy) -> dx``
with gradients accumulated into per-parameter buffers, so two forward
passes through shared parameters can be backpropagated independently
within one iteration.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Param",
    "LayerSpec",
    "ArchSpec",
    "ReidModel",
    "reference_arch",
    "mobilenet_v2_arch",
    "ce_label_smoothing",
    "ce_label_smoothing_grad",
    "l2_normalize",
    "count_madds",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = "ahem-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Param:
    """One parameter block with its gradient and momentum buffers."""

    name: str
    value: np.ndarray
    grad: np.ndarray
    velocity: np.ndarray

    @classmethod
    def create(cls, name: str, value: np.ndarray) -> "Param":
        value = value.astype(np.float32)
        return cls(name, value, np.zeros_like(value), np.zeros_like(value))


# ---------------------------------------------------------------------------
# architecture description


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | dwconv | fc | relu | gap
    in_ch: int = 0
    out_ch: int = 0
    kh: int = 0
    kw: int = 0
    stride: int = 1
    pad: int = 0

    def to_line(self) -> str:
        if self.kind == "conv":
            return f"conv {self.in_ch} {self.out_ch} {self.kh} {self.kw} {self.stride} {self.pad}"
        if self.kind == "dwconv":
            return f"dwconv {self.in_ch} {self.kh} {self.kw} {self.stride} {self.pad}"
        if self.kind == "fc":
            return f"fc {self.in_ch} {self.out_ch}"
        return self.kind

    @classmethod
    def from_line(cls, line: str) -> "LayerSpec":
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "conv":
                i, o, kh, kw, s, p = map(int, parts[1:7])
                return cls("conv", i, o, kh, kw, s, p)
            if kind == "dwconv":
                c, kh, kw, s, p = map(int, parts[1:6])
                return cls("dwconv", c, c, kh, kw, s, p)
            if kind == "fc":
                i, o = map(int, parts[1:3])
                return cls("fc", i, o)
            if kind in ("relu", "gap"):
                return cls(kind)
        except (ValueError, IndexError) as exc:
            raise ValueError(f"malformed layer line: {line!r}") from exc
        raise ValueError(f"unknown layer kind: {line!r}")


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[LayerSpec, ...]

    def to_lines(self) -> list[str]:
        return [spec.to_line() for spec in self.layers]

    @classmethod
    def from_lines(cls, lines) -> "ArchSpec":
        return cls(tuple(LayerSpec.from_line(ln) for ln in lines if ln.strip()))


def reference_arch(in_channels: int = 3, embedding_dim: int = 64) -> ArchSpec:
    """Three strided 3x3 conv blocks, global pool, embedding FC."""
    return ArchSpec((
        LayerSpec("conv", in_channels, 8, 3, 3, 2, 1),
        LayerSpec("relu"),
        LayerSpec("conv", 8, 16, 3, 3, 2, 1),
        LayerSpec("relu"),
        LayerSpec("conv", 16, 32, 3, 3, 2, 1),
        LayerSpec("relu"),
        LayerSpec("gap"),
        LayerSpec("fc", 32, embedding_dim),
    ))


def _make_divisible(v: float, divisor: int = 8) -> int:
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


def mobilenet_v2_arch(width: float = 1.0) -> ArchSpec:
    """MobileNetV2 backbone as a counting substrate (no training support
    intended; normalization layers are omitted from the descriptor)."""
    block_cfg = [
        # expansion, channels, repeats, first stride
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ]
    layers = [LayerSpec("conv", 3, _make_divisible(32 * width), 3, 3, 2, 1),
              LayerSpec("relu")]
    in_ch = _make_divisible(32 * width)
    for t, c, n, s in block_cfg:
        out_ch = _make_divisible(c * width)
        for i in range(n):
            stride = s if i == 0 else 1
            hidden = in_ch * t
            if t != 1:
                layers += [LayerSpec("conv", in_ch, hidden, 1, 1, 1, 0),
                           LayerSpec("relu")]
            layers += [
                LayerSpec("dwconv", hidden, hidden, 3, 3, stride, 1),
                LayerSpec("relu"),
                LayerSpec("conv", hidden, out_ch, 1, 1, 1, 0),
            ]
            in_ch = out_ch
    last = _make_divisible(1280 * width) if width > 1.0 else 1280
    layers += [LayerSpec("conv", in_ch, last, 1, 1, 1, 0),
               LayerSpec("relu"),
               LayerSpec("gap")]
    return ArchSpec(tuple(layers))


def count_madds(arch: ArchSpec, in_h: int, in_w: int, in_ch: int = 3) -> int:
    """Multiply-add count: conv = oh*ow*out*in*kh*kw, depthwise =
    oh*ow*ch*kh*kw, fc = in*out; pooling and activations count zero."""
    h, w, c = in_h, in_w, in_ch
    total = 0
    for spec in arch.layers:
        if spec.kind in ("conv", "dwconv"):
            if spec.in_ch != c:
                raise ValueError(
                    f"{spec.to_line()}: expects {spec.in_ch} channels, has {c}")
            oh = (h + 2 * spec.pad - spec.kh) // spec.stride + 1
            ow = (w + 2 * spec.pad - spec.kw) // spec.stride + 1
            if oh < 1 or ow < 1:
                raise ValueError(f"{spec.to_line()}: empty output for {h}x{w} input")
            if spec.kind == "conv":
                total += oh * ow * spec.out_ch * spec.in_ch * spec.kh * spec.kw
            else:
                total += oh * ow * spec.in_ch * spec.kh * spec.kw
            h, w, c = oh, ow, spec.out_ch
        elif spec.kind == "fc":
            flat = h * w * c
            if spec.in_ch != flat:
                raise ValueError(
                    f"{spec.to_line()}: expects {spec.in_ch} features, has {flat}")
            total += spec.in_ch * spec.out_ch
            h, w, c = 1, 1, spec.out_ch
        elif spec.kind == "gap":
            h, w = 1, 1
        elif spec.kind != "relu":
            raise ValueError(f"unknown layer kind {spec.kind}")
    return total


# ---------------------------------------------------------------------------
# layers


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _patches(xp: np.ndarray, kh: int, kw: int, stride: int):
    """View of all kh x kw patches of a padded NHWC tensor."""
    n, h, w, c = xp.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return view, oh, ow


class Conv2d:
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, name: str):
        fan_in = spec.kh * spec.kw * spec.in_ch
        self.spec = spec
        self.w = Param.create(f"{name}.w",
                              _uniform_init(rng, (spec.kh, spec.kw, spec.in_ch, spec.out_ch), fan_in))
        self.b = Param.create(f"{name}.b", np.zeros(spec.out_ch, dtype=np.float32))

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=False, rng=None):
        s = self.spec
        if x.shape[3] != s.in_ch:
            raise ValueError(f"conv expects {s.in_ch} input channels, got {x.shape[3]}")
        xp = np.pad(x, ((0, 0), (s.pad, s.pad), (s.pad, s.pad), (0, 0)))
        view, oh, ow = _patches(xp, s.kh, s.kw, s.stride)
        cols = view.reshape(x.shape[0] * oh * ow, s.kh * s.kw * s.in_ch)
        y = cols @ self.w.value.reshape(-1, s.out_ch).astype(cols.dtype)
        y += self.b.value.astype(cols.dtype)
        y = y.reshape(x.shape[0], oh, ow, s.out_ch)
        return y, (cols, xp.shape, x.shape, oh, ow)

    def backward(self, cache, dy, need_dx=True):
        cols, xp_shape, x_shape, oh, ow = cache
        s = self.spec
        dy_mat = dy.reshape(-1, s.out_ch)
        self.w.grad += (cols.T @ dy_mat).reshape(self.w.value.shape).astype(np.float32)
        self.b.grad += dy_mat.sum(axis=0).astype(np.float32)
        if not need_dx:
            return None
        dcols = dy_mat @ self.w.value.reshape(-1, s.out_ch).T.astype(dy_mat.dtype)
        dcols = dcols.reshape(x_shape[0], oh, ow, s.kh, s.kw, s.in_ch)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for a in range(s.kh):
            for b in range(s.kw):
                dxp[:, a:a + oh * s.stride:s.stride,
                    b:b + ow * s.stride:s.stride, :] += dcols[:, :, :, a, b, :]
        h, w = x_shape[1], x_shape[2]
        return dxp[:, s.pad:s.pad + h, s.pad:s.pad + w, :]


class DepthwiseConv2d:
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, name: str):
        fan_in = spec.kh * spec.kw
        self.spec = spec
        self.w = Param.create(f"{name}.w",
                              _uniform_init(rng, (spec.kh, spec.kw, spec.in_ch), fan_in))
        self.b = Param.create(f"{name}.b", np.zeros(spec.in_ch, dtype=np.float32))

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=False, rng=None):
        s = self.spec
        if x.shape[3] != s.in_ch:
            raise ValueError(f"dwconv expects {s.in_ch} channels, got {x.shape[3]}")
        xp = np.pad(x, ((0, 0), (s.pad, s.pad), (s.pad, s.pad), (0, 0)))
        view, oh, ow = _patches(xp, s.kh, s.kw, s.stride)
        y = np.einsum("nijabc,abc->nijc", view, self.w.value.astype(x.dtype))
        y += self.b.value.astype(x.dtype)
        return y, (np.ascontiguousarray(view), xp.shape, x.shape, oh, ow)

    def backward(self, cache, dy, need_dx=True):
        view, xp_shape, x_shape, oh, ow = cache
        s = self.spec
        self.w.grad += np.einsum("nijabc,nijc->abc", view, dy).astype(np.float32)
        self.b.grad += dy.sum(axis=(0, 1, 2)).astype(np.float32)
        if not need_dx:
            return None
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        wv = self.w.value.astype(dy.dtype)
        for a in range(s.kh):
            for b in range(s.kw):
                dxp[:, a:a + oh * s.stride:s.stride,
                    b:b + ow * s.stride:s.stride, :] += dy * wv[a, b]
        h, w = x_shape[1], x_shape[2]
        return dxp[:, s.pad:s.pad + h, s.pad:s.pad + w, :]


class Dense:
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, name: str):
        self.spec = spec
        self.w = Param.create(f"{name}.w",
                              _uniform_init(rng, (spec.in_ch, spec.out_ch), spec.in_ch))
        self.b = Param.create(f"{name}.b", np.zeros(spec.out_ch, dtype=np.float32))

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=False, rng=None):
        if x.shape[1] != self.spec.in_ch:
            raise ValueError(f"fc expects width {self.spec.in_ch}, got {x.shape[1]}")
        y = x @ self.w.value.astype(x.dtype) + self.b.value.astype(x.dtype)
        return y, x

    def backward(self, cache, dy, need_dx=True):
        x = cache
        self.w.grad += (x.T @ dy).astype(np.float32)
        self.b.grad += dy.sum(axis=0).astype(np.float32)
        if not need_dx:
            return None
        return dy @ self.w.value.T.astype(dy.dtype)


class ReLU:
    def params(self):
        return []

    def forward(self, x, train=False, rng=None):
        return np.maximum(x, 0), x > 0

    def backward(self, cache, dy, need_dx=True):
        return dy * cache


class GlobalAvgPool:
    def params(self):
        return []

    def forward(self, x, train=False, rng=None):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, cache, dy, need_dx=True):
        n, h, w, c = cache
        return np.broadcast_to(dy[:, None, None, :] / (h * w), cache).astype(dy.dtype)


class Dropout:
    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def params(self):
        return []

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= self.rate)
        scale = 1.0 / (1.0 - self.rate)
        mask = keep.astype(x.dtype) * x.dtype.type(scale)
        return x * mask, mask

    def backward(self, cache, dy, need_dx=True):
        if cache is None:
            return dy
        return dy * cache


_LAYER_TYPES = {
    "conv": Conv2d,
    "dwconv": DepthwiseConv2d,
    "fc": Dense,
}


# ---------------------------------------------------------------------------
# the model


class ReidModel:
    """Feature extractor plus identity classifier over shared parameters.

    The same instance serves the input-batch pass and the hard-example
    pass; ``version`` counts optimizer steps and ``forward_log`` records
    (version, batch size, train flag) per feature forward for tests.
    """

    def __init__(self, arch: ArchSpec, num_classes: int, *,
                 dropout: float = 0.5, input_size=(64, 32), seed: int = 0,
                 rng: np.random.Generator | None = None):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if arch.layers[-1].kind != "fc":
            raise ValueError("architecture must end in an embedding fc layer")
        if rng is None:
            rng = np.random.default_rng(seed)
        self.arch = arch
        self.num_classes = num_classes
        self.embedding_dim = arch.layers[-1].out_ch
        self.dropout_rate = dropout
        self.input_size = tuple(input_size)
        self.seed = seed
        self.layers = []
        for i, spec in enumerate(arch.layers):
            if spec.kind == "relu":
                self.layers.append(ReLU())
            elif spec.kind == "gap":
                self.layers.append(GlobalAvgPool())
            else:
                self.layers.append(_LAYER_TYPES[spec.kind](spec, rng, f"layer{i}"))
        self.dropout = Dropout(dropout)
        self.classifier = Dense(
            LayerSpec("fc", self.embedding_dim, num_classes), rng, "classifier")
        self.version = 0
        self.forward_log: list[tuple[int, int, bool]] = []

    # -- parameters ---------------------------------------------------------

    def params(self) -> list[Param]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        out.extend(self.classifier.params())
        return out

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0

    def sgd_step(self, lr: float, momentum: float, weight_decay: float):
        """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""
        for p in self.params():
            np.multiply(p.velocity, np.float32(momentum), out=p.velocity)
            p.velocity += p.grad
            p.velocity += np.float32(weight_decay) * p.value
            p.value -= np.float32(lr) * p.velocity
        self.version += 1

    # -- forward / backward -------------------------------------------------

    def forward_features(self, images: np.ndarray, train_mode: bool = False,
                         rng: np.random.Generator | None = None):
        """Run the extractor; returns (embedding, cache) with dropout applied
        to the embedding in train mode."""
        if images.ndim != 4 or images.shape[3] != self.arch.layers[0].in_ch:
            raise ValueError(f"expected NHWC images, got shape {images.shape}")
        if train_mode and self.dropout_rate > 0 and rng is None:
            raise ValueError("train-mode forward needs an rng for dropout")
        self.forward_log.append((self.version, images.shape[0], train_mode))
        x = images
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train_mode, rng)
            caches.append(cache)
        emb, drop_cache = self.dropout.forward(x, train_mode, rng)
        return emb, (caches, drop_cache, emb)

    def classify(self, embedding: np.ndarray) -> np.ndarray:
        logits, _ = self.classifier.forward(embedding)
        return logits

    def backward(self, cache, dlogits: np.ndarray, need_input_grad: bool = False):
        """Backpropagate through classifier and extractor, accumulating
        gradients; cache must come from the matching forward_features call."""
        caches, drop_cache, emb = cache
        demb = self.classifier.backward(emb, dlogits)
        demb = self.dropout.backward(drop_cache, demb)
        dx = demb
        for i, (layer, layer_cache) in enumerate(
                zip(reversed(self.layers), reversed(caches))):
            last = i == len(self.layers) - 1
            dx = layer.backward(layer_cache, dx,
                                need_dx=need_input_grad or not last)
        return dx

    def extract_features(self, images: np.ndarray) -> np.ndarray:
        """Eval-mode embeddings (no dropout, no caching side effects kept)."""
        emb, _ = self.forward_features(images, train_mode=False)
        return emb


# ---------------------------------------------------------------------------
# losses and normalization


def _smoothed_targets(labels: np.ndarray, eps: float, n_classes: int) -> np.ndarray:
    t = np.full((labels.shape[0], n_classes), eps / n_classes, dtype=np.float64)
    t[np.arange(labels.shape[0]), labels] += 1.0 - eps
    return t


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def ce_label_smoothing(logits: np.ndarray, labels: np.ndarray, eps: float,
                       n_classes: int) -> float:
    loss, _ = ce_label_smoothing_grad(logits, labels, eps, n_classes)
    return loss


def ce_label_smoothing_grad(logits: np.ndarray, labels: np.ndarray, eps: float,
                            n_classes: int):
    """Mean label-smoothed cross entropy and its gradient w.r.t. logits."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[1] != n_classes:
        raise ValueError(f"logits width {logits.shape[1]} != n_classes {n_classes}")
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing value must lie in [0, 1), got {eps}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("labels outside [0, N)")
    logp = _log_softmax(logits)
    t = _smoothed_targets(labels, eps, n_classes)
    loss = float(-(t * logp).sum(axis=1).mean())
    dlogits = ((np.exp(logp) - t) / logits.shape[0]).astype(np.float32)
    return loss, dlogits


def l2_normalize(embeddings: np.ndarray):
    """Row-normalize to unit L2 norm; zero rows pass through and are flagged."""
    arr = np.atleast_2d(embeddings)
    norms = np.sqrt((arr.astype(np.float64) ** 2).sum(axis=1))
    zero_rows = norms == 0.0
    divisor = np.where(zero_rows, 1.0, norms)
    out = (arr / divisor[:, None]).astype(np.float32)
    return out, zero_rows


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ReidModel, path) -> None:
    """Text header plus little-endian float32 blocks in declaration order."""
    buf = io.BytesIO()
    header = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"seed {model.seed}",
        f"num_classes {model.num_classes}",
        f"embedding_dim {model.embedding_dim}",
        f"dropout {model.dropout_rate!r}",
        f"input_size {model.input_size[0]} {model.input_size[1]}",
        f"arch {len(model.arch.layers)}",
    ]
    header.extend(model.arch.to_lines())
    params = model.params()
    header.append(f"blocks {len(params)}")
    for p in params:
        header.append(f"{p.name} " + " ".join(str(d) for d in p.value.shape))
    header.append("end")
    buf.write(("\n".join(header) + "\n").encode("ascii"))
    for p in params:
        buf.write(p.value.astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> ReidModel:
    data = Path(path).read_bytes()
    head_end = data.index(b"end\n") + len(b"end\n")
    lines = data[:head_end].decode("ascii").splitlines()
    magic, version = lines[0].rsplit(" ", 1)
    if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a recognized checkpoint (header {lines[0]!r})")
    fields = {}
    idx = 1
    for key in ("seed", "num_classes", "embedding_dim", "dropout", "input_size"):
        name, _, value = lines[idx].partition(" ")
        if name != key:
            raise ValueError(f"{path}: expected header field {key}, got {name}")
        fields[key] = value
        idx += 1
    n_layers = int(lines[idx].split()[1])
    idx += 1
    arch = ArchSpec.from_lines(lines[idx:idx + n_layers])
    idx += n_layers
    n_blocks = int(lines[idx].split()[1])
    idx += 1
    shapes = []
    for line in lines[idx:idx + n_blocks]:
        name, *dims = line.split()
        shapes.append((name, tuple(int(d) for d in dims)))

    ih, iw = (int(v) for v in fields["input_size"].split())
    model = ReidModel(
        arch,
        int(fields["num_classes"]),
        dropout=float(fields["dropout"]),
        input_size=(ih, iw),
        seed=int(fields["seed"]),
    )
    params = model.params()
    if len(params) != n_blocks:
        raise ValueError(f"{path}: block count mismatch")
    offset = head_end
    for p, (name, shape) in zip(params, shapes):
        if p.name != name or p.value.shape != shape:
            raise ValueError(f"{path}: block {name} {shape} does not match architecture")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        raw = data[offset:offset + nbytes]
        if len(raw) != nbytes:
            raise ValueError(f"{path}: truncated parameter block {name}")
        p.value[...] = np.frombuffer(raw, dtype="<f4").reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter blocks")
    return model
