"""Network definitions, the masked incremental head, and checkpoint files.

The classifier head is pre-allocated at the benchmark's full class count and
unseen classes are masked out of the logits, so parameter shapes stay identical
across stages. That keeps checkpoints directly comparable (parameter cosine
similarity needs stable names/shapes) and preserves class-incremental
semantics: a masked class can never win the argmax.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"CLTB\x00CKP"
CHECKPOINT_VERSION = 1
MASK_VALUE = -1e9

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR_MEAN, CIFAR_STD = (0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)


class InputShapeError(ValueError):
    """Batch shape incompatible with the model's input signature."""


class MaskConfigError(ValueError):
    """Masking requested with an empty seen-class set."""


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTensorError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# layers


class Normalize:
    """(x - mean) / std with per-channel constants inside the graph."""

    def __init__(self, mean, std, channel_axis: bool):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.channel_axis = channel_axis

    def __call__(self, x: Tensor) -> Tensor:
        if self.channel_axis:
            m = self.mean.reshape(1, -1, 1, 1)
            s = self.std.reshape(1, -1, 1, 1)
        else:
            m, s = self.mean, self.std
        m = m.astype(x.dtype)
        inv = (1.0 / s).astype(x.dtype)
        return ad.scale(ad.shift(x, -m), inv)

    def params(self):
        return {}


class Flatten:
    def __call__(self, x: Tensor) -> Tensor:
        return ad.flatten(x) if x.data.ndim > 2 else x

    def params(self):
        return {}


class ReLU:
    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(x)

    def params(self):
        return {}


class Linear:
    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        bound = np.sqrt(6.0 / in_dim)
        self.name = name
        self.weight = Tensor(rng.uniform(-bound, bound, (out_dim, in_dim)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.weight, self.bias)

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


class Conv2d:
    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        self.name = name
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)).astype(dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


class AvgPool2d:
    def __init__(self, k: int):
        self.k = k

    def __call__(self, x: Tensor) -> Tensor:
        return ad.avg_pool2d(x, self.k)

    def params(self):
        return {}


# ---------------------------------------------------------------------------
# network


class Network:
    """Layer stack whose final layer is the pre-allocated classifier head."""

    def __init__(self, arch_id: str, layers: list, input_shape: tuple[int, ...],
                 head_width: int):
        self.arch_id = arch_id
        self.layers = layers
        self.input_shape = input_shape
        self.head_width = head_width
        self.seen_classes: list[int] = list(range(head_width))
        self.loss_kind = "ce"  # 'bce' for the iCaRL-style sigmoid head
        self.strategy = ""

    def _check_input(self, x: np.ndarray):
        expected = int(np.prod(self.input_shape))
        if x.ndim < 2 or int(np.prod(x.shape[1:])) != expected:
            raise InputShapeError(
                f"batch shape {x.shape} incompatible with input signature "
                f"{self.input_shape}")

    def _as_tensor(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(t.data)
        return t

    def forward(self, x) -> Tensor:
        t = self._as_tensor(x)
        for layer in self.layers:
            t = layer(t)
        return t

    def features(self, x) -> Tensor:
        """Activations entering the head (penultimate representation)."""
        t = self._as_tensor(x)
        for layer in self.layers[:-1]:
            t = layer(t)
        return t

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        if set(params) != set(state):
            raise CheckpointTensorError(
                f"parameter names differ: {sorted(set(params) ^ set(state))}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise CheckpointTensorError(
                    f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = state[name].astype(p.data.dtype, copy=True)


def build_mlp(input_dim: int = 784, hidden: tuple[int, ...] = (400, 400),
              head_width: int = 10, seed: int = 0, dtype=np.float32,
              normalization: str | None = None) -> Network:
    """ReLU MLP with Kaiming-uniform weights and zero biases from one seed.

    Inputs are consumed in raw [0,1] pixel space by default (zero input maps
    to the head bias exactly); `normalization="mnist"` inserts the standard
    fixed mean/std transform inside the graph instead.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    layers: list = [Flatten()]
    if normalization == "mnist":
        layers.append(Normalize(MNIST_MEAN, MNIST_STD, channel_axis=False))
    elif normalization is not None:
        raise ValueError(f"unknown normalization preset {normalization!r}")
    dims = (input_dim,) + tuple(hidden)
    for i in range(len(hidden)):
        layers.append(Linear(f"fc{i + 1}", dims[i], dims[i + 1], rng, dtype))
        layers.append(ReLU())
    layers.append(Linear("head", dims[-1], head_width, rng, dtype))
    arch_id = "mlp-" + "x".join(str(d) for d in (input_dim, *hidden, head_width))
    if normalization == "mnist":
        arch_id += "-mnistnorm"
    side = int(round(np.sqrt(input_dim)))
    shape = (1, side, side) if side * side == input_dim else (input_dim,)
    return Network(arch_id, layers, shape, head_width)


def build_smallcnn(head_width: int = 100, seed: int = 0, dtype=np.float32) -> Network:
    """Plain conv/ReLU/pool stack for 3x32x32 inputs (no residuals, no BN)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    layers = [
        Normalize(CIFAR_MEAN, CIFAR_STD, channel_axis=True),
        Conv2d("conv1", 3, 32, 3, rng, padding=1, dtype=dtype), ReLU(),
        Conv2d("conv2", 32, 32, 3, rng, padding=1, dtype=dtype), ReLU(),
        AvgPool2d(2),
        Conv2d("conv3", 32, 64, 3, rng, padding=1, dtype=dtype), ReLU(),
        Conv2d("conv4", 64, 64, 3, rng, padding=1, dtype=dtype), ReLU(),
        AvgPool2d(2),
        Flatten(),
        Linear("fc1", 64 * 8 * 8, 256, rng, dtype), ReLU(),
        Linear("head", 256, head_width, rng, dtype),
    ]
    return Network(f"smallcnn-{head_width}", layers, (3, 32, 32), head_width)


def build_from_arch_id(arch_id: str, seed: int = 0, dtype=np.float32) -> Network:
    if arch_id.startswith("mlp-"):
        spec = arch_id[len("mlp-"):]
        norm = None
        if spec.endswith("-mnistnorm"):
            spec, norm = spec[:-len("-mnistnorm")], "mnist"
        try:
            dims = [int(d) for d in spec.split("x")]
        except ValueError:
            raise CheckpointError(f"malformed architecture id {arch_id!r}") from None
        if len(dims) < 2:
            raise CheckpointError(f"malformed architecture id {arch_id!r}")
        return build_mlp(dims[0], tuple(dims[1:-1]), dims[-1], seed, dtype, norm)
    if arch_id.startswith("smallcnn-"):
        return build_smallcnn(int(arch_id[len("smallcnn-"):]), seed, dtype)
    raise CheckpointError(f"unknown architecture id {arch_id!r}")


# ---------------------------------------------------------------------------
# logit masking


def mask_vector(seen_classes, head_width: int, dtype=np.float32) -> np.ndarray:
    """0 for seen classes, a large negative surrogate for the rest."""
    seen = list(seen_classes)
    if not seen:
        raise MaskConfigError("seen-class set is empty")
    if min(seen) < 0 or max(seen) >= head_width:
        raise MaskConfigError(f"seen classes {seen} outside head width {head_width}")
    mask = np.full(head_width, MASK_VALUE, dtype=dtype)
    mask[seen] = 0.0
    return mask


def apply_mask(logits: Tensor, seen_classes, head_width: int) -> Tensor:
    return ad.shift(logits, mask_vector(seen_classes, head_width, logits.dtype))


def masked_logits(model: Network, x, seen_classes) -> Tensor:
    """Forward pass with unseen-class logits pushed below any seen logit."""
    return apply_mask(model.forward(x), seen_classes, model.head_width)


def predict(model: Network, images: np.ndarray, seen_classes=None,
            batch_size: int = 512) -> np.ndarray:
    """Masked-argmax class ids, batched, without building gradient tape."""
    seen = model.seen_classes if seen_classes is None else seen_classes
    out = np.empty(images.shape[0], dtype=np.int64)
    with ad.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            chunk = images[lo:lo + batch_size]
            logits = masked_logits(model, chunk, seen)
            out[lo:lo + chunk.shape[0]] = logits.data.argmax(axis=1)
    return out


def features_of(model: Network, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    with ad.no_grad():
        parts = [model.features(images[lo:lo + batch_size]).data
                 for lo in range(0, images.shape[0], batch_size)]
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Named float32 parameter snapshot plus stage metadata."""

    arch_id: str
    stage: int
    seen_classes: tuple[int, ...]
    strategy: str
    seed: int
    params: dict[str, np.ndarray]
    aux: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def model(self, dtype=np.float32) -> Network:
        net = build_from_arch_id(self.arch_id, seed=0, dtype=dtype)
        net.load_state({k: v for k, v in self.params.items()})
        net.seen_classes = list(self.seen_classes)
        net.strategy = self.strategy
        net.loss_kind = "bce" if self.strategy == "icarl" else "ce"
        return net


def snapshot(model: Network, stage: int, seen_classes, strategy: str, seed: int,
             aux: dict[str, np.ndarray] | None = None) -> Checkpoint:
    return Checkpoint(
        arch_id=model.arch_id,
        stage=stage,
        seen_classes=tuple(int(c) for c in seen_classes),
        strategy=strategy,
        seed=seed,
        params={k: v.astype(np.float32, copy=True) for k, v in model.state().items()},
        aux={k: v.astype(np.float32, copy=True) for k, v in (aux or {}).items()},
    )


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "arch": ckpt.arch_id,
        "seed": str(ckpt.seed),
        "seen": ",".join(str(c) for c in ckpt.seen_classes),
        "stage": str(ckpt.stage),
        "strategy": ckpt.strategy,
    }
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version),
             struct.pack("<I", len(meta))]
    for key in sorted(meta):
        parts.append(_pack_str(key))
        parts.append(_pack_str(meta[key]))
    tensors = dict(ckpt.params)
    tensors.update({f"aux.{k}": v for k, v in ckpt.aux.items()})
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path: str):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTensorError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw, path)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad checkpoint magic")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    meta = {}
    for _ in range(r.u32()):
        key = r.string()
        meta[key] = r.string()
    params: dict[str, np.ndarray] = {}
    aux: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).copy()
        if name.startswith("aux."):
            aux[name[4:]] = arr
        else:
            params[name] = arr
    if r.pos != len(raw):
        raise CheckpointTensorError(f"{path}: {len(raw) - r.pos} trailing bytes")
    try:
        seen = tuple(int(c) for c in meta["seen"].split(",") if c != "")
        return Checkpoint(
            arch_id=meta["arch"], stage=int(meta["stage"]), seen_classes=seen,
            strategy=meta["strategy"], seed=int(meta["seed"]),
            params=params, aux=aux, version=version)
    except KeyError as e:
        raise CheckpointError(f"{path}: missing metadata key {e}") from None
