"""Restoration networks, the fixed feature encoder, Adam, and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeMismatchError, Tensor, conv2d


class CheckpointError(Exception):
    pass


class CorruptMagicError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class MissingGradientError(Exception):
    pass


@dataclass
class ParamEntry:
    name: str
    tensor: Tensor
    trainable: bool = True


class ModelParams:
    """Named, ordered collection of parameter tensors with a trainable mask."""

    def __init__(self):
        self.entries: list[ParamEntry] = []
        self._by_name: dict[str, ParamEntry] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._by_name:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=trainable)
        e = ParamEntry(name, t, trainable)
        self.entries.append(e)
        self._by_name[name] = e
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> Tensor:
        return self._by_name[name].tensor

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def trainable_entries(self) -> list[ParamEntry]:
        return [e for e in self.entries if e.trainable]

    def set_trainable(self, name: str, flag: bool) -> None:
        e = self._by_name[name]
        e.trainable = flag
        e.tensor.requires_grad = flag

    def freeze_all_but(self, prefix: str) -> None:
        for e in self.entries:
            self.set_trainable(e.name, e.name.startswith(prefix))

    def zero_grads(self) -> None:
        for e in self.entries:
            e.tensor.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for e in self.trainable_entries():
            if e.tensor.grad is not None:
                out[e.name] = e.tensor.grad
        return out

    def copy(self) -> "ModelParams":
        c = ModelParams()
        for e in self.entries:
            c.add(e.name, e.tensor.data.copy(), e.trainable)
        return c


# -- initialization ----------------------------------------------------------


def _he_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# Output heads start at a tenth of He scale so an untrained net emits a
# near-zero prediction instead of an image-scale function of its input.
HEAD_INIT_GAIN = 0.1


def _add_conv(params: ModelParams, rng, name: str, in_c: int, out_c: int,
              k: int = 3, trainable: bool = True):
    params.add(f"{name}.w", _he_uniform(rng, (k, k, in_c, out_c)), trainable)
    params.add(f"{name}.b", np.zeros(out_c), trainable)


def _conv(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return conv2d(x, params[f"{name}.w"], params[f"{name}.b"])


# -- restoration networks ----------------------------------------------------

HEAD_PREFIX = "head"


class RestorerNet:
    """Base for the small restoration backbones.

    ``forward`` returns the raw network output; ``reconstruction`` returns
    the restored image (for the residual-predicting variant these differ).
    The final layer is named ``head.*`` so the proxy protocol can freeze
    everything else or swap it for a task head.
    """

    arch = ""
    # Global input->output skip (restoration nets start near identity).
    # The residual-predicting variant encodes the skip in its
    # reconstruction instead.
    global_skip = False

    def __init__(self, in_channels=3, out_channels=3, head="identity", seed=0,
                 params: ModelParams | None = None):
        if head not in ("identity", "upsample-2x"):
            raise ValueError(f"unknown head {head!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.head = head
        self.forward_count = 0
        if params is None:
            params = ModelParams()
            self._build(params, np.random.default_rng(seed))
        self.params = params

    def _build(self, params: ModelParams, rng) -> None:
        raise NotImplementedError

    def _body(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[3] != self.in_channels:
            raise ShapeMismatchError(
                f"expected NHWC input with {self.in_channels} channels, "
                f"got shape {x.shape}"
            )
        if x.data.shape[1] % 4 or x.data.shape[2] % 4:
            raise ShapeMismatchError(
                f"spatial dims must be divisible by 4, got {x.shape}"
            )
        # One forward pass per image in the batch.
        self.forward_count += x.data.shape[0]
        feat = self._body(x)
        if self.head == "upsample-2x":
            feat = feat.upsample2x()
        out = _conv(self.params, HEAD_PREFIX, feat)
        if self.global_skip and out.data.shape == x.data.shape:
            out = out + x
        return out

    def reconstruction(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def replace_head(self, out_channels: int, head: str, seed: int) -> None:
        """Swap in a freshly initialized task head (1x1 or 3x3 post-upsample)."""
        if head not in ("identity", "upsample-2x"):
            raise ValueError(f"unknown head {head!r}")
        rng = np.random.default_rng(seed)
        k = 1 if (self.arch == "unet-small" and head == "identity") else 3
        w = HEAD_INIT_GAIN * _he_uniform(
            rng, (k, k, self._head_in_channels, out_channels))
        old_w = self.params[f"{HEAD_PREFIX}.w"]
        old_b = self.params[f"{HEAD_PREFIX}.b"]
        old_w.data = w
        old_b.data = np.zeros(out_channels)
        self.head = head
        self.out_channels = out_channels


class UNetSmall(RestorerNet):
    """Two-level U-Net (widths 16/32, bottleneck 64) with skip concatenation."""

    arch = "unet-small"
    global_skip = True
    _head_in_channels = 16

    def _build(self, params, rng):
        _add_conv(params, rng, "enc1a", self.in_channels, 16)
        _add_conv(params, rng, "enc1b", 16, 16)
        _add_conv(params, rng, "enc2a", 16, 32)
        _add_conv(params, rng, "enc2b", 32, 32)
        _add_conv(params, rng, "mida", 32, 64)
        _add_conv(params, rng, "midb", 64, 64)
        _add_conv(params, rng, "dec2a", 64 + 32, 32)
        _add_conv(params, rng, "dec2b", 32, 32)
        _add_conv(params, rng, "dec1a", 32 + 16, 16)
        _add_conv(params, rng, "dec1b", 16, 16)
        k = 1 if self.head == "identity" else 3
        params.add(f"{HEAD_PREFIX}.w",
                   HEAD_INIT_GAIN * _he_uniform(rng, (k, k, 16, self.out_channels)))
        params.add(f"{HEAD_PREFIX}.b", np.zeros(self.out_channels))

    def _body(self, x):
        p = self.params
        e1 = _conv(p, "enc1b", _conv(p, "enc1a", x).relu()).relu()
        e2 = _conv(p, "enc2b", _conv(p, "enc2a", e1.avg_pool2x()).relu()).relu()
        m = _conv(p, "midb", _conv(p, "mida", e2.avg_pool2x()).relu()).relu()
        d2 = Tensor.concat([m.upsample2x(), e2], axis=3)
        d2 = _conv(p, "dec2b", _conv(p, "dec2a", d2).relu()).relu()
        d1 = Tensor.concat([d2.upsample2x(), e1], axis=3)
        d1 = _conv(p, "dec1b", _conv(p, "dec1a", d1).relu()).relu()
        return d1


class DnCNNSmall(RestorerNet):
    """Six conv-relu blocks plus a final conv; the output is the predicted
    residual and the reconstruction is input minus output."""

    arch = "dncnn-small"
    _head_in_channels = 16

    def _build(self, params, rng):
        _add_conv(params, rng, "blk0", self.in_channels, 16)
        for i in range(1, 6):
            _add_conv(params, rng, f"blk{i}", 16, 16)
        k = 3
        params.add(f"{HEAD_PREFIX}.w",
                   HEAD_INIT_GAIN * _he_uniform(rng, (k, k, 16, self.out_channels)))
        params.add(f"{HEAD_PREFIX}.b", np.zeros(self.out_channels))

    def _body(self, x):
        h = x
        for i in range(6):
            h = _conv(self.params, f"blk{i}", h).relu()
        return h

    def reconstruction(self, x: Tensor) -> Tensor:
        out = self.forward(x)
        base = x.upsample2x() if self.head == "upsample-2x" else x
        return base - out


ARCHS = {"unet-small": UNetSmall, "dncnn-small": DnCNNSmall}


def build_net(arch: str, in_channels=3, out_channels=3, head="identity",
              seed=0, params: ModelParams | None = None) -> RestorerNet:
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    return ARCHS[arch](in_channels, out_channels, head, seed, params)


# -- fixed feature encoder ---------------------------------------------------


class FeatureEncoder:
    """Frozen random-weight conv encoder used by the consistency loss.

    Three conv-relu-pool levels (widths 8/16/32); the feature vector is the
    channel concatenation of each level's spatially averaged activations.
    Parameters are a pure function of the seed and are never trained.
    """

    WIDTHS = (8, 16, 32)

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.params = ModelParams()
        rng = np.random.default_rng([seed, 0xFE])
        in_c = 3
        for i, w in enumerate(self.WIDTHS):
            _add_conv(self.params, rng, f"lvl{i}", in_c, w, trainable=False)
            in_c = w

    @property
    def feature_dim(self) -> int:
        return sum(self.WIDTHS)

    def encode(self, x: Tensor) -> Tensor:
        """Map an (N,H,W,3) batch to (N, 56) feature vectors."""
        if x.data.ndim != 4 or x.data.shape[3] != 3:
            raise ShapeMismatchError(f"encoder expects (N,H,W,3), got {x.shape}")
        feats = []
        h = x
        for i in range(len(self.WIDTHS)):
            h = _conv(self.params, f"lvl{i}", h).relu().avg_pool2x()
            feats.append(h.mean(axis=(1, 2)))
        return Tensor.concat(feats, axis=1)


# -- optimizer ---------------------------------------------------------------


class Adam:
    """Standard bias-corrected Adam over the trainable entries of a ModelParams."""

    def __init__(self, params: ModelParams, lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-7):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for e in self.params.trainable_entries():
            if e.name not in grads:
                raise MissingGradientError(f"no gradient for trainable {e.name!r}")
            g = grads[e.name]
            m = self.m.setdefault(e.name, np.zeros_like(e.tensor.data))
            v = self.v.setdefault(e.name, np.zeros_like(e.tensor.data))
            m += (1 - self.beta1) * (g - m)
            v += (1 - self.beta2) * (g * g - v)
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            e.tensor.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- checkpoint persistence --------------------------------------------------

CHECKPOINT_MAGIC = b"RCL1"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    """Write the bit-exact binary checkpoint format (magic ``RCL1``)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(params.entries)))
        for e in params.entries:
            name = e.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            shape = e.tensor.data.shape
            f.write(struct.pack("<I", len(shape)))
            for extent in shape:
                f.write(struct.pack("<I", extent))
            f.write(e.tensor.data.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFileError(f"checkpoint truncated at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CorruptMagicError("bad checkpoint magic")
    (version,) = struct.unpack("<B", take(1))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4))
    params = ModelParams()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape)
        params.add(name, data.copy())
    return params
