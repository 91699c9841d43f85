"""Same-padded 3D U-Net on the autodiff engine, plus the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"DSEG"                      magic
    uint16                       format version
    uint32 + bytes               metadata block (UTF-8 JSON, sorted keys)
    uint32                       tensor count
    per tensor:
        uint16 + bytes           name (UTF-8)
        uint8                    ndim
        uint32 * ndim            extents
        float32 * prod(extents)  values
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import RunningStats, Tensor, batchnorm3d, concat, conv3d, conv_transpose3d, maxpool3d, relu

MAGIC = b"DSEG"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not fit the requested network."""


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_channels: int = 8
    in_channels: int = 2
    out_channels: int = 5

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("a U-Net needs at least 2 levels")
        if min(self.base_channels, self.in_channels, self.out_channels) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def divisor(self):
        return 2 ** (self.levels - 1)

    def channels(self, level):
        return self.base_channels * 2**level

    def check_patch(self, extents):
        bad = [e for e in extents if e % self.divisor]
        if bad:
            raise ValueError(f"patch extents {tuple(extents)} must be divisible by {self.divisor}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: int(v) for k, v in d.items()})


def _layer_specs(cfg):
    """Ordered ``(name, kind, shape)`` list describing every learnable tensor."""
    specs = []

    def block(prefix, cin, cout):
        specs.append((f"{prefix}.weight", "conv", (cout, cin, 3, 3, 3)))
        specs.append((f"{prefix}.bn.gamma", "gamma", (cout,)))
        specs.append((f"{prefix}.bn.beta", "beta", (cout,)))

    cin = cfg.in_channels
    for lvl in range(cfg.levels):
        c = cfg.channels(lvl)
        block(f"enc{lvl}.conv1", cin, c)
        block(f"enc{lvl}.conv2", c, c)
        cin = c
    for lvl in reversed(range(cfg.levels - 1)):
        c = cfg.channels(lvl)
        specs.append((f"up{lvl}.weight", "upconv", (cfg.channels(lvl + 1), c, 2, 2, 2)))
        specs.append((f"up{lvl}.bias", "bias", (c,)))
        block(f"dec{lvl}.conv1", 2 * c, c)
        block(f"dec{lvl}.conv2", c, c)
    specs.append(("head.weight", "head", (cfg.out_channels, cfg.channels(0), 1, 1, 1)))
    specs.append(("head.bias", "bias", (cfg.out_channels,)))
    return specs


def parameter_count(cfg):
    return sum(int(np.prod(shape)) for _, _, shape in _layer_specs(cfg))


@dataclass
class UNet3D:
    """Parameters, batch-norm statistics and the forward pass of one network."""

    config: UNetConfig
    params: dict
    stats: dict = field(default_factory=dict)

    def forward(self, x, mode="eval"):
        """Map ``(N, in_channels, D, H, W)`` input to ``(N, out_channels, D, H, W)`` logits."""
        return forward(self, x, mode)

    __call__ = forward

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        """Every persisted array by name: parameters then running statistics."""
        out = {k: p.data for k, p in self.params.items()}
        for k, rs in self.stats.items():
            out[f"{k}.running_mean"] = rs.mean
            out[f"{k}.running_var"] = rs.var
        return out

    def load_arrays(self, arrays):
        expected = set(self.state_arrays())
        got = set(arrays)
        if expected != got:
            missing, extra = sorted(expected - got), sorted(got - expected)
            raise CheckpointError(f"tensor set mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in self.params.items():
            if arrays[k].shape != p.data.shape:
                raise CheckpointError(f"{k}: shape {arrays[k].shape} != {p.data.shape}")
            p.data[...] = arrays[k]
        for k, rs in self.stats.items():
            rs.mean[...] = arrays[f"{k}.running_mean"]
            rs.var[...] = arrays[f"{k}.running_var"]

    def copy(self):
        net = build(self.config, seed=0)
        net.load_arrays({k: v.copy() for k, v in self.state_arrays().items()})
        return net


def build(config, seed):
    """He-initialized network; identical seeds give bit-identical parameters."""
    if not isinstance(config, UNetConfig):
        raise TypeError("config must be a UNetConfig")
    rng = np.random.default_rng(seed)
    params, stats = {}, {}
    for name, kind, shape in _layer_specs(config):
        if kind == "conv" or kind == "head":
            fan_in = shape[1] * int(np.prod(shape[2:]))
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif kind == "upconv":
            data = rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])
        elif kind == "gamma":
            data = np.ones(shape)
            stats[name[: -len(".gamma")]] = RunningStats.create(shape[0])
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(np.float32), requires_grad=True)
    return UNet3D(config, params, stats)


def _block(net, prefix, x, mode):
    p = net.params
    x = conv3d(x, p[f"{prefix}.weight"], padding=1)
    x = batchnorm3d(x, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"], net.stats[f"{prefix}.bn"], mode)
    return relu(x)


def forward(net, x, mode="eval"):
    cfg = net.config
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (N, {cfg.in_channels}, D, H, W) input, got {x.shape}")
    cfg.check_patch(x.shape[2:])
    p = net.params
    skips = []
    for lvl in range(cfg.levels):
        if lvl:
            x = maxpool3d(x)
        x = _block(net, f"enc{lvl}.conv1", x, mode)
        x = _block(net, f"enc{lvl}.conv2", x, mode)
        skips.append(x)
    for lvl in reversed(range(cfg.levels - 1)):
        x = conv_transpose3d(x, p[f"up{lvl}.weight"], p[f"up{lvl}.bias"], stride=2)
        x = concat([skips[lvl], x], axis=1)
        x = _block(net, f"dec{lvl}.conv1", x, mode)
        x = _block(net, f"dec{lvl}.conv2", x, mode)
    return conv3d(x, p["head.weight"], p["head.bias"])


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    """Network weights plus training metadata (stage, alpha, iteration, ...)."""

    config: UNetConfig
    arrays: dict
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net, **metadata):
        return cls(net.config, {k: v.copy() for k, v in net.state_arrays().items()}, dict(metadata))

    def network(self):
        net = build(self.config, seed=0)
        net.load_arrays(self.arrays)
        return net

    @property
    def stage(self):
        return self.metadata.get("stage")


def _metadata_bytes(config, metadata):
    meta = dict(metadata)
    meta["config"] = config.to_dict()
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(checkpoint, path):
    path = Path(path)
    meta = _metadata_bytes(checkpoint.config, checkpoint.metadata)
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(meta)), meta]
    parts.append(struct.pack("<I", len(checkpoint.arrays)))
    for name in sorted(checkpoint.arrays):
        arr = np.ascontiguousarray(checkpoint.arrays[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path.write_bytes(b"".join(parts))
    return path


def checkpoint_size(checkpoint):
    """Exact byte size :func:`save_checkpoint` will produce."""
    size = 4 + 2 + 4 + len(_metadata_bytes(checkpoint.config, checkpoint.metadata)) + 4
    for name, arr in checkpoint.arrays.items():
        size += 2 + len(name.encode("utf-8")) + 1 + 4 * arr.ndim + 4 * arr.size
    return size


def load_checkpoint(path, expected_config=None):
    """Read a checkpoint; raise :class:`CheckpointError` if it does not match ``expected_config``."""
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack("<H", take(2))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(bytes(take(meta_len)).decode("utf-8"))
    config = UNetConfig.from_dict(metadata.pop("config"))
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"config mismatch: checkpoint has {config}, expected {expected_config}")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape))
        if name in arrays:
            raise CheckpointError(f"{path}: duplicate tensor {name}")
        arrays[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    ckpt = Checkpoint(config, arrays, metadata)
    ckpt.network()  # validates the tensor set against the architecture
    return ckpt
