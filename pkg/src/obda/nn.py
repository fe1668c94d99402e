"""Parameter containers, initialization, and the weight checkpoint format.

Checkpoints are a flat little-endian float32 binary next to a JSON sidecar
listing parameter names, shapes, and the config hash of the model that wrote
them, so ground and on-board processes can refuse mismatched weights.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, IntegrityError

CHECKPOINT_VERSION = 1


class Module:
    """Base class: any Tensor attribute is a parameter, recursively."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, T.Tensor):
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, T.Tensor):
                        yield f"{key}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def uniform_init(rng: np.random.Generator, shape, fan_in: int,
                 dtype=np.float32, gain: float = 3.0) -> T.Tensor:
    """Fan-in-scaled uniform init, deterministic under `rng`.

    gain/sqrt(fan_in) with gain 3.0 makes one conv+silu roughly variance
    preserving (uniform variance bound^2/3, silu gain ~0.36); smaller bounds
    collapse a 12-conv pyramid to near-constants, larger ones blow it up.
    """
    bound = gain / np.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return T.Tensor(data, requires_grad=True)


class Conv2d(Module):
    """2-D convolution module; kernels are 1x1 or 3x3 in this artifact."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dtype=np.float32,
                 zero_init: bool = False):
        if k not in (1, 3):
            raise ConfigError(f"kernel size {k} unsupported (1 or 3)")
        self.stride = stride
        self.padding = padding
        if zero_init:
            self.weight = T.Tensor(np.zeros((c_out, c_in, k, k), dtype=dtype),
                                   requires_grad=True)
            self.bias = T.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        else:
            fan_in = c_in * k * k
            self.weight = uniform_init(rng, (c_out, c_in, k, k), fan_in, dtype)
            self.bias = uniform_init(rng, (c_out,), fan_in, dtype, gain=1.0)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ResidualBlock(Module):
    """conv3x3 -> silu -> conv3x3, added to the input, then silu."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1, dtype=dtype)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        y = self.conv2(T.silu(self.conv1(x)))
        return T.silu(x + y)


def save_checkpoint(path: str | Path, module: Module, config_hash: str,
                    extra: dict | None = None) -> None:
    """Write `<path>.bin` (flat f32) and `<path>.json` (sidecar)."""
    path = Path(path)
    names, shapes, chunks = [], [], []
    for name, p in module.named_parameters():
        names.append(name)
        shapes.append(list(p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").reshape(-1))
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    path.with_suffix(".bin").write_bytes(flat.tobytes())
    sidecar = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "params": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
    }
    if extra:
        sidecar.update(extra)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_checkpoint(path: str | Path, module: Module,
                    expect_hash: str | None = None) -> dict:
    """Load weights saved by `save_checkpoint` into `module`, checking hashes."""
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    if expect_hash is not None and sidecar["config_hash"] != expect_hash:
        raise IntegrityError(
            f"checkpoint config hash {sidecar['config_hash']} does not match "
            f"expected {expect_hash}")
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    params = dict(module.named_parameters())
    expected = {e["name"]: tuple(e["shape"]) for e in sidecar["params"]}
    if set(params) != set(expected):
        raise IntegrityError("checkpoint parameter set does not match the model")
    offset = 0
    for entry in sidecar["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        chunk = flat[offset:offset + size]
        if chunk.size != size:
            raise IntegrityError("checkpoint binary shorter than its sidecar")
        p = params[entry["name"]]
        if tuple(p.data.shape) != shape:
            raise IntegrityError(f"shape mismatch for parameter {entry['name']}")
        p.data = chunk.reshape(shape).astype(p.data.dtype)
        offset += size
    if offset != flat.size:
        raise IntegrityError("checkpoint binary longer than its sidecar")
    return sidecar
