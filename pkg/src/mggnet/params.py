"""Named parameters, seeded initialization, SGD and MGGT checkpoint files."""

from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .functional import RunningStats
from .tensor import DTYPE, EngineError, Tensor

MAGIC = b"MGGT"


class ParamStore:
    """Ordered map from dotted parameter path to a trainable leaf tensor.

    All initial values come from one ``numpy`` generator seeded at
    construction, drawn in creation order. The owner of a parameter is the
    first path component (``backbone``, ``gal``, ``gcl``, ``heads``).
    Batchnorm running statistics live alongside as non-trainable buffers.
    """

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}
        self._stats: dict[str, RunningStats] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self, owner: Optional[str] = None) -> list[str]:
        if owner is None:
            return list(self._params)
        return [n for n in self._params if n.split(".", 1)[0] == owner]

    def owners(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for n in self._params:
            out.setdefault(n.split(".", 1)[0], []).append(n)
        return out

    def num_values(self, owner: Optional[str] = None) -> int:
        return sum(self._params[n].size for n in self.names(owner))

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=DTYPE), requires_grad=True)
        self._params[name] = t
        return t

    def fan_in_uniform(self, name: str, shape: tuple, fan_in: int, gain: float = 1.0) -> Tensor:
        bound = gain * np.sqrt(3.0 / fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple) -> Tensor:
        return self.add(name, np.ones(shape))

    def stats(self, name: str, channels: Optional[int] = None) -> RunningStats:
        if name not in self._stats:
            if channels is None:
                raise KeyError(f"unknown running stats {name!r}")
            self._stats[name] = RunningStats.fresh(channels)
        return self._stats[name]

    def stats_items(self):
        return self._stats.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        snap = {n: p.data.copy() for n, p in self._params.items()}
        for n, s in self._stats.items():
            snap[f"{n}.running_mean"] = s.mean.copy()
            snap[f"{n}.running_var"] = s.var.copy()
        return snap

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, p in self._params.items():
            p.data[...] = snap[n]
        for n, s in self._stats.items():
            s.mean[:] = snap[f"{n}.running_mean"]
            s.var[:] = snap[f"{n}.running_var"]


class SGD:
    """SGD with heavy-ball momentum: ``v = mu*v + g; p -= lr*v``."""

    def __init__(self, params: ParamStore, lr: float, momentum: float = 0.9) -> None:
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise EngineError(f"parameter {missing[0]!r} has no gradient")
        for n, p in self.params.items():
            g = p.grad
            if self.momentum:
                v = self.velocity.get(n)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[n] = v
                g = v
            p.data -= lr * g
            p.grad = None


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.0) -> None:
    """One stateless step. Only meaningful without momentum; use :class:`SGD` otherwise."""
    SGD(params, lr, momentum).step()


# --------------------------------------------------------------------------
# MGGT binary tensor files


def write_tensor(path: os.PathLike, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path: os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an MGGT tensor file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    n = int(np.prod(dims)) if rank else 1
    payload = raw[offset:]
    if len(payload) != 8 * n:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {8 * n}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(DTYPE)


def save_checkpoint(store: ParamStore, directory: os.PathLike, extra: Optional[dict] = None) -> Path:
    """Write every parameter and running stat as an MGGT file plus ``manifest.json``.

    The directory is assembled under a temporary name and renamed at the end.
    """
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        files = {}
        for k, (name, arr) in enumerate(store.snapshot().items()):
            fname = f"t{k:04d}.mggt"
            write_tensor(tmp / fname, arr)
            files[name] = fname
        manifest = {"format": "MGGT", "seed": store.seed, "tensors": files}
        if extra:
            manifest.update(extra)
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def load_checkpoint(directory: os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = {name: read_tensor(directory / f) for name, f in manifest["tensors"].items()}
    return arrays, manifest


class CheckpointMismatch(EngineError):
    pass


def apply_checkpoint(store: ParamStore, arrays: dict[str, np.ndarray]) -> None:
    expected = {k: v.shape for k, v in store.snapshot().items()}
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise CheckpointMismatch(f"checkpoint tensors differ from model: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, shape in expected.items():
        if arrays[k].shape != shape:
            raise CheckpointMismatch(f"{k}: checkpoint shape {arrays[k].shape} != model shape {shape}")
    store.restore(arrays)
