"""Checkpoint container with a deterministic binary layout.

File format (all integers little-endian):

    bytes 0..7    magic ``MOELAB01``
    bytes 8..15   uint64 header length H
    bytes 16..16+H  UTF-8 JSON header (sorted keys, fixed separators)
    then          raw tensor payloads, concatenated in header order

The header lists, in order: model config, training step, parameter
records (name, shape, dtype) and, when present, optimizer metadata with
its own tensor records (first moments, then second moments). Tensors are
row-major little-endian. Identical checkpoints serialize to identical
bytes, and save -> load -> save round-trips bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .model import ModelConfig, param_shapes
from .optim import OptimizerState

_MAGIC = b"MOELAB01"
_DTYPES = {"float64": "<f8", "float32": "<f4"}


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    optimizer: OptimizerState | None = None

    def validate(self) -> None:
        expected = param_shapes(self.config)
        if set(self.params) != set(expected):
            raise ConfigurationError("checkpoint parameter names do not match the config")
        for name, arr in self.params.items():
            if tuple(arr.shape) != tuple(expected[name]):
                raise ConfigurationError(
                    f"parameter '{name}' has shape {arr.shape}, expected {expected[name]}"
                )

    def copy(self) -> "Checkpoint":
        opt = None
        if self.optimizer is not None:
            opt = OptimizerState(
                lr=self.optimizer.lr, beta1=self.optimizer.beta1, beta2=self.optimizer.beta2,
                eps=self.optimizer.eps, weight_decay=self.optimizer.weight_decay,
                step=self.optimizer.step,
                m={k: v.copy() for k, v in self.optimizer.m.items()},
                v={k: v.copy() for k, v in self.optimizer.v.items()},
            )
        return Checkpoint(self.config, {k: v.copy() for k, v in self.params.items()},
                          self.step, opt)


def _tensor_records(tensors: dict[str, np.ndarray]):
    return [
        {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        for name, arr in tensors.items()
    ]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.validate()
    header: dict = {
        "config": ckpt.config.to_dict(),
        "step": int(ckpt.step),
        "params": _tensor_records(ckpt.params),
        "optimizer": None,
    }
    payloads = [ckpt.params[rec["name"]] for rec in header["params"]]
    opt = ckpt.optimizer
    if opt is not None:
        header["optimizer"] = {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "weight_decay": opt.weight_decay, "step": opt.step,
            "m": _tensor_records(opt.m), "v": _tensor_records(opt.v),
        }
        payloads += [opt.m[r["name"]] for r in header["optimizer"]["m"]]
        payloads += [opt.v[r["name"]] for r in header["optimizer"]["v"]]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for arr in payloads:
            wire = _DTYPES.get(str(arr.dtype))
            if wire is None:
                raise ConfigurationError(f"unsupported tensor dtype {arr.dtype}")
            fh.write(np.ascontiguousarray(arr).astype(wire, copy=False).tobytes())


def _read_tensors(fh, records) -> dict[str, np.ndarray]:
    out = {}
    for rec in records:
        wire = _DTYPES[rec["dtype"]]
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        buf = fh.read(count * np.dtype(wire).itemsize)
        out[rec["name"]] = np.frombuffer(buf, dtype=wire).reshape(shape).astype(
            rec["dtype"], copy=True)
    return out


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ConfigurationError(f"not a checkpoint file: {path}")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        params = _read_tensors(fh, header["params"])
        optimizer = None
        if header["optimizer"] is not None:
            oh = header["optimizer"]
            optimizer = OptimizerState(
                lr=oh["lr"], beta1=oh["beta1"], beta2=oh["beta2"], eps=oh["eps"],
                weight_decay=oh["weight_decay"], step=oh["step"],
                m=_read_tensors(fh, oh["m"]), v=_read_tensors(fh, oh["v"]),
            )
    ckpt = Checkpoint(ModelConfig.from_dict(header["config"]), params,
                      header["step"], optimizer)
    ckpt.validate()
    return ckpt
