"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ISGN"  u32 version  u32 header_len  header (UTF-8 JSON, sorted keys)
    then, for each tensor listed in header["tensors"], its float32 payload

The header records each tensor's name and shape, so payloads are raw
``<f4`` bytes with no per-tensor framing.  Network parameters and buffers
are named ``<kind>/<state_dict key>``; optimizer buffers are named
``opt:<optimizer>/<buffer>/<parameter>``.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import BadMagicError, CheckpointError, VersionMismatchError
from .networks import NETWORKS
from .training import SGD, Adam, Optimizer, TrainConfig, TrainResult, named_parameters

MAGIC = b"ISGN"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")
OPTIMIZERS = {"adam": Adam, "sgd": SGD}


@dataclass
class Checkpoint:
    nets: dict[str, nn.Module]
    optimizers: dict[str, dict] = field(default_factory=dict)   # name -> Optimizer.state_dict()
    config: dict | None = None
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    def __getitem__(self, kind):
        return self.nets[kind]

    def train_config(self) -> TrainConfig | None:
        return None if self.config is None else TrainConfig.from_dict(self.config)

    def resume_state(self) -> TrainResult:
        """A :class:`TrainResult` that ``train_basic``/``train_isgan`` can resume from."""
        enc, dec = self.nets["encoder"], self.nets["decoder"]
        steg = self.nets.get("steganalyzer")
        opts: dict[str, Optimizer] = {}
        for name, state in self.optimizers.items():
            if name == "generator":
                params = named_parameters(encoder=enc, decoder=dec)
            else:
                params = named_parameters(steganalyzer=steg)
            opt = OPTIMIZERS[state["kind"]](params, **_ctor_args(state))
            opt.load_state_dict(state)
            opts[name] = opt
        return TrainResult(enc, dec, steg, opts, list(self.history), self.epoch)


def _ctor_args(state):
    hyper = dict(state["hyper"])
    if "betas" in hyper:
        hyper["betas"] = tuple(hyper["betas"])
    return hyper


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)          # "nan", "inf"; json has no literal for these
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _history_from_json(rows):
    return [{k: (float(v) if v in ("nan", "inf", "-inf") else v) for k, v in r.items()} for r in rows]


def to_bytes(nets: dict[str, nn.Module], optimizers: dict[str, Optimizer] | None = None,
             config: TrainConfig | dict | None = None, epoch: int = 0,
             history: list[dict] | None = None) -> bytes:
    tensors: list[tuple[str, torch.Tensor]] = []
    for kind, net in nets.items():
        if kind not in NETWORKS:
            raise ValueError(f"unknown network kind {kind!r}")
        for key, t in net.state_dict().items():
            tensors.append((f"{kind}/{key}", t))
    opt_meta = {}
    for name, opt in (optimizers or {}).items():
        state = opt.state_dict() if isinstance(opt, Optimizer) else opt
        opt_meta[name] = {"kind": state["kind"], "step": state["step"], "hyper": state["hyper"]}
        for key in sorted(state["tensors"]):
            tensors.append((f"opt:{name}/{key}", state["tensors"][key]))
    if isinstance(config, TrainConfig):
        config = config.to_dict()
    header = {
        "networks": list(nets),
        "epoch": int(epoch),
        "config": config,
        "optimizers": opt_meta,
        "history": history or [],
        "tensors": [[name, list(t.shape)] for name, t in tensors],
    }
    head = json.dumps(_json_safe(header), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(head)), head]
    for _, t in tensors:
        parts.append(t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not an isgan checkpoint (bad magic)")
    if len(blob) < _PREAMBLE.size:
        raise CheckpointError("truncated checkpoint preamble")
    _, version, head_len = _PREAMBLE.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREAMBLE.size
    if len(blob) < start + head_len:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc

    offset = start + head_len
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"truncated checkpoint: tensor {name!r} incomplete")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after last tensor")

    nets = {}
    for kind in header["networks"]:
        net = NETWORKS[kind]()
        prefix = kind + "/"
        state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        for key, ref in net.state_dict().items():
            if key in state:
                state[key] = state[key].to(ref.dtype)
        try:
            net.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f"{kind} tensors do not fit the architecture: {exc}") from exc
        nets[kind] = net

    optimizers = {}
    for name, meta in header["optimizers"].items():
        prefix = f"opt:{name}/"
        optimizers[name] = {**meta, "tensors": {k[len(prefix):]: v for k, v in tensors.items()
                                                if k.startswith(prefix)}}
    return Checkpoint(nets, optimizers, header["config"], header["epoch"],
                      _history_from_json(header["history"]))


def save_checkpoint(path, nets: dict[str, nn.Module], optimizers=None, config=None, epoch: int = 0,
                    history=None) -> None:
    blob = to_bytes(nets, optimizers, config, epoch, history)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def save_result(path, result: TrainResult, config: TrainConfig) -> None:
    save_checkpoint(path, result.networks(), result.optimizers, config, result.epoch, result.history)


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob)
