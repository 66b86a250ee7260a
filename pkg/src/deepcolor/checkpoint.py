"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic b"DCOLCKPT"
    u32       format version (1)
    u64       header length L
    L bytes   UTF-8 JSON header: run config, net config, iteration, RNG state,
              Adam scalars, and an index of arrays {group, name, shape, offset}
    ...       array payloads, float64 little-endian, C order, at the indexed
              offsets relative to the end of the header

Array groups: ``param``, ``buffer``, ``adam_m``, ``adam_v``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .net import NetConfig, NetworkParams
from .tensor import AdamState, Tensor

MAGIC = b"DCOLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    code = "E_CHECKPOINT"


@dataclass
class Checkpoint:
    params: NetworkParams
    adam: AdamState
    iteration: int
    rng_state: Optional[dict]
    run_config: dict


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _unjson(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _unjson(v) for k, v in obj.items()}
    return obj


def save(path, ckpt: Checkpoint) -> None:
    arrays: list[tuple[str, str, np.ndarray]] = []
    for name, t in ckpt.params.tensors.items():
        arrays.append(("param", name, t.data))
    for name, b in ckpt.params.buffers.items():
        arrays.append(("buffer", name, b))
    for name in ckpt.params.tensors:
        if name in ckpt.adam.m:
            arrays.append(("adam_m", name, ckpt.adam.m[name]))
            arrays.append(("adam_v", name, ckpt.adam.v[name]))
    index, offset = [], 0
    for group, name, arr in arrays:
        index.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "net_config": ckpt.params.config.to_dict(),
        "run_config": ckpt.run_config,
        "iteration": int(ckpt.iteration),
        "rng_state": _jsonable(ckpt.rng_state) if ckpt.rng_state is not None else None,
        "adam": {"beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps,
                 "step": ckpt.adam.step},
        "arrays": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(hbytes)), hbytes]
    parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, _, a in arrays)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    if len(buf) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    base = 20 + hlen
    params = NetworkParams(NetConfig.from_dict(header["net_config"]))
    adam = AdamState(beta1=header["adam"]["beta1"], beta2=header["adam"]["beta2"],
                     eps=header["adam"]["eps"], step=header["adam"]["step"])
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + 8 * n > len(buf):
            raise CheckpointError(f"{path}: array {entry['name']} truncated")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=start).astype(np.float64).reshape(entry["shape"])
        group, name = entry["group"], entry["name"]
        if group == "param":
            params.tensors[name] = Tensor(arr, requires_grad=True)
        elif group == "buffer":
            params.buffers[name] = arr.copy()
        elif group == "adam_m":
            adam.m[name] = arr
        elif group == "adam_v":
            adam.v[name] = arr
        else:
            raise CheckpointError(f"{path}: unknown array group {group!r}")
    rng_state = _unjson(header["rng_state"]) if header["rng_state"] is not None else None
    return Checkpoint(params, adam, header["iteration"], rng_state, header["run_config"])
