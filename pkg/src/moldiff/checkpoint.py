"""Versioned binary checkpoints.

Layout: 4-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, then the raw array payloads back to back in header order. Arrays
are written little-endian C-order, so a round trip is bit-exact on any
host. The header carries the model config (plus its hash), epoch counter,
training-set size histogram, normalization stats, and the full generator
state, which is what makes resume bit-reproducible.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MDCK"
FORMAT_VERSION = 1


def config_hash(config):
    """Stable hash of a JSON-serializable config dict."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _le_dtype(dt):
    dt = np.dtype(dt)
    if dt.byteorder == ">":
        raise ValueError(f"big-endian array dtype {dt} not supported")
    return dt.newbyteorder("<")


@dataclass
class Checkpoint:
    config: dict
    epoch: int = 0
    arrays: dict = field(default_factory=dict)
    size_histogram: dict = field(default_factory=dict)
    normalization: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def hash(self):
        return config_hash(self.config)


def save_checkpoint(path, ckpt):
    names = sorted(ckpt.arrays)
    manifest = []
    payloads = []
    for name in names:
        a = np.ascontiguousarray(ckpt.arrays[name])
        a = a.astype(_le_dtype(a.dtype), copy=False)
        manifest.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        payloads.append(a.tobytes())
    header = {
        "config": ckpt.config,
        "config_hash": ckpt.hash,
        "epoch": int(ckpt.epoch),
        "size_histogram": {str(k): int(v) for k, v in ckpt.size_histogram.items()},
        "normalization": ckpt.normalization,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for chunk in payloads:
            fh.write(chunk)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint format version {version} "
                f"(this build reads {FORMAT_VERSION})"
            )
        header = json.loads(fh.read(hlen).decode())
        arrays = {}
        for item in header["arrays"]:
            dt = np.dtype(item["dtype"])
            shape = tuple(item["shape"])
            n = dt.itemsize * int(np.prod(shape, dtype=np.int64))
            raw = fh.read(n)
            if len(raw) != n:
                raise ValueError(f"{path}: truncated payload for array {item['name']!r}")
            arrays[item["name"]] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    stored = header.get("config_hash")
    if stored is not None and stored != config_hash(header["config"]):
        raise ValueError(f"{path}: config hash mismatch, file corrupted or edited")
    hist = {int(k): v for k, v in header["size_histogram"].items()}
    return Checkpoint(
        config=header["config"],
        epoch=header["epoch"],
        arrays=arrays,
        size_histogram=hist,
        normalization=header["normalization"],
        rng_state=header["rng_state"],
        extra=header.get("extra", {}),
    )


def pack_training_state(config, store, optimizer=None, ema=None, epoch=0,
                        size_histogram=None, normalization=None, rng=None,
                        extra=None):
    """Collect model/optimizer/EMA arrays into a Checkpoint."""
    arrays = {}
    for name, p in store.items():
        arrays[f"param/{name}"] = p.data
    if ema is not None:
        for name, v in ema.shadow.items():
            arrays[f"ema/{name}"] = v
    ex = dict(extra or {})
    if optimizer is not None:
        for name, v in optimizer.m.items():
            arrays[f"adam_m/{name}"] = v
        for name, v in optimizer.v.items():
            arrays[f"adam_v/{name}"] = v
        ex["adam_step"] = optimizer.t
    return Checkpoint(
        config=dict(config),
        epoch=epoch,
        arrays=arrays,
        size_histogram=dict(size_histogram or {}),
        normalization=dict(normalization or {}),
        rng_state=rng.bit_generator.state if rng is not None else {},
        extra=ex,
    )


def _group(arrays, prefix):
    cut = len(prefix)
    return {k[cut:]: v for k, v in arrays.items() if k.startswith(prefix)}


def restore_params(ckpt, store, source="param"):
    """Copy a named array group into the store; any mismatch is an error."""
    group = _group(ckpt.arrays, source + "/")
    names = [n for n, _ in store.items()]
    missing = [n for n in names if n not in group]
    surplus = [n for n in group if n not in set(names)]
    if missing or surplus:
        raise ValueError(
            f"checkpoint/model parameter mismatch: missing {missing[:5]}, "
            f"unexpected {surplus[:5]}"
        )
    for name, p in store.items():
        a = group[name]
        if a.shape != p.data.shape:
            raise ValueError(
                f"parameter {name!r}: checkpoint shape {a.shape} != model {p.data.shape}"
            )
        p.data = a.astype(p.data.dtype, copy=True)


def restore_optimizer(ckpt, optimizer):
    m = _group(ckpt.arrays, "adam_m/")
    v = _group(ckpt.arrays, "adam_v/")
    if not m:
        raise ValueError("checkpoint holds no optimizer state")
    state = {"t": int(ckpt.extra["adam_step"])}
    for k in m:
        state[f"m.{k}"] = m[k]
        state[f"v.{k}"] = v[k]
    optimizer.load_state_dict(state)


def restore_ema(ckpt, ema):
    shadow = _group(ckpt.arrays, "ema/")
    if not shadow:
        raise ValueError("checkpoint holds no EMA state")
    if set(shadow) != set(ema.shadow):
        raise ValueError("checkpoint/EMA parameter name mismatch")
    for k, v in shadow.items():
        if v.shape != ema.shadow[k].shape:
            raise ValueError(f"EMA entry {k!r}: shape {v.shape} != {ema.shadow[k].shape}")
        ema.shadow[k] = v.copy()


def restore_rng(ckpt):
    if not ckpt.rng_state:
        raise ValueError("checkpoint holds no rng state")
    bg = np.random.PCG64()
    bg.state = ckpt.rng_state
    return np.random.Generator(bg)
