"""Checkpoint files.

Layout (little-endian)::

    magic        8 bytes  b"SSGCKPT\\0"
    version      u32
    header_len   u64
    header       JSON: config echo, step, rng description, optimizer scalars, counters
    count        u32
    count x (name_len u16, name utf-8, tensor record)
    digest       32 bytes, SHA-256 of everything above

Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .autodiff import serialize

MAGIC = b"SSGCKPT\x00"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


class ConfigMismatch(CheckpointError):
    pass


def _opt_tensors(prefix: str, opt, names) -> Dict[str, np.ndarray]:
    out = {}
    if opt is None or not opt.state.m:
        return out
    for name, m, v in zip(names, opt.state.m, opt.state.v):
        out[f"{prefix}/m/{name}"] = m
        out[f"{prefix}/v/{name}"] = v
    return out


def _opt_header(opt) -> Optional[dict]:
    if opt is None:
        return None
    s = opt.state
    return {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "t": s.t}


def trainer_state(trainer) -> dict:
    tensors: Dict[str, np.ndarray] = {}
    tensors.update({f"d/{k}": v for k, v in trainer.d.state_dict().items()})
    tensors.update(_opt_tensors("opt_d", trainer.opt_d, [n for n, _ in trainer.d.named_parameters()]))
    if trainer.g is not None:
        tensors.update({f"g/{k}": v for k, v in trainer.g.state_dict().items()})
        tensors.update(_opt_tensors("opt_g", trainer.opt_g, [n for n, _ in trainer.g.named_parameters()]))
    header = {
        "config": trainer.config.to_dict(),
        "step": trainer.step,
        # all randomness is derived from (seed, stream, counter); this records the position
        "rng": {"kind": "derived-pcg64", "seed": trainer.config.train.seed, "next_step": trainer.step},
        "opt_d": _opt_header(trainer.opt_d),
        "opt_g": _opt_header(trainer.opt_g),
        "counters": trainer.counters,
        "num_parameters": {"d": trainer.d.num_parameters(),
                           "g": trainer.g.num_parameters() if trainer.g is not None else 0},
    }
    return {"header": header, "tensors": tensors}


def write_checkpoint(path, header: dict, tensors: Dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        serialize.write_array(buf, tensors[name])
    payload = buf.getvalue()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
            fh.write(hashlib.sha256(payload).digest())
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint(path):
    """Return ``(header, tensors)``; the file is only read, never modified."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 4 + 8 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload, digest = raw[:-32], raw[-32:]
    (version,) = struct.unpack_from("<I", payload, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    stream = io.BytesIO(payload)
    stream.seek(len(MAGIC) + 4)
    (hlen,) = struct.unpack("<Q", stream.read(8))
    header = json.loads(stream.read(hlen).decode())
    (count,) = struct.unpack("<I", stream.read(4))
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack("<H", stream.read(2))
            name = stream.read(nlen).decode()
            tensors[name] = serialize.read_array(stream)
    except (struct.error, serialize.SerializationError) as exc:
        raise CheckpointError(f"{path}: malformed tensor section: {exc}") from exc
    return header, tensors


def save_checkpoint(path, trainer) -> None:
    state = trainer_state(trainer)
    write_checkpoint(path, state["header"], state["tensors"])


def config_diff(a: dict, b: dict, prefix: str = "") -> list:
    """Human-readable differences between two nested config dicts."""
    out = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key, "<missing>"), b.get(key, "<missing>")
        if isinstance(va, dict) and isinstance(vb, dict):
            out.extend(config_diff(va, vb, f"{prefix}{key}."))
        elif va != vb:
            out.append(f"{prefix}{key}: checkpoint={va!r} expected={vb!r}")
    return out


def _restore_opt(opt, header: Optional[dict], tensors: dict, prefix: str, names) -> None:
    if opt is None or header is None:
        return
    s = opt.state
    s.t = header["t"]
    if f"{prefix}/m/{names[0]}" in tensors:
        s.m = [tensors[f"{prefix}/m/{n}"].copy() for n in names]
        s.v = [tensors[f"{prefix}/v/{n}"].copy() for n in names]
    else:
        s.m, s.v = [], []


def load_into_trainer(path, trainer, strict_config: bool = True) -> dict:
    """Restore networks, optimizers, step and counters; returns the header."""
    header, tensors = read_checkpoint(path)
    if strict_config:
        diff = config_diff(header["config"], trainer.config.to_dict())
        if diff:
            raise ConfigMismatch(f"{path}: config differs from checkpoint:\n  " + "\n  ".join(diff))
    trainer.d.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("d/")})
    _restore_opt(trainer.opt_d, header["opt_d"], tensors, "opt_d", [n for n, _ in trainer.d.named_parameters()])
    if trainer.g is not None:
        trainer.g.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("g/")})
        _restore_opt(trainer.opt_g, header["opt_g"], tensors, "opt_g", [n for n, _ in trainer.g.named_parameters()])
    trainer.step = header["step"]
    trainer.counters = dict(header["counters"])
    return header


def load_networks(path):
    """Rebuild (config, discriminator, generator-or-None) from a checkpoint alone."""
    from .models import Discriminator, Generator
    from .training import RunConfig

    header, tensors = read_checkpoint(path)
    config = RunConfig.from_dict(header["config"])
    d = Discriminator(config.discriminator)
    d.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("d/")})
    g = None
    gstate = {k[2:]: v for k, v in tensors.items() if k.startswith("g/")}
    if gstate:
        g = Generator(config.generator)
        g.load_state_dict(gstate)
    return config, d, g, header
