"""Versioned binary checkpoints of a whole ensemble.

Layout (all integers little-endian)::

    magic  b"SGANCKPT"
    u32    format version
    u64    header length H
    H      JSON header: iteration, config hash, array table, optimizer scalars,
           RNG stream states
    u64    payload length P
    P      raw float64 array bytes, in table order
    32     sha256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .ensemble import Ensemble
from .errors import CheckpointError
from .nn import Net

MAGIC = b"SGANCKPT"
FORMAT_VERSION = 1


def _net_arrays(prefix: str, net: Net):
    for i, (w, b) in enumerate(net.params.layers):
        yield f"{prefix}.p{i}.w", w
        yield f"{prefix}.p{i}.b", b
    for name, store in (("m", net.opt.first_moment), ("v", net.opt.second_moment)):
        if store is None:
            continue
        for i, (w, b) in enumerate(store.layers):
            yield f"{prefix}.{name}{i}.w", w
            yield f"{prefix}.{name}{i}.b", b


def _named_nets(ens: Ensemble) -> dict[str, Net]:
    nets = {}
    for p in ens.locals:
        nets[f"G{p.pair_index}"] = p.generator
        nets[f"D{p.pair_index}"] = p.discriminator
    if ens.global_pair is not None:
        nets["G0"], nets["D0"] = ens.global_pair.generator, ens.global_pair.discriminator
    if ens.baseline is not None:
        nets["Gstd"], nets["Dstd"] = ens.baseline.generator, ens.baseline.discriminator
    return nets


def encode(ens: Ensemble, config_hash: str) -> bytes:
    nets = _named_nets(ens)
    table, chunks, offset = [], [], 0
    for name, net in nets.items():
        for key, arr in _net_arrays(name, net):
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            table.append({"name": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
    header = {
        "iteration": ens.iteration,
        "config_hash": config_hash,
        "arrays": table,
        "optimizers": {name: {"kind": n.opt.kind, "step_count": n.opt.step_count} for name, n in nets.items()},
        "streams": {k: s.get_state() for k, s in ens.all_streams().items()},
    }
    head = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(chunks)
    body = (MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(head)) + head
            + struct.pack("<Q", len(payload)) + payload)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[dict, bytes]:
    """Verify framing and integrity; return (header, payload)."""
    if len(blob) < len(MAGIC) + 4 + 8 + 8 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if pos + hlen + 8 + 32 > len(blob):
        raise CheckpointError("checkpoint truncated inside the header")
    head = blob[pos:pos + hlen]
    pos += hlen
    (plen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if pos + plen + 32 != len(blob):
        raise CheckpointError("checkpoint length does not match its declared payload size")
    payload = blob[pos:pos + plen]
    if hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise CheckpointError("checkpoint checksum mismatch (file is corrupt)")
    try:
        header = json.loads(head)
    except ValueError as exc:
        raise CheckpointError(f"checkpoint header is not valid JSON: {exc}") from None
    return header, payload


def save_checkpoint(ens: Ensemble, path, config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ens, config_hash))
    tmp.replace(path)
    return path


def restore(ens: Ensemble, header: dict, payload: bytes) -> Ensemble:
    """Overwrite a freshly initialized ensemble's state in place."""
    nets = _named_nets(ens)
    if set(nets) != set(header["optimizers"]):
        raise CheckpointError("checkpoint networks do not match the configured ensemble")
    slots = {}
    for name, net in nets.items():
        slots.update(dict(_net_arrays(name, net)))
    for entry in header["arrays"]:
        target = slots.get(entry["name"])
        if target is None or list(target.shape) != entry["shape"]:
            raise CheckpointError(f"array {entry['name']} does not fit the configured ensemble")
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        target[...] = np.frombuffer(raw, dtype="<f8").reshape(target.shape)
    for name, info in header["optimizers"].items():
        nets[name].opt.step_count = int(info["step_count"])
    streams = ens.all_streams()
    for key, state in header["streams"].items():
        streams[key].set_state(state)
    ens.iteration = int(header["iteration"])
    return ens


def load_checkpoint(path, ens: Ensemble, config_hash: str, *, allow_config_mismatch: bool = False,
                    warn=None) -> Ensemble:
    """Load ``path`` into ``ens`` (built from the same config)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    header, payload = decode(path.read_bytes())
    if header["config_hash"] != config_hash:
        msg = "checkpoint was written with a different config"
        if not allow_config_mismatch:
            raise CheckpointError(msg + "; pass the override flag to resume anyway")
        if warn is not None:
            warn(msg)
    return restore(ens, header, payload)
