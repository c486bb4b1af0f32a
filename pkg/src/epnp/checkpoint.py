"""Checkpoint files: ``EPNPCKPT`` magic, u32 header length, JSON header, tensor blocks.

The header records the model kind, its architecture config, ``sigma``,
training metadata, the Lipschitz estimate (``lipschitz_L`` plus method
details) when present, and the ordered list of blocks. Each block follows in
the raw tensor format of :mod:`epnp.numerics`.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

from .baselines import ScoreNet, ScoreNetConfig
from .diffgraph import ParamBlock
from .energy import EnergyModel, EnergyNetConfig
from .numerics import decode_tensor, encode_tensor

CKPT_MAGIC = b"EPNPCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _header(model) -> dict:
    blocks = [{"name": b.name, "shape": list(b.value.shape), "dtype": str(b.value.dtype)} for b in model.blocks()]
    head = {
        "format": "epnp-checkpoint",
        "version": CKPT_VERSION,
        "kind": model.kind,
        "config": model.config.to_dict(),
        "sigma": model.sigma,
        "metadata": model.metadata,
        "blocks": blocks,
    }
    if model.kind == "energy":
        head["decoupled_decoder"] = bool(model.decoder)
    if model.lipschitz is not None:
        head["lipschitz_L"] = model.lipschitz["L"]
        head["lipschitz"] = model.lipschitz
    return head


def save_checkpoint(path, model) -> None:
    header = json.dumps(_header(model), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in model.blocks():
            fh.write(encode_tensor(b.value))


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(8) != CKPT_MAGIC:
        raise CheckpointError("not an EPnP checkpoint")
    (n,) = struct.unpack("<I", fh.read(4))
    head = json.loads(fh.read(n).decode("utf-8"))
    if head.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {head.get('version')}")
    return head


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        head = _read_header(fh)
        blocks = {}
        for spec in head["blocks"]:
            value = decode_tensor(fh)
            if list(value.shape) != spec["shape"]:
                raise CheckpointError(f"block {spec['name']} has shape {value.shape}, header says {spec['shape']}")
            blocks[spec["name"]] = ParamBlock(spec["name"], value.copy())
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last block")
    lipschitz = head.get("lipschitz")
    if lipschitz is None and "lipschitz_L" in head:
        lipschitz = {"L": head["lipschitz_L"]}
    if head["kind"] == "energy":
        cfg = EnergyNetConfig.from_dict(head["config"])
        params = {k: v for k, v in blocks.items() if not k.startswith("decoder.")}
        decoder = {k[len("decoder."):]: v for k, v in blocks.items() if k.startswith("decoder.")}
        for k, v in decoder.items():
            v.name = "decoder." + k
        return EnergyModel(cfg, params, head["sigma"], lipschitz, head.get("metadata"), decoder)
    if head["kind"] == "scorenet":
        net = ScoreNet(ScoreNetConfig.from_dict(head["config"]), blocks, head["sigma"], head.get("metadata"))
        net.lipschitz = lipschitz
        return net
    raise CheckpointError(f"unknown model kind {head['kind']!r}")


def update_header(path, **fields) -> dict:
    """Rewrite the JSON header of an existing checkpoint with extra fields."""
    raw = Path(path).read_bytes()
    fh = io.BytesIO(raw)
    head = _read_header(fh)
    body = raw[fh.tell():]
    head.update(fields)
    header = json.dumps(head, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(header)) + header + body)
    return head
