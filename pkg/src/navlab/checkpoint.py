"""Checkpoint files.

Layout: ``b"TDNAV1"``, one format-version byte, a little-endian uint32 header
length, a JSON header (architecture, block names and shapes, branch keys),
then every parameter group's values as little-endian float32 in header order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from navlab.errors import CheckpointError
from navlab.model import ModelArch, ModelParams, SceneBranch, SiameseCore
from navlab.numerics import ParamGroup, layout_size

MAGIC = b"TDNAV1"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def dump_groups(meta: dict, groups: Sequence[ParamGroup]) -> bytes:
    header = dict(meta)
    header["groups"] = [{"name": g.name, "layout": [list(b) for b in g.layout]} for g in groups]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(g.flat, dtype=_LE_F32).tobytes() for g in groups)
    return MAGIC + bytes([FORMAT_VERSION]) + struct.pack("<I", len(blob)) + blob + body


def load_groups(data: bytes) -> tuple[dict, list[ParamGroup]]:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic)")
    off = len(MAGIC)
    version = data[off]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", data, off + 1)
    off += 5
    header = json.loads(data[off : off + n])
    off += n
    groups = []
    for g in header["groups"]:
        layout = tuple((b[0], int(b[1]), int(b[2])) for b in g["layout"])
        size = layout_size(layout)
        end = off + 4 * size
        if end > len(data):
            raise CheckpointError(f"checkpoint truncated inside group {g['name']}")
        flat = np.frombuffer(data, dtype=_LE_F32, count=size, offset=off).astype(np.float32)
        groups.append(ParamGroup(g["name"], layout, flat))
        off = end
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes after the last group")
    return header, groups


def model_bytes(params: ModelParams) -> bytes:
    meta = {
        "kind": "siamese",
        "arch": params.arch.to_dict(),
        "seed": params.seed,
        "single_branch": params.single_branch,
        "branch_keys": sorted(params.branches),
    }
    return dump_groups(meta, params.groups())


def save_model(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(model_bytes(params))


def model_from_bytes(data: bytes, expect_arch: ModelArch | None = None) -> ModelParams:
    header, groups = load_groups(data)
    if header.get("kind") != "siamese":
        raise CheckpointError(f"expected a siamese checkpoint, got kind {header.get('kind')!r}")
    arch = ModelArch(**header["arch"])
    if expect_arch is not None and arch != expect_arch:
        raise CheckpointError(f"checkpoint architecture {arch} does not match {expect_arch}")
    by_name = {g.name: g for g in groups}
    core_g = by_name.get("core")
    if core_g is None or core_g.layout != arch.core_layout():
        raise CheckpointError("core block shapes do not match the recorded architecture")
    core = SiameseCore(arch, core_g.flat)
    branches = {}
    for key in header["branch_keys"]:
        g = by_name.get(f"branch/{key}")
        if g is None or g.layout != arch.branch_layout():
            raise CheckpointError(f"branch {key!r} missing or mis-shaped")
        branches[key] = SceneBranch(arch, key, g.flat)
    return ModelParams(arch, header["seed"], header["single_branch"], core, branches)


def load_model(path: str | Path, expect_arch: ModelArch | None = None) -> ModelParams:
    return model_from_bytes(Path(path).read_bytes(), expect_arch)
