"""Binary model files: a 16-byte header, a sorted JSON manifest, then little-endian array blocks."""
from __future__ import annotations

import json
import struct

import numpy as np

from .estimator import OfflineGramians, RieszConstants
from .index import CoeffVector
from .problems import ProblemSpec
from .rb import ReducedBlocks, ReducedModel, Solver

MAGIC = b"ADRBMODL"
VERSION = 1
HEADER = struct.Struct("<8sII")
ALIGN = 8


class ModelFileError(ValueError):
    pass


def _arrays(model):
    out = {f"blocks/{k}": v for k, v in model.blocks.arrays().items()}
    g = model.gramians
    out.update({"gramians/cff": g.cff, "gramians/cbb": g.cbb, "gramians/cfb": g.cfb})
    for i, snap in enumerate(model.snapshots):
        out[f"snapshots/{i:04d}/codes"] = np.asarray(snap.codes, dtype="<i8")
        out[f"snapshots/{i:04d}/values"] = np.asarray(snap.values, dtype="<f8")
    return out


def to_bytes(model, extra=None):
    arrays = _arrays(model)
    entries, offset = [], 0
    for name in sorted(arrays):
        arr = arrays[name]
        dtype = "<i8" if arr.dtype.kind in "iu" else "<f8"
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    manifest = {
        "problem": model.problem.to_dict(),
        "n": model.n,
        "q_b": model.blocks.q_b,
        "q_f": model.blocks.q_f,
        "solver": model.solver.value,
        "samples": [list(mu) for mu in model.samples],
        "epsilons": list(model.epsilons),
        "snapshot_dim": model.snapshots[0].dim if model.snapshots else None,
        "riesz": model.riesz.to_dict() if model.riesz else None,
        "truncation_tol": model.gramians.truncation_tol,
        "arrays": entries,
        "extra": extra or {},
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * (-(len(text) + 1) % ALIGN) + b"\n"
    parts = [HEADER.pack(MAGIC, VERSION, 0), struct.pack("<Q", len(text)), text]
    for entry in entries:
        parts.append(np.ascontiguousarray(arrays[entry["name"]], dtype=entry["dtype"]).tobytes())
    return b"".join(parts)


def from_bytes(data):
    """Returns the model and the ``extra`` metadata dictionary."""
    if len(data) < HEADER.size + 8:
        raise ModelFileError("file too short")
    magic, version, _ = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFileError("not a model file")
    if version != VERSION:
        raise ModelFileError(f"unsupported model file version {version}")
    (length,) = struct.unpack_from("<Q", data, HEADER.size)
    start = HEADER.size + 8
    manifest = json.loads(data[start : start + length])
    body = start + length
    arrays = {}
    for entry in manifest["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        begin = body + entry["offset"]
        if begin + 8 * count > len(data):
            raise ModelFileError(f"truncated block {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, entry["dtype"], count, begin).reshape(entry["shape"]).copy()
    problem = ProblemSpec.from_dict(manifest["problem"])
    q_b, q_f = manifest["q_b"], manifest["q_f"]
    blocks = ReducedBlocks.from_arrays(q_b, q_f, {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("blocks/")})
    riesz = RieszConstants.from_dict(manifest["riesz"]) if manifest["riesz"] else None
    gramians = OfflineGramians(
        arrays["gramians/cff"], arrays["gramians/cbb"], arrays["gramians/cfb"], q_b, manifest["truncation_tol"], riesz
    )
    dim = manifest["snapshot_dim"]
    snapshots = [
        CoeffVector(arrays[f"snapshots/{i:04d}/codes"], arrays[f"snapshots/{i:04d}/values"], dim) for i in range(manifest["n"])
    ]
    model = ReducedModel(
        problem,
        blocks,
        gramians,
        [tuple(mu) for mu in manifest["samples"]],
        Solver(manifest["solver"]),
        riesz,
        snapshots,
        list(manifest["epsilons"]),
    )
    return model, manifest["extra"]


def save(path, model, extra=None):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model, extra))


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
