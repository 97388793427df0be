"""Versioned binary checkpoint container.

Layout: 8-byte magic, u32 format version, u64 header length, JSON header
(sorted keys: model spec + sha256 spec hash, noise schedule, optimizer step,
rng state, array manifest), then raw little-endian float64 array bytes in
manifest order. Round trips are byte-exact.
"""

import hashlib
import json
import struct

import numpy as np

from danp.models import ModelSpec
from danp.nn import ParamStore
from danp.noising import NoiseSchedule, solve_beta

MAGIC = b"NPCHKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointHashError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def spec_hash(spec):
    blob = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, spec, params, extra=None, arrays_extra=None):
    """Write spec + parameter arrays (+ optional optimizer arrays) to path."""
    named = {name: tensor.detach().numpy().astype("<f8")
             for name, tensor in params.items()}
    if arrays_extra:
        for name, arr in arrays_extra.items():
            if name in named:
                raise ValueError(f"duplicate array name {name!r}")
            named[name] = np.asarray(arr, dtype="<f8")
    manifest = [
        {"name": n, "dtype": "<f8", "shape": list(named[n].shape)}
        for n in sorted(named)
    ]
    schedule = spec.schedule
    header = {
        "format_version": FORMAT_VERSION,
        "model_spec": spec.to_dict(),
        "spec_hash": spec_hash(spec),
        "schedule": {
            "levels": schedule.levels,
            "beta": schedule.beta,
            "sigma2_final": schedule.sigma2_final,
        },
        "extra": extra or {},
        "arrays": manifest,
    }
    blob = _canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for entry in manifest:
            fh.write(np.ascontiguousarray(named[entry["name"]]).tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (spec, ParamStore, extra dict, extra arrays).

    Verifies magic/version, the stored spec hash, and that the recorded
    schedule beta is consistent with its sigma2 (recomputed via solve_beta).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 12:
        raise CheckpointTruncatedError(f"{path}: file too short")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<Q", data, len(MAGIC) + 4)
    offset = len(MAGIC) + 12
    if len(data) < offset + header_len:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    try:
        header = json.loads(data[offset : offset + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointVersionError(f"{path}: corrupt header") from exc
    offset += header_len
    spec = ModelSpec.from_dict(header["model_spec"])
    if spec_hash(spec) != header["spec_hash"]:
        raise CheckpointHashError(f"{path}: model spec hash mismatch")
    sched = header["schedule"]
    if sched["levels"] > 0:
        beta = solve_beta(sched["levels"], sched["sigma2_final"])
        if abs(beta - sched["beta"]) > 1e-6:
            raise CheckpointHashError(f"{path}: schedule beta/sigma2 mismatch")
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 8
        if len(data) < offset + nbytes:
            raise CheckpointTruncatedError(f"{path}: truncated array data")
        arr = np.frombuffer(data[offset : offset + nbytes], dtype="<f8")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(data):
        raise CheckpointTruncatedError(f"{path}: trailing bytes")
    param_names = [n for n in arrays if not n.startswith("opt.")]
    params = ParamStore({n: arrays[n] for n in param_names})
    opt_arrays = {n: arrays[n] for n in arrays if n.startswith("opt.")}
    return spec, params, header.get("extra", {}), opt_arrays
