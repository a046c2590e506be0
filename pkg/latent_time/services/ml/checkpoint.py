"""
Binary checkpoints.

    [8 bytes little-endian header length][UTF-8 JSON header][float64 '<f8' payload]

The header carries the model spec, training iteration, a digest of the
sampling rng state and one {name, shape, offset, nbytes} entry per tensor.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

from latent_time import __version__
from latent_time.exceptions import CheckpointIntegrityError, ContractError, SpecMismatchError
from latent_time.services.autodiff import pack_parameters, unpack_parameters
from latent_time.services.ml.latent_time_model import LatentTimeModel, ModelSpec, build_model
from latent_time.services.ode_solver import SolverConfig

FORMAT = "ltnode-checkpoint"
FORMAT_VERSION = 1
LENGTH = struct.Struct("<Q")


def save_checkpoint(model: LatentTimeModel, path: str | Path, iteration: int = 0, rng_digest: str = "") -> Path:
    path = Path(path)
    table, payload = pack_parameters(model.parameters)
    header = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "library_version": __version__,
        "model_spec": model.spec.to_dict(),
        "solver": asdict(model.solver),
        "iteration": int(iteration),
        "rng_digest": rng_digest,
        "parameters": table,
        "payload_bytes": len(payload),
    }
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(LENGTH.pack(len(raw_header)))
        f.write(raw_header)
        f.write(payload)
    os.replace(tmp, path)
    return path


def read_checkpoint_header(path: str | Path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < LENGTH.size:
        raise CheckpointIntegrityError(f"{path}: file too short for a checkpoint header")
    (header_len,) = LENGTH.unpack_from(blob)
    if LENGTH.size + header_len > len(blob):
        raise CheckpointIntegrityError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(blob[LENGTH.size:LENGTH.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path}: unreadable header ({exc})") from exc
    if header.get("format") != FORMAT:
        raise CheckpointIntegrityError(f"{path}: not a {FORMAT} file")
    payload = blob[LENGTH.size + header_len:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointIntegrityError(
            f"{path}: payload has {len(payload)} bytes, header declares {header.get('payload_bytes')}"
        )
    return header, payload


def _spec_mismatches(expected: ModelSpec, found: ModelSpec) -> dict:
    want, got = expected.to_dict(), found.to_dict()
    return {k: (want[k], got[k]) for k in want if want[k] != got[k]}


def load_checkpoint(path: str | Path, expected_spec: ModelSpec | None = None) -> tuple[LatentTimeModel, dict]:
    """Returns (model, header). Nothing is returned unless the whole file checks out."""
    header, payload = read_checkpoint_header(path)
    try:
        spec = ModelSpec.from_dict(header["model_spec"])
    except (TypeError, KeyError, ContractError) as exc:
        raise CheckpointIntegrityError(f"{path}: invalid model spec in header ({exc})") from exc
    if expected_spec is not None:
        mismatches = _spec_mismatches(expected_spec, spec)
        if mismatches:
            raise SpecMismatchError(mismatches)

    try:
        arrays = unpack_parameters(header["parameters"], payload)
    except ContractError as exc:
        raise CheckpointIntegrityError(f"{path}: {exc}") from exc

    model = build_model(spec, seed=0, solver=SolverConfig(**header.get("solver", {})))
    layout = {name: tuple(p.shape) for name, p in model.parameters.items()}
    stored = {name: tuple(a.shape) for name, a in arrays.items()}
    if layout != stored:
        diff = {
            name: (layout.get(name), stored.get(name))
            for name in sorted(set(layout) | set(stored)) if layout.get(name) != stored.get(name)
        }
        raise SpecMismatchError(diff)
    model.load_parameter_values(arrays)
    return model, header
