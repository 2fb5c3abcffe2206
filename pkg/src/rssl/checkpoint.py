"""Versioned checkpoint container.

Layout: magic line, 8-byte big-endian header length, canonical JSON header,
then the raw little-endian tensor blob in sorted-name order. Canonical JSON
plus fixed tensor ordering makes save -> load -> save byte-identical, and the
content hash covers everything except the hash field itself.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigurationError
from .models import BackboneSpec, EncoderSpec, PredictorSpec

MAGIC = b"RSSL-CKPT\n"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": (torch.float32, np.float32),
    "float64": (torch.float64, np.float64),
    "int64": (torch.int64, np.int64),
    "int32": (torch.int32, np.int32),
    "uint8": (torch.uint8, np.uint8),
    "bool": (torch.bool, np.bool_),
}
_TORCH_NAMES = {t: name for name, (t, _) in _DTYPES.items()}


@dataclass
class Checkpoint:
    encoder_spec: EncoderSpec
    predictor_spec: PredictorSpec
    iteration: int
    dataset: str
    state: dict[str, Tensor]
    content_hash: str
    format_version: int = FORMAT_VERSION


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _spec_dicts(encoder_spec, predictor_spec):
    enc = dataclasses.asdict(encoder_spec)
    enc["backbone"]["conv_channels"] = list(enc["backbone"]["conv_channels"])
    enc["proj_hidden"] = list(enc["proj_hidden"])
    return enc, dataclasses.asdict(predictor_spec)


def _specs_from_dicts(enc, pred):
    backbone = BackboneSpec(
        kind=enc["backbone"]["kind"],
        input_size=enc["backbone"]["input_size"],
        feature_dim=enc["backbone"]["feature_dim"],
        conv_channels=tuple(enc["backbone"]["conv_channels"]),
    )
    encoder = EncoderSpec(
        backbone=backbone,
        proj_hidden=tuple(enc["proj_hidden"]),
        proj_out_dim=enc["proj_out_dim"],
        batchnorm_on_output=enc["batchnorm_on_output"],
    )
    predictor = PredictorSpec(**pred)
    return encoder, predictor


def _tensor_bytes(t: Tensor) -> bytes:
    return t.detach().cpu().contiguous().numpy().tobytes()


def state_checksum(state: dict[str, Tensor]) -> str:
    """SHA-256 over every entry's name, dtype, shape, and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name]
        h.update(name.encode())
        h.update(_TORCH_NAMES[t.dtype].encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(_tensor_bytes(t))
    return h.hexdigest()


def save_checkpoint(
    path,
    state: dict[str, Tensor],
    encoder_spec: EncoderSpec,
    predictor_spec: PredictorSpec,
    iteration: int,
    dataset: str = "",
) -> str:
    """Write the container; returns its content hash."""
    path = Path(path)
    names = sorted(state)
    index = []
    blob = bytearray()
    for name in names:
        t = state[name]
        if t.dtype not in _TORCH_NAMES:
            raise ConfigurationError(f"unsupported checkpoint dtype {t.dtype} for {name}")
        raw = _tensor_bytes(t)
        index.append(
            {
                "name": name,
                "dtype": _TORCH_NAMES[t.dtype],
                "shape": list(t.shape),
                "offset": len(blob),
                "nbytes": len(raw),
            }
        )
        blob.extend(raw)

    enc, pred = _spec_dicts(encoder_spec, predictor_spec)
    header = {
        "format_version": FORMAT_VERSION,
        "encoder_spec": enc,
        "predictor_spec": pred,
        "iteration": int(iteration),
        "dataset": dataset,
        "tensors": index,
    }
    digest = hashlib.sha256()
    digest.update(_canonical(header))
    digest.update(bytes(blob))
    content_hash = digest.hexdigest()
    header["content_hash"] = content_hash

    header_bytes = _canonical(header)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header_bytes).to_bytes(8, "big"))
        f.write(header_bytes)
        f.write(bytes(blob))
    return content_hash


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ConfigurationError(f"{path} is not a checkpoint container")
        header_len = int.from_bytes(f.read(8), "big")
        header = json.loads(f.read(header_len))
        blob = f.read()

    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(
            f"unsupported checkpoint format version {header.get('format_version')}"
        )

    stored_hash = header.pop("content_hash")
    digest = hashlib.sha256()
    digest.update(_canonical(header))
    digest.update(blob)
    if digest.hexdigest() != stored_hash:
        raise ConfigurationError(f"checkpoint {path} is corrupt (content hash mismatch)")

    state = {}
    for entry in header["tensors"]:
        tdtype, ndtype = _DTYPES[entry["dtype"]]
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=ndtype).copy().reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr).to(tdtype)

    encoder_spec, predictor_spec = _specs_from_dicts(
        header["encoder_spec"], header["predictor_spec"]
    )
    return Checkpoint(
        encoder_spec=encoder_spec,
        predictor_spec=predictor_spec,
        iteration=header["iteration"],
        dataset=header["dataset"],
        state=state,
        content_hash=stored_hash,
    )
