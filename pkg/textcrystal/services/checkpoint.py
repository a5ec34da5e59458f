"""
Self-contained model checkpoints

File layout (little-endian):
    b"TXCK" | uint32 header length | JSON header | uint64 blob length | float32 blob

The header records format version, all configs, the schedules, the parameter
order with shapes, a SHA-256 of the blob, the training RNG state, the epoch,
the loss history and the training-set atom-count histogram. The blob holds
every parameter flattened in header order.
"""

import base64
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import torch
from pydantic import ValidationError

from textcrystal.core.exceptions import CheckpointError
from textcrystal.schemas.config import DenoiserConfig, ScheduleConfig, TextEncoderConfig, TrainConfig
from textcrystal.services.denoiser import Denoiser, init_denoiser
from textcrystal.services.schedules import NoiseSchedules, build_schedules

logger = logging.getLogger(__name__)

MAGIC = b"TXCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything sampling needs; parameters are held as float32 arrays"""

    schedule: ScheduleConfig
    denoiser: DenoiserConfig
    train: TrainConfig
    params: Dict[str, np.ndarray]
    text_encoder: Optional[TextEncoderConfig] = None  # None: external embeddings
    rng_state: str = ""
    epoch: int = 0
    loss_history: List[Dict[str, float]] = field(default_factory=list)
    num_atoms_histogram: Dict[int, int] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: Denoiser, schedule: ScheduleConfig, train: TrainConfig, **kwargs) -> "Checkpoint":
        params = {
            name: tensor.detach().cpu().to(torch.float32).numpy().copy()
            for name, tensor in model.state_dict().items()
        }
        return cls(schedule=schedule, denoiser=model.config, train=train, params=params, **kwargs)

    def build_schedules(self) -> NoiseSchedules:
        return build_schedules(self.schedule, k=self.denoiser.k_classes)

    def build_model(self, dtype: torch.dtype = torch.float32) -> Denoiser:
        model = init_denoiser(self.denoiser, self.schedule.timesteps)
        state = {name: torch.from_numpy(arr.copy()) for name, arr in self.params.items()}
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as e:
            raise CheckpointError(f"Checkpoint parameters do not fit the denoiser: {e}")
        model.to(dtype)
        model.eval()
        return model

    def header(self, blob_sha256: str) -> Dict[str, Any]:
        return {
            "version": self.version,
            "schedule": self.schedule.model_dump(),
            "schedules": self.build_schedules().describe(),
            "denoiser": self.denoiser.model_dump(),
            "train": self.train.model_dump(),
            "text_encoder": self.text_encoder.model_dump() if self.text_encoder else None,
            "params": [[name, list(arr.shape)] for name, arr in self.params.items()],
            "blob_sha256": blob_sha256,
            "rng_state": self.rng_state,
            "epoch": self.epoch,
            "loss_history": self.loss_history,
            "num_atoms_histogram": {str(k): v for k, v in sorted(self.num_atoms_histogram.items())},
            "provenance": self.provenance,
        }


def encode_rng_state(generator: torch.Generator) -> str:
    return base64.b64encode(generator.get_state().numpy().tobytes()).decode("ascii")


def decode_rng_state(state: str) -> torch.Generator:
    generator = torch.Generator()
    if state:
        raw = np.frombuffer(base64.b64decode(state), dtype=np.uint8).copy()
        generator.set_state(torch.from_numpy(raw))
    return generator


def _blob(params: Dict[str, np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in params.values())


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = _blob(ckpt.params)
    header = json.dumps(ckpt.header(hashlib.sha256(blob).hexdigest()), sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
    logger.info(f"💾 Checkpoint saved to {path} (epoch {ckpt.epoch}, {len(blob)} parameter bytes)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a textcrystal checkpoint")
    try:
        (header_len,) = struct.unpack_from("<I", data, 4)
        header_end = 8 + header_len
        if header_end > len(data):
            raise CheckpointError(f"{path}: truncated header")
        header = json.loads(data[8:header_end].decode("utf-8"))
        (blob_len,) = struct.unpack_from("<Q", data, header_end)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({e})")

    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header.get('version')} is not supported (expected {FORMAT_VERSION})"
        )
    blob = data[header_end + 8:]
    if len(blob) != blob_len:
        raise CheckpointError(f"{path}: truncated parameter blob ({len(blob)} of {blob_len} bytes)")
    if hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise CheckpointError(f"{path}: parameter blob checksum mismatch")

    flat = np.frombuffer(blob, dtype="<f4")
    params: Dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in header["params"]:
        size = int(np.prod(shape)) if shape else 1
        if offset + size > flat.size:
            raise CheckpointError(f"{path}: parameter table exceeds blob")
        params[name] = flat[offset:offset + size].reshape(shape).astype(np.float32)
        offset += size
    if offset != flat.size:
        raise CheckpointError(f"{path}: blob has {flat.size - offset} unexpected trailing values")

    try:
        ckpt = Checkpoint(
            schedule=ScheduleConfig.model_validate(header["schedule"]),
            denoiser=DenoiserConfig.model_validate(header["denoiser"]),
            train=TrainConfig.model_validate(header["train"]),
            text_encoder=(TextEncoderConfig.model_validate(header["text_encoder"])
                          if header.get("text_encoder") else None),
            params=params,
            rng_state=header.get("rng_state", ""),
            epoch=int(header.get("epoch", 0)),
            loss_history=list(header.get("loss_history", [])),
            num_atoms_histogram={int(k): int(v) for k, v in header.get("num_atoms_histogram", {}).items()},
            provenance=dict(header.get("provenance") or {}),
            version=header["version"],
        )
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"{path}: incomplete checkpoint header ({e})")
    logger.info(f"✅ Checkpoint loaded from {path} (epoch {ckpt.epoch})")
    return ckpt
