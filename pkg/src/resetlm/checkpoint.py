"""Binary checkpoint format.

Layout::

    magic "RESETLM\\0" | major u16 LE | minor u16 LE
    manifest_len u32 LE | manifest (canonical JSON, UTF-8)
    tensor payload (little-endian float32, tensors in manifest order)
    sha256 of everything above (32 bytes)

The manifest records the model config, stage/step/reset counters, the
variant and stage provenance, an echo of the producing schedule, the
tokenizer hash, and a per-tensor table (name, shape, offset, crc32). The
whole-file digest catches any corruption; per-tensor CRCs then localize it.
Canonical JSON plus a fixed tensor order make save -> load -> save
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError
from .model import ModelConfig, TransformerLM
from .training import OptimizerState, TrainState

MAGIC = b"RESETLM\x00"
MAJOR = 1
MINOR = 0


@dataclass
class Checkpoint:
    config: ModelConfig
    stage: str
    step: int
    reset_count: int
    variant: str  # "baseline" | "active_forgetting"
    provenance: list[str]  # stages applied so far, in order
    schedule_echo: dict
    tokenizer_hash: str
    model: TransformerLM
    opt: OptimizerState | None = None

    def train_state(self) -> TrainState:
        opt = self.opt if self.opt is not None else OptimizerState.fresh(self.model)
        return TrainState(
            model=self.model, opt=opt, step=self.step,
            reset_count=self.reset_count, stage=self.stage,
        )


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().to(torch.float32).numpy(), dtype="<f4").tobytes()


def _named_tensors(ckpt: Checkpoint) -> list[tuple[str, torch.Tensor]]:
    out = [(f"model.{n}", p) for n, p in sorted(ckpt.model.named_parameters())]
    if ckpt.opt is not None:
        out.extend((f"opt.m.{n}", t) for n, t in sorted(ckpt.opt.m.items()))
        out.extend((f"opt.v.{n}", t) for n, t in sorted(ckpt.opt.v.items()))
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path, include_optimizer: bool = True) -> None:
    if not include_optimizer:
        ckpt = Checkpoint(**{**ckpt.__dict__, "opt": None})
    tensors = _named_tensors(ckpt)
    table = []
    offset = 0
    blobs = []
    for name, t in tensors:
        raw = _tensor_bytes(t)
        table.append(
            {
                "name": name,
                "shape": list(t.shape),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": {"major": MAJOR, "minor": MINOR},
        "config": ckpt.config.__dict__,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "reset_count": ckpt.reset_count,
        "variant": ckpt.variant,
        "provenance": ckpt.provenance,
        "schedule": ckpt.schedule_echo,
        "tokenizer_hash": ckpt.tokenizer_hash,
        "optimizer_t": None if ckpt.opt is None else ckpt.opt.t,
        "has_optimizer": ckpt.opt is not None,
        "tensors": table,
    }
    manifest_raw = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = MAGIC + struct.pack("<HH", MAJOR, MINOR) + struct.pack("<I", len(manifest_raw))
    body = head + manifest_raw + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)


def _locate_corruption(manifest: dict, payload: bytes, payload_start: int) -> str:
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if zlib.crc32(raw) != entry["crc32"]:
            return (
                f"tensor {entry['name']!r} corrupt "
                f"(file offset {payload_start + entry['offset']}"
                f"..{payload_start + entry['offset'] + entry['nbytes']})"
            )
    return "manifest or header corrupt"


def load_checkpoint(path: str | Path, expected_tokenizer_hash: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 + 32:
        raise IntegrityError(f"checkpoint {path} truncated ({len(raw)} bytes)")
    if raw[: len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path} is not a checkpoint (bad magic)")
    major, minor = struct.unpack_from("<HH", raw, len(MAGIC))
    if major != MAJOR:
        raise IntegrityError(f"unsupported checkpoint major version {major} (expected {MAJOR})")
    (manifest_len,) = struct.unpack_from("<I", raw, len(MAGIC) + 4)
    manifest_start = len(MAGIC) + 8
    payload_start = manifest_start + manifest_len
    body, digest = raw[:-32], raw[-32:]
    if payload_start > len(body):
        raise IntegrityError(f"checkpoint {path} truncated inside manifest")
    manifest = json.loads(body[manifest_start:payload_start].decode("utf-8"))
    payload = body[payload_start:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(
            f"checkpoint {path} failed checksum: "
            + _locate_corruption(manifest, payload, payload_start)
        )
    if expected_tokenizer_hash is not None and manifest["tokenizer_hash"] != expected_tokenizer_hash:
        raise IntegrityError(
            "tokenizer hash mismatch: checkpoint was written with "
            f"{manifest['tokenizer_hash'][:12]}..., supplied tokenizer is "
            f"{expected_tokenizer_hash[:12]}..."
        )

    config = ModelConfig(**manifest["config"])
    model = TransformerLM(config)

    def read_tensor(entry: dict) -> torch.Tensor:
        raw_t = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw_t) != entry["nbytes"]:
            raise IntegrityError(f"checkpoint {path} truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(raw_t, dtype="<f4").reshape(entry["shape"]).copy()
        return torch.from_numpy(arr)

    by_name = {e["name"]: e for e in manifest["tensors"]}
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(read_tensor(by_name[f"model.{name}"]))
    opt = None
    if manifest["has_optimizer"]:
        opt = OptimizerState.fresh(model)
        opt.t = manifest["optimizer_t"]
        for name in opt.m:
            opt.m[name] = read_tensor(by_name[f"opt.m.{name}"])
            opt.v[name] = read_tensor(by_name[f"opt.v.{name}"])
    return Checkpoint(
        config=config,
        stage=manifest["stage"],
        step=manifest["step"],
        reset_count=manifest["reset_count"],
        variant=manifest["variant"],
        provenance=list(manifest["provenance"]),
        schedule_echo=manifest["schedule"],
        tokenizer_hash=manifest["tokenizer_hash"],
        model=model,
        opt=opt,
    )
