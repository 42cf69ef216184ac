"""Checkpoint files and the append-only metrics results file.

Checkpoint layout (all integers little-endian)::

    b"STSCCKPT" | u32 version | u32 header_len | header (UTF-8 JSON)
    | u32 n_arrays | n_arrays x record | u32 CRC32 of all preceding bytes

    record = u16 name_len | name | u8 tag_len | dtype tag | u8 ndim
             | ndim x u64 dim | u64 nbytes | raw bytes
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import torch

from .metrics import psnr_from_mse

MAGIC = b"STSCCKPT"
FORMAT_VERSION = 1

_DTYPE_TAGS = {
    torch.float32: "f32",
    torch.float64: "f64",
    torch.float16: "f16",
    torch.int64: "i64",
    torch.int32: "i32",
    torch.uint8: "u8",
    torch.bool: "b1",
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
_NP_DTYPES = {"f32": "<f4", "f64": "<f8", "f16": "<f2", "i64": "<i8", "i32": "<i4", "u8": "u1", "b1": "?"}


class CheckpointError(Exception):
    """Malformed, truncated or tampered checkpoint."""


class CheckpointVersionError(CheckpointError):
    pass


def _encode_params(params: Mapping[str, torch.Tensor]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_TAGS:
            raise TypeError(f"unsupported dtype {t.dtype} for array {name!r}")
        tag = _DTYPE_TAGS[t.dtype].encode()
        raw = t.numpy().astype(_NP_DTYPES[tag.decode()], copy=False).tobytes()
        name_b = name.encode("utf-8")
        out.write(struct.pack("<H", len(name_b)) + name_b)
        out.write(struct.pack("<B", len(tag)) + tag)
        out.write(struct.pack("<B", t.dim()))
        out.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        out.write(struct.pack("<Q", len(raw)) + raw)
    return out.getvalue()


def checkpoint_bytes(params: Mapping[str, torch.Tensor], header: Mapping[str, Any]) -> bytes:
    full_header = {"format_version": FORMAT_VERSION, **header}
    header_b = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header_b)) + header_b + _encode_params(params)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path: str | Path, params: Mapping[str, torch.Tensor], header: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(params, header))
    return path


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(buf: bytes) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    if len(buf) < len(MAGIC) + 12 or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    (version,) = struct.unpack("<I", buf[len(MAGIC) : len(MAGIC) + 4])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint format_version {version}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch: checkpoint is truncated or corrupted")

    r = _Reader(body)
    r.take(len(MAGIC) + 4)
    (header_len,) = r.unpack("<I")
    header = json.loads(r.take(header_len).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"header format_version {header.get('format_version')!r}")
    (count,) = r.unpack("<I")
    params: OrderedDict[str, torch.Tensor] = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (tag_len,) = r.unpack("<B")
        tag = r.take(tag_len).decode("ascii")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag!r} for array {name!r}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype=_NP_DTYPES[tag]).reshape(shape)
        params[name] = torch.from_numpy(arr.copy())
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after payload")
    return params, header


def load_checkpoint(path: str | Path) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# metrics results file
# ---------------------------------------------------------------------------

COLUMNS = ("experiment_id", "channel", "snr_db", "round", "mse", "psnr_db", "ssim", "extras_json")
PSNR_MSE_TOL_DB = 1e-6


class MetricsSchemaError(ValueError):
    pass


@dataclass
class MetricsRow:
    experiment_id: str
    channel: str
    snr_db: float
    round: int
    mse: float
    psnr_db: float
    ssim: float | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_mse(cls, experiment_id: str, channel: str, snr_db: float, round: int, mse: float,
                 ssim: float | None = None, **extras: Any) -> "MetricsRow":
        return cls(experiment_id, channel, float(snr_db), int(round), float(mse),
                   psnr_from_mse(float(mse)), None if ssim is None else float(ssim), dict(extras))

    def validate(self) -> None:
        if not self.experiment_id:
            raise MetricsSchemaError("experiment_id must be non-empty")
        for name in ("snr_db", "mse", "psnr_db"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise MetricsSchemaError(f"{name} must be finite, got {v!r}")
        if self.ssim is not None and not math.isfinite(self.ssim):
            raise MetricsSchemaError(f"ssim must be finite or empty, got {self.ssim!r}")
        if self.mse < 0:
            raise MetricsSchemaError("mse must be non-negative")
        if abs(psnr_from_mse(self.mse) - self.psnr_db) > PSNR_MSE_TOL_DB:
            raise MetricsSchemaError(
                f"psnr_db {self.psnr_db} inconsistent with mse {self.mse} (expected {psnr_from_mse(self.mse)})"
            )

    def to_record(self) -> list[str]:
        return [
            self.experiment_id,
            self.channel,
            repr(float(self.snr_db)),
            str(int(self.round)),
            repr(float(self.mse)),
            repr(float(self.psnr_db)),
            "" if self.ssim is None else repr(float(self.ssim)),
            json.dumps(self.extras, sort_keys=True),
        ]


def write_metrics(path: str | Path, rows: Iterable[MetricsRow]) -> int:
    """Append rows to a tab-separated results file, writing the header on creation.

    Every row is validated before it is written and the file is flushed after each
    row. Returns the number of rows appended.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    n = 0
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        if new:
            writer.writerow(COLUMNS)
            fh.flush()
        for row in rows:
            row.validate()
            writer.writerow(row.to_record())
            fh.flush()
            n += 1
    return n


def read_metrics(path: str | Path) -> list[MetricsRow]:
    path = Path(path)
    if not path.exists():
        return []
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != COLUMNS:
            raise MetricsSchemaError(f"{path}: unexpected columns {header}")
        for rec in reader:
            exp, channel, snr, rnd, m, p, s, extras = rec
            rows.append(MetricsRow(exp, channel, float(snr), int(rnd), float(m), float(p),
                                   None if s == "" else float(s), json.loads(extras)))
    return rows
