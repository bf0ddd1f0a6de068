"""Checkpoint and CSV formats.

Checkpoint layout (all integers little-endian)::

    b"OCRN" | version:u8 | header_len:u32 | header (canonical JSON, utf-8)
    | count:u64 | count float64 values

The header holds the network config, the train config snapshot, normalization
metadata, seed, epoch and free-form metadata.  Parameters follow the canonical
order of :meth:`NetworkConfig.param_shapes`.  JSON is written with sorted keys
and no whitespace so that load followed by save reproduces the file bytes.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .resnet import NetworkConfig, WeightBundle
from .training import TrainConfig, TrajectoryRecord

MAGIC = b"OCRN"
VERSION = 1

EVAL_COLUMNS = ["depth", "k", "split", "loss", "accuracy", "param_norm_sq", "output_residual_norm"]
TRAJECTORY_COLUMNS = ["epoch", *EVAL_COLUMNS]


@dataclass
class Checkpoint:
    weights: WeightBundle
    train_config: TrainConfig | None = None
    normalization: dict = field(default_factory=lambda: {"scheme": "none"})
    seed: int | None = None
    epoch: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> NetworkConfig:
        return self.weights.config

    def header(self) -> dict:
        return {
            "network": self.config.to_dict(),
            "train": self.train_config.to_dict() if self.train_config is not None else None,
            "normalization": self.normalization,
            "seed": self.seed,
            "epoch": self.epoch,
            "param_count": self.config.num_params(),
            "meta": self.meta,
        }


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = _canonical_json(ckpt.header())
    payload = ckpt.weights.flat().astype("<f8")
    return b"".join([
        MAGIC, struct.pack("<BI", VERSION, len(header)), header,
        struct.pack("<Q", payload.size), payload.tobytes(),
    ])


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, checkpoint_bytes(ckpt))


def parse_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if raw[:4] != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic {raw[:4]!r})")
    if len(raw) < 9:
        raise FormatError(f"{source}: truncated checkpoint header")
    version, hlen = struct.unpack("<BI", raw[4:9])
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    pos = 9 + hlen
    if len(raw) < pos + 8:
        raise FormatError(f"{source}: truncated checkpoint")
    try:
        header = json.loads(raw[9:pos].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}: corrupt checkpoint header: {e}") from None
    (count,) = struct.unpack("<Q", raw[pos:pos + 8])
    body = raw[pos + 8:]
    if len(body) != 8 * count:
        raise FormatError(f"{source}: payload holds {len(body)} bytes, header announces {count} floats")
    config = NetworkConfig.from_dict(header["network"])
    if count != config.num_params() or header.get("param_count") != count:
        raise FormatError(f"{source}: payload has {count} values, config implies {config.num_params()}")
    weights = WeightBundle.from_flat(config, np.frombuffer(body, dtype="<f8").astype(np.float64))
    train = TrainConfig.from_dict(header["train"]) if header.get("train") is not None else None
    return Checkpoint(weights, train, header.get("normalization", {"scheme": "none"}),
                      header.get("seed"), header.get("epoch"), header.get("meta", {}))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read(), str(path))


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def trajectory_rows(rec: TrajectoryRecord, with_epoch: bool = False) -> list[list[str]]:
    n = rec.depth
    rows = []
    for k in range(n + 1):
        row = [str(n), str(k), rec.split, _fmt(rec.losses[k]), _fmt(rec.accuracies[k]),
               _fmt(rec.param_norm_sq[k]) if k < n else "",
               _fmt(rec.output_residual_norm[k]) if k < n else ""]
        if with_epoch:
            row.insert(0, "" if rec.epoch is None else str(rec.epoch))
        rows.append(row)
    return rows


def trajectory_csv(records, with_epoch: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS if with_epoch else EVAL_COLUMNS)
    for rec in records:
        w.writerows(trajectory_rows(rec, with_epoch))
    return buf.getvalue()


def read_trajectory_csv(text: str) -> list[TrajectoryRecord]:
    """Inverse of :func:`trajectory_csv`; detects the optional epoch column."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header not in (EVAL_COLUMNS, TRAJECTORY_COLUMNS):
        raise FormatError(f"unexpected trajectory CSV header {header}")
    has_epoch = header[0] == "epoch"
    records: list[TrajectoryRecord] = []
    current = None
    for row in reader:
        if has_epoch:
            epoch, row = (int(row[0]) if row[0] else None), row[1:]
        else:
            epoch = None
        n, k = int(row[0]), int(row[1])
        if k == 0:
            current = TrajectoryRecord(row[2], [], [], [], [], epoch)
            records.append(current)
        if current is None or k != len(current.losses):
            raise FormatError(f"trajectory rows out of order at depth {n}, k {k}")
        current.losses.append(float(row[3]))
        current.accuracies.append(float(row[4]))
        if k < n:
            current.param_norm_sq.append(float(row[5]))
            current.output_residual_norm.append(float(row[6]))
        elif row[5] or row[6]:
            raise FormatError("final-depth row must leave block columns empty")
    return records


def bounds_csv(reports) -> str:
    buf = io.StringIO()
    rows = [r.to_dict() for r in reports]
    fields = list(rows[0]) if rows else []
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def read_bounds_csv(text: str) -> list[dict]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed = {}
        for k, v in row.items():
            if v == "":
                parsed[k] = None
            elif v in ("True", "False"):
                parsed[k] = v == "True"
            elif k in ("M", "N"):
                parsed[k] = int(v)
            else:
                try:
                    parsed[k] = float(v)
                except ValueError:
                    parsed[k] = v
        out.append(parsed)
    return out
