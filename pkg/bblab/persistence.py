"""Artifact files: BBF1 fields, JSON reports, CSV plot data, content hashes."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from bblab.errors import DegenerateInput
from bblab.grid import ScalarField, TorusGrid
from bblab.models import ArtifactRecord, ExperimentConfig

logger = logging.getLogger(__name__)

MAGIC = b"BBF1"
HEADER_BYTES = 12


def encode_field(field: ScalarField) -> bytes:
    header = MAGIC + np.array([field.grid.d, field.grid.n], dtype="<u4").tobytes()
    return header + np.ascontiguousarray(field.values, dtype="<f8").tobytes(order="C")


def decode_field(data: bytes) -> ScalarField:
    if len(data) < HEADER_BYTES or data[:4] != MAGIC:
        raise DegenerateInput("Not a BBF1 field")
    d, n = (int(v) for v in np.frombuffer(data[4:HEADER_BYTES], dtype="<u4"))
    grid = TorusGrid(d, n)
    expected = HEADER_BYTES + 8 * grid.size
    if len(data) != expected:
        raise DegenerateInput(f"BBF1 payload has {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data[HEADER_BYTES:], dtype="<f8").astype(np.float64)
    return ScalarField(grid, values.reshape(grid.shape))


def save_field(path: Path, field: ScalarField) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_field(field))
    return path


def load_field(path: Path) -> ScalarField:
    return decode_field(Path(path).read_bytes())


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def write_json(path: Path, data: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(data), f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return path


def write_csv(path: Path, rows: Iterable[dict], columns: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format(row.get(k)) for k in columns})
    return path


def _format(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_sha256(config: ExperimentConfig) -> str:
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


class ArtifactWriter:
    """Writes artifacts under one directory and records each with its content hash."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.records: list[ArtifactRecord] = []

    def _record(self, path: Path, kind: str) -> Path:
        record = ArtifactRecord(
            path=path.relative_to(self.root).as_posix(),
            kind=kind,
            sha256=sha256_file(path),
            bytes=path.stat().st_size,
        )
        self.records.append(record)
        logger.debug("artifact %s (%s) %s", record.path, kind, record.sha256[:12])
        return path

    def field(self, name: str, field: ScalarField, kind: str = "field") -> Path:
        return self._record(save_field(self.root / name, field), kind)

    def json(self, name: str, data: Any, kind: str = "report") -> Path:
        return self._record(write_json(self.root / name, data), kind)

    def csv(self, name: str, rows: Iterable[dict], columns: list[str], kind: str = "plot") -> Path:
        return self._record(write_csv(self.root / name, rows, columns), kind)
