import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from bblab.errors import DegenerateInput
from bblab.grid import ScalarField, TorusGrid
from bblab.models import ExperimentConfig, GridConfig
from bblab.persistence import (
    HEADER_BYTES,
    ArtifactWriter,
    config_sha256,
    decode_field,
    encode_field,
    load_field,
    save_field,
    sha256_file,
    write_csv,
    write_json,
)


def test_field_header_layout():
    grid = TorusGrid(2, 8)
    data = encode_field(ScalarField.constant(grid, 1.5))
    assert data[:4] == b"BBF1"
    assert data[4:8] == (2).to_bytes(4, "little")
    assert data[8:12] == (8).to_bytes(4, "little")
    assert len(data) == HEADER_BYTES + 8 * 64


def test_saved_field_loads_bitwise(tmp_path):
    grid = TorusGrid(3, 8)
    values = np.random.default_rng(7).normal(size=grid.shape)
    path = save_field(tmp_path / "nested" / "u.bbf", ScalarField(grid, values))
    loaded = load_field(path)
    assert loaded.grid == grid
    assert_array_equal(loaded.values.view(np.uint64), values.view(np.uint64))


@pytest.mark.parametrize(
    "data", [b"", b"BBF2" + bytes(8), b"BBF1" + np.array([2, 8], dtype="<u4").tobytes() + bytes(7)]
)
def test_decode_rejects_malformed_data(data):
    with pytest.raises(DegenerateInput):
        decode_field(data)


def test_json_is_sorted_and_finite(tmp_path):
    path = write_json(tmp_path / "r.json", {"b": np.float64(1.0), "a": [np.inf, np.arange(2)]})
    text = path.read_text()
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [None, [0, 1]], "b": 1.0}


def test_csv_keeps_full_precision(tmp_path):
    path = write_csv(tmp_path / "t.csv", [{"r": 0.1, "psi": 1 / 3, "extra": 1}], ["r", "psi"])
    lines = path.read_text().splitlines()
    assert lines[0] == "r,psi"
    assert float(lines[1].split(",")[1]) == 1 / 3


def test_artifact_writer_records_hashes(tmp_path):
    writer = ArtifactWriter(tmp_path / "out")
    grid = TorusGrid(2, 8)
    path = writer.field("m.bbf", ScalarField.constant(grid, 0.0), kind="control")
    writer.json("report.json", {"ok": True})
    assert [r.path for r in writer.records] == ["m.bbf", "report.json"]
    record = writer.records[0]
    assert record.kind == "control"
    assert record.sha256 == sha256_file(path)
    assert record.bytes == HEADER_BYTES + 8 * 64


def test_config_hash_tracks_content():
    base = ExperimentConfig()
    assert config_sha256(base) == config_sha256(ExperimentConfig())
    assert config_sha256(base) != config_sha256(ExperimentConfig(grid=GridConfig(n=32)))
