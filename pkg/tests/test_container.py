import json

import numpy as np
import pytest

from multivit2.container import (canonical_hash, load_checkpoint, read_array, save_checkpoint, write_array)
from multivit2.errors import DataError, MissingArtifactError


def test_array_roundtrip_and_header(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_array(a, tmp_path / "a.json", "thing", {"note": 1})
    back, header = read_array(tmp_path / "a.json", "thing")
    assert back.tobytes() == a.tobytes()
    assert header["dims"] == [2, 3, 4] and header["endianness"] == "little" and header["note"] == 1


def test_array_errors(tmp_path):
    write_array(np.ones(4), tmp_path / "a.json", "thing")
    with pytest.raises(DataError):
        read_array(tmp_path / "a.json", "other")
    (tmp_path / "a.raw").write_bytes(b"\0" * 20)
    with pytest.raises(DataError):
        read_array(tmp_path / "a.json")
    (tmp_path / "a.raw").unlink()
    with pytest.raises(DataError):
        read_array(tmp_path / "a.json")
    (tmp_path / "b.json").write_text("{not json")
    with pytest.raises(DataError):
        read_array(tmp_path / "b.json")


def test_checkpoint_roundtrip_and_checksum(tmp_path):
    tensors = {"w": np.random.default_rng(0).normal(size=(3, 2)).astype(np.float32), "b": np.zeros(2)}
    save_checkpoint(tmp_path / "c.json", "demo", {"width": 3}, tensors, {"config_hash": "abc"})
    desc, back, header = load_checkpoint(tmp_path / "c.json", "demo")
    assert desc == {"width": 3} and header["extra"]["config_hash"] == "abc"
    assert back["w"].tobytes() == tensors["w"].tobytes()
    raw = tmp_path / "c.raw"
    blob = bytearray(raw.read_bytes())
    blob[0] ^= 1
    raw.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="checksum"):
        load_checkpoint(tmp_path / "c.json")


def test_checkpoint_missing_names_stage(tmp_path):
    with pytest.raises(MissingArtifactError, match="pretrain-ae") as exc:
        load_checkpoint(tmp_path / "none.json", stage="pretrain-ae")
    assert exc.value.exit_code == 2


def test_canonical_hash_order_independent():
    assert canonical_hash({"a": 1, "b": [1, 2]}) == canonical_hash({"b": [1, 2], "a": 1})
    assert canonical_hash({"a": 1}) != canonical_hash({"a": 2})
    assert len(canonical_hash({})) == 16


def test_json_sorted(tmp_path):
    write_array(np.ones(1), tmp_path / "a.json", "x", {"zz": 1, "aa": 2})
    keys = list(json.loads((tmp_path / "a.json").read_text()).keys())
    assert keys == sorted(keys)
