import json
import struct

import numpy as np
import pytest

from mmsr.features import FeatureTable, load_feature_table, save_feature_table


def make_table(n=7, dim=5, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureTable(
        channel="image",
        dim=dim,
        entries={f"i{j:03d}": rng.standard_normal(dim).astype(np.float32) for j in range(n)},
    )


def test_round_trip(tmp_path):
    table = make_table()
    save_feature_table(table, tmp_path / "f.bin", tmp_path / "f.ids.json")
    back = load_feature_table(tmp_path / "f.bin", tmp_path / "f.ids.json", "image")
    assert back.dim == table.dim
    assert sorted(back.entries) == sorted(table.entries)
    for item in table.entries:
        np.testing.assert_array_equal(back.entries[item], table.entries[item])


def test_binary_layout_manually_decoded(tmp_path):
    table = make_table(n=2, dim=3, seed=1)
    save_feature_table(table, tmp_path / "f.bin", tmp_path / "f.ids.json")
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:8] == b"MMSRFEAT"
    count, dim = struct.unpack_from("<II", raw, 8)
    assert (count, dim) == (2, 3)
    ids = json.loads((tmp_path / "f.ids.json").read_text())
    offset = 16
    for _ in range(count):
        (idx,) = struct.unpack_from("<I", raw, offset)
        values = struct.unpack_from("<3f", raw, offset + 4)
        np.testing.assert_allclose(values, table.entries[ids[idx]], rtol=0, atol=0)
        offset += 4 + 12
    assert offset == len(raw)


def test_bad_magic_rejected(tmp_path):
    (tmp_path / "f.bin").write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    (tmp_path / "f.ids.json").write_text("[]")
    with pytest.raises(ValueError, match="magic"):
        load_feature_table(tmp_path / "f.bin", tmp_path / "f.ids.json", "image")


def test_rejects_non_finite_vectors():
    with pytest.raises(ValueError, match="finite"):
        FeatureTable(channel="image", dim=2, entries={"a": np.array([1.0, np.nan])})


def test_rejects_wrong_length():
    with pytest.raises(ValueError, match="shape"):
        FeatureTable(channel="image", dim=3, entries={"a": np.zeros(2)})


def test_missing_item_is_absent_not_zero():
    table = make_table(n=3)
    assert table.get("i999") is None
    assert "i999" not in table


def test_copy_is_deep():
    table = make_table(n=2)
    clone = table.copy()
    clone.entries["i000"][0] = 99.0
    assert table.entries["i000"][0] != 99.0
