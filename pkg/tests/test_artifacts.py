from __future__ import annotations

import struct

import numpy as np
import pytest

from cushionlab.artifacts import (
    MAGIC,
    ArtifactFormatError,
    load_model,
    load_prefix,
    load_stats,
    read_container,
    read_header,
    save_model,
    save_prefix,
    save_stats,
    write_container,
)
from cushionlab.model import extract_prefix_cache, forward
from cushionlab.quant import calibrate

from .conftest import text_ids


def test_model_round_trip(model, tmp_path, rng):
    path = tmp_path / "m.cclb"
    save_model(model, path)
    back = load_model(path)
    assert back.config == model.config and back.checksum() == model.checksum()
    tokens = text_ids(rng, 10)
    np.testing.assert_array_equal(forward(back, tokens)[0].data, forward(model, tokens)[0].data)
    assert not any(p.requires_grad for p in back.parameters())


def test_prefix_round_trip(llama, tmp_path):
    prefix = extract_prefix_cache(llama, [256, 10, 70])
    save_prefix(prefix, tmp_path / "p.cclb", {"lam": 0.01})
    back = load_prefix(tmp_path / "p.cclb")
    assert back.provenance == "greedy-init" and back.tokens == [256, 10, 70]
    for a, b in zip(prefix.parameters(), back.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    assert read_header(tmp_path / "p.cclb")["lam"] == 0.01


def test_stats_round_trip(llama, tmp_path, rng):
    stats = calibrate(llama, text_ids(rng, 12, 2))
    save_stats(stats, tmp_path / "s.cclb")
    back = load_stats(tmp_path / "s.cclb")
    assert back.names() == stats.names() and back.count == 2
    for name in stats.names():
        assert back[name].min == stats[name].min and back[name].max == stats[name].max
        np.testing.assert_allclose(back[name].absmax, stats[name].absmax, rtol=1e-7)


def test_layout(tmp_path):
    write_container(tmp_path / "x.cclb", {"kind": "t"}, {"a": np.arange(6, dtype=np.float32).reshape(2, 3)})
    blob = (tmp_path / "x.cclb").read_bytes()
    assert blob[:4] == MAGIC
    version, hlen = struct.unpack_from("<HI", blob, 4)
    assert version == 1 and blob[10 : 10 + hlen] == b'{"kind": "t"}'
    assert blob.endswith(np.arange(6, dtype="<f4").tobytes())


def test_saving_is_byte_stable(llama, tmp_path):
    save_model(llama, tmp_path / "a.cclb")
    save_model(llama, tmp_path / "b.cclb")
    assert (tmp_path / "a.cclb").read_bytes() == (tmp_path / "b.cclb").read_bytes()


def test_bad_magic(tmp_path):
    (tmp_path / "x.cclb").write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ArtifactFormatError, match="magic"):
        read_container(tmp_path / "x.cclb")


def test_truncated(llama, tmp_path):
    save_model(llama, tmp_path / "m.cclb")
    blob = (tmp_path / "m.cclb").read_bytes()
    (tmp_path / "t.cclb").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ArtifactFormatError):
        load_model(tmp_path / "t.cclb")


def test_wrong_kind(llama, tmp_path):
    save_prefix(extract_prefix_cache(llama, [256]), tmp_path / "p.cclb")
    with pytest.raises(ArtifactFormatError, match="expected a 'model'"):
        load_model(tmp_path / "p.cclb")


def test_missing_file(tmp_path):
    with pytest.raises(ArtifactFormatError):
        read_container(tmp_path / "absent.cclb")
