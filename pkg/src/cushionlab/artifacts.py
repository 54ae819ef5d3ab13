"""Binary container shared by checkpoints, prefix caches and calibration
sidecars.

Layout (little-endian)::

    b"CCLB" | u16 version | u32 header_len | header (UTF-8 JSON)
    u32 n_tensors
    repeat: u16 name_len | name (UTF-8) | u8 ndim | ndim x u32 dims | f32 data
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .model import PrefixCache, TransformerConfig, TransformerModel
from .quant import CalibrationStats, TapStats
from .tensor import Tensor

MAGIC = b"CCLB"
VERSION = 1


class ArtifactFormatError(ValueError):
    pass


def write_container(path: str | Path, header: dict[str, Any], tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<HB", len(raw), arr.ndim))
        buf.write(raw)
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_container(path: str | Path, kind: str | None = None) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactFormatError(f"cannot read artifact {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise ArtifactFormatError(f"{path}: bad magic bytes {blob[:4]!r}")
    try:
        version, hlen = struct.unpack_from("<HI", blob, 4)
        if version != VERSION:
            raise ArtifactFormatError(f"{path}: unsupported format version {version}")
        pos = 10
        header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            nlen, ndim = struct.unpack_from("<HB", blob, pos)
            pos += 3
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 4 * n > len(blob):
                raise ArtifactFormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactFormatError(f"{path}: corrupt artifact ({exc})") from exc
    if kind is not None and header.get("kind") != kind:
        raise ArtifactFormatError(f"{path}: expected a {kind!r} artifact, found {header.get('kind')!r}")
    return header, tensors


# -- typed wrappers ---------------------------------------------------------------


def bundled_model_path() -> Path:
    """Pretrained toy checkpoint shipped with the package."""
    return Path(str(resources.files("cushionlab") / "data" / "toy_model.cclb"))


def save_model(model: TransformerModel, path: str | Path) -> None:
    meta = {k: v for k, v in model.meta.items() if k != "train_losses"}
    header = {"kind": "model", "config": asdict(model.config), "meta": meta}
    write_container(path, header, {k: v.data for k, v in model.params.items()})


def load_model(path: str | Path) -> TransformerModel:
    header, tensors = read_container(path, "model")
    try:
        config = TransformerConfig(**header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactFormatError(f"{path}: bad model config ({exc})") from exc
    model = TransformerModel(config, {k: Tensor(v) for k, v in tensors.items()}, dict(header.get("meta", {})))
    if model["tok_emb"].shape[0] != config.vocab_size:
        raise ArtifactFormatError(f"{path}: embedding rows do not match vocab_size")
    return model.freeze()


def save_prefix(prefix: PrefixCache, path: str | Path, extra: dict[str, Any] | None = None) -> None:
    header = {"kind": "prefix", "provenance": prefix.provenance, "tokens": prefix.tokens,
              "n_layers": len(prefix.keys), **(extra or {})}
    tensors: dict[str, np.ndarray] = {}
    for i, (k, v) in enumerate(zip(prefix.keys, prefix.values)):
        tensors[f"L{i}.k"] = k.data
        tensors[f"L{i}.v"] = v.data
    write_container(path, header, tensors)


def load_prefix(path: str | Path) -> PrefixCache:
    header, tensors = read_container(path, "prefix")
    n = int(header["n_layers"])
    try:
        keys = [Tensor(tensors[f"L{i}.k"]) for i in range(n)]
        values = [Tensor(tensors[f"L{i}.v"]) for i in range(n)]
    except KeyError as exc:
        raise ArtifactFormatError(f"{path}: missing prefix block {exc}") from exc
    return PrefixCache(keys, values, provenance=header["provenance"], tokens=header.get("tokens"))


def save_stats(stats: CalibrationStats, path: str | Path, extra: dict[str, Any] | None = None) -> None:
    header = {
        "kind": "calibration",
        "count": stats.count,
        "taps": {name: [st.min, st.max] for name, st in stats.taps.items()},
        **(extra or {}),
    }
    write_container(path, header, {f"{name}.absmax": st.absmax for name, st in stats.taps.items()})


def load_stats(path: str | Path) -> CalibrationStats:
    header, tensors = read_container(path, "calibration")
    taps = {}
    for name, (lo, hi) in header["taps"].items():
        taps[name] = TapStats(float(lo), float(hi), tensors[f"{name}.absmax"].astype(np.float64))
    return CalibrationStats(taps, int(header.get("count", 0)))


def read_header(path: str | Path) -> dict[str, Any]:
    return read_container(path)[0]
