"""Model files: a self-describing little-endian binary container and a JSON export.

Binary layout::

    b"FJMM" | u32 version | u32 section count
    per section: u16 name length | name (utf-8) | u8 dtype code | u8 ndim |
                 u64 shape[ndim] | raw little-endian data

dtype codes: ``f`` float64, ``i`` int64, ``b`` uint8 (JSON metadata bytes).
Both formats reload bit-exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import MeshTopology, MorphableModel

MAGIC = b"FJMM"
VERSION = 1
_DTYPES = {"f": "<f8", "i": "<i8", "b": "u1"}


class ModelFormatError(ValueError):
    pass


def _sections(model: MorphableModel) -> dict:
    topo = model.topology
    strips = topo.contour_strips
    return {
        "mean": model.mean,
        "subject_basis": model.subject_basis,
        "subject_sigma": model.subject_sigma,
        "expression_basis": model.expression_basis,
        "expression_sigma": model.expression_sigma,
        "triangles": topo.triangles,
        "landmark_vertex": topo.landmark_vertex,
        "contour_nominal": topo.contour_nominal,
        "contour_strip_lengths": np.array([len(s) for s in strips], dtype=np.int64),
        "contour_strips": np.concatenate(strips).astype(np.int64),
        "symmetry": topo.symmetry,
        "meta": np.frombuffer(json.dumps(model.meta, sort_keys=True).encode(), dtype=np.uint8),
    }


def _from_sections(sec: dict) -> MorphableModel:
    try:
        lengths = sec["contour_strip_lengths"]
        strips = np.split(sec["contour_strips"], np.cumsum(lengths)[:-1])
        topo = MeshTopology(sec["triangles"], len(sec["mean"]), sec["landmark_vertex"],
                            sec["contour_nominal"], tuple(strips), sec["symmetry"])
        meta = json.loads(bytes(sec["meta"]).decode()) if "meta" in sec else {}
        return MorphableModel(topo, sec["mean"], sec["subject_basis"], sec["subject_sigma"],
                              sec["expression_basis"], sec["expression_sigma"], meta)
    except KeyError as exc:
        raise ModelFormatError(f"model file lacks section {exc}") from None


def save_model(model: MorphableModel, path) -> None:
    sec = _sections(model)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(sec)))
        for name, arr in sec.items():
            a = np.asarray(arr)
            code = "b" if a.dtype == np.uint8 else ("i" if a.dtype.kind in "iu" else "f")
            a = np.ascontiguousarray(a, dtype=_DTYPES[code])
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw + code.encode() + struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            f.write(a.tobytes())


def load_model(path) -> MorphableModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {version}")
    pos = 12
    sec = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode()
            pos += n
            code = chr(data[pos])
            ndim = data[pos + 1]
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            dt = np.dtype(_DTYPES[code])
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(data):
                raise ModelFormatError(f"{path}: truncated section {name!r}")
            sec[name] = np.frombuffer(data, dtype=dt, count=size // dt.itemsize,
                                      offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt model file ({exc})") from None
    return _from_sections(sec)


def model_to_json(model: MorphableModel) -> str:
    """Lossless text export (floats are written with round-trip precision)."""
    out = {"format": "facejitter-model", "version": VERSION}
    for name, arr in _sections(model).items():
        if name == "meta":
            out["meta"] = model.meta
        else:
            out[name] = {"dtype": "int64" if arr.dtype.kind in "iu" else "float64",
                         "shape": list(arr.shape), "data": arr.ravel().tolist()}
    return json.dumps(out)


def model_from_json(text: str) -> MorphableModel:
    d = json.loads(text)
    if d.get("format") != "facejitter-model":
        raise ModelFormatError("not a model JSON export")
    sec = {}
    for name, v in d.items():
        if isinstance(v, dict) and "data" in v:
            sec[name] = np.asarray(v["data"], dtype=v["dtype"]).reshape(v["shape"])
    model = _from_sections({**sec, "meta": np.frombuffer(json.dumps(d.get("meta", {})).encode(), np.uint8)})
    return model
