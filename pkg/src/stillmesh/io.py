"""On-disk formats: frame JSONL, PGM masks, vertex binaries, model and config files."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .bodymodel import BodyModel, load_body_model, save_body_model
from .records import FrameRecord

VERTEX_MAGIC = b"P4DV"


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# frame records

def _floats(x):
    return [float(v) for v in np.asarray(x).reshape(-1)]


def record_to_json(rec: FrameRecord) -> dict:
    if not rec.valid:
        return {"index": rec.index, "valid": False, "pose": None, "beta": None, "scale": None,
                "rotation": None, "translation": None, "mask": rec.mask}
    return {
        "index": int(rec.index),
        "valid": True,
        "pose": _floats(rec.pose),
        "beta": _floats(rec.beta),
        "scale": float(rec.scale),
        "rotation": _floats(rec.rotation),
        "translation": _floats(rec.translation),
        "mask": rec.mask,
    }


def record_from_json(d: dict, lineno: int = 0) -> FrameRecord:
    try:
        index = int(d["index"])
        valid = bool(d["valid"])
        mask = d.get("mask")
        if not valid:
            return FrameRecord.invalid(index, mask)
        rec = FrameRecord(
            index, True,
            np.asarray(d["pose"], dtype=float),
            np.asarray(d["beta"], dtype=float),
            float(d["scale"]),
            np.asarray(d["rotation"], dtype=float),
            np.asarray(d["translation"], dtype=float),
            mask,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"line {lineno}: malformed frame record ({exc})") from None
    if rec.rotation.shape != (3,) or rec.translation.shape != (3,) or rec.pose.ndim != 1:
        raise FormatError(f"line {lineno}: bad parameter dimensions")
    return rec


def read_frames(path) -> list[FrameRecord]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{n}: {exc}") from None
            out.append(record_from_json(d, n))
    for a, b in zip(out, out[1:]):
        if b.index <= a.index:
            raise FormatError(f"{path}: frame indices not strictly increasing at {b.index}")
    return out


def write_frames(path, frames) -> None:
    # json emits shortest round-trip float reprs
    with open(path, "w") as fh:
        for rec in frames:
            fh.write(json.dumps(record_to_json(rec)) + "\n")


# ---------------------------------------------------------------------------
# masks

def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.where(mask, 255, 0).astype(np.uint8).tobytes())


def _pgm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5) to a boolean mask; pixels >= 128 are foreground."""
    data = Path(path).read_bytes()
    tokens, pos = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    if len(data) - pos < w * h:
        raise FormatError(f"{path}: truncated pixel data")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    if maxval != 255:
        pix = (pix.astype(np.float64) * (255.0 / maxval)).round()
    return (pix >= 128).reshape(h, w)


# ---------------------------------------------------------------------------
# vertex sequences

def write_vertices(path, verts: np.ndarray) -> None:
    """``(T, N_v, 3)`` little-endian float32 behind a 16-byte header.

    Header: magic ``P4DV``, T and N_v as uint32, then 4 reserved zero bytes.
    """
    verts = np.asarray(verts, dtype="<f4")
    T, nv, _ = verts.shape
    with open(path, "wb") as fh:
        fh.write(VERTEX_MAGIC + struct.pack("<III", T, nv, 0))
        fh.write(np.ascontiguousarray(verts).tobytes())


def read_vertices(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != VERTEX_MAGIC:
        raise FormatError(f"{path}: bad vertex file magic")
    T, nv, _ = struct.unpack("<III", data[4:16])
    expected = 16 + T * nv * 3 * 4
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(T, nv, 3).astype(np.float64)


# ---------------------------------------------------------------------------
# model and config

def load_model(path) -> BodyModel:
    return load_body_model(path)


def save_model(model: BodyModel, path) -> None:
    save_body_model(model, path)


def load_config(path) -> dict:
    """Flat JSON object of stabilizer and rigid-fit settings; unknown keys rejected."""
    from .rigidfit import RigidFitConfig
    from .stabilize import StabilizerConfig

    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    stab_keys = set(StabilizerConfig.__dataclass_fields__)
    fit_keys = set(RigidFitConfig.__dataclass_fields__)
    unknown = sorted(set(data) - stab_keys - fit_keys)
    if unknown:
        raise FormatError(f"{path}: unknown config keys {unknown}")
    return data
