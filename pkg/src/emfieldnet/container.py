"""``EMG1`` dataset container.

Layout::

    b"EMG1" | u32 LE header length | UTF-8 JSON header | payload

The payload holds, per sample, every channel named in ``channel_names`` as raw
little-endian float32 voxels in z-fastest order.  Per-sample scalars (coil
drives, oracle metadata) live in the header's ``samples`` list.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .fieldgrid import (
    MATERIAL_CHANNELS,
    TARGET_CHANNELS,
    CoilExcitation,
    GridGeom,
    MaterialVolume,
    SampleRecord,
    SubjectMask,
    VectorPhasorField,
)

MAGIC = b"EMG1"
VERSION = 1
_F32 = np.dtype("<f4")


class ContainerError(Exception):
    """Base class for malformed container files."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class HeaderError(ContainerError):
    """Header is not valid JSON or misses required fields."""


class TruncatedError(ContainerError):
    """File ends before the declared header or payload."""


class LengthMismatchError(ContainerError):
    """Payload is longer than the header declares."""


def channel_names(coil_count: int) -> list[str]:
    names = list(MATERIAL_CHANNELS) + ["subject_mask"]
    names += [f"coil{c}_occupancy" for c in range(coil_count)]
    return names + list(TARGET_CHANNELS)


def _sample_channels(rec: SampleRecord) -> np.ndarray:
    m = rec.materials
    return np.concatenate([
        np.stack([m.density, m.permittivity, m.conductivity, rec.mask.inside]),
        rec.excitation.occupancy,
        rec.target_E.data,
        rec.target_B.data,
    ]).astype(_F32)


def write_container(path, records: Sequence[SampleRecord]) -> None:
    records = list(records)
    if not records:
        raise ValueError("cannot write an empty container")
    first = records[0]
    n_coils = first.excitation.channel_count
    for i, r in enumerate(records):
        if r.geom != first.geom:
            raise ValueError(f"record {i} geometry differs from record 0")
        if r.frequency_hz != first.frequency_hz:
            raise ValueError(f"record {i} frequency differs from record 0")
        if r.excitation.channel_count != n_coils:
            raise ValueError(f"record {i} coil count differs from record 0")
    header = {
        "version": VERSION,
        "sample_count": len(records),
        "geom": first.geom.to_dict(),
        "frequency_hz": first.frequency_hz,
        "channel_names": channel_names(n_coils),
        "dtype": "f32",
        "samples": [
            {
                "amplitude": r.excitation.amplitude.tolist(),
                "phase": r.excitation.phase.tolist(),
                "meta": r.meta,
            }
            for r in records
        ],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for r in records:
            f.write(_sample_channels(r).tobytes(order="C"))


def _parse_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 8:
        raise TruncatedError("file ends inside the header length field")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hlen:
        raise TruncatedError(f"header declares {hlen} bytes but file is shorter")
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object")
    if header.get("version") != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {header.get('version')!r}")
    for key in ("sample_count", "geom", "frequency_hz", "channel_names", "dtype"):
        if key not in header:
            raise HeaderError(f"header is missing {key!r}")
    if header["dtype"] != "f32":
        raise HeaderError(f"unsupported dtype {header['dtype']!r}")
    return header, 8 + hlen


def read_header(path) -> dict:
    """Parse and validate only the header of a container."""
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) == 8 and head[:4] == MAGIC:
            (hlen,) = struct.unpack("<I", head[4:8])
            head += f.read(hlen)
    return _parse_header(head)[0]


def read_container(path) -> list[SampleRecord]:
    buf = Path(path).read_bytes()
    header, offset = _parse_header(buf)
    geom = GridGeom.from_dict(header["geom"])
    names = header["channel_names"]
    n_samples = int(header["sample_count"])
    if n_samples < 1:
        raise HeaderError("sample_count must be >= 1")
    n_coils = sum(1 for n in names if n.endswith("_occupancy"))
    if names != channel_names(n_coils):
        raise HeaderError(f"unexpected channel layout {names}")
    samples_meta = header.get("samples")
    if not isinstance(samples_meta, list) or len(samples_meta) != n_samples:
        raise HeaderError("header 'samples' list does not match sample_count")

    per_sample = len(names) * geom.size * _F32.itemsize
    expected = offset + n_samples * per_sample
    if len(buf) < expected:
        have = (len(buf) - offset) // per_sample
        raise TruncatedError(
            f"header declares {n_samples} samples but payload holds {have} complete samples")
    if len(buf) > expected:
        raise LengthMismatchError(f"{len(buf) - expected} unexpected trailing payload bytes")

    payload = np.frombuffer(buf, dtype=_F32, offset=offset).reshape(
        (n_samples, len(names)) + geom.shape)
    records = []
    for i in range(n_samples):
        ch = payload[i].copy()
        meta = samples_meta[i]
        c0 = 4 + n_coils
        records.append(SampleRecord(
            geom=geom,
            materials=MaterialVolume(geom, ch[0], ch[1], ch[2]),
            excitation=CoilExcitation(geom, meta["amplitude"], meta["phase"], ch[4:c0]),
            target_E=VectorPhasorField(geom, ch[c0:c0 + 6]),
            target_B=VectorPhasorField(geom, ch[c0 + 6:c0 + 12]),
            mask=SubjectMask(geom, ch[3] != 0),
            frequency_hz=float(header["frequency_hz"]),
            meta=meta.get("meta", {}),
        ))
    return records
