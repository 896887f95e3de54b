"""Single-file volume IO: a minimal NIfTI-1 reader/writer plus a raw float32 fallback.

Only the header fields this pipeline needs are honored: dim, datatype, pixdim,
vox_offset, scl_slope/scl_inter and qoffset.  Arrays are exchanged in (z, y, x)
axis order; on disk NIfTI stores x fastest, which matches C-order (z, y, x).
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .core import CTVolume
from .errors import CorruptHeader, UnsupportedFormat

_HDR_SIZE = 348
_MAGIC_OFFSET = 344
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
}
_GZIP_MAGIC = b"\x1f\x8b"


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == _GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def read_nifti(path) -> CTVolume:
    path = Path(path)
    blob = _read_bytes(path)
    if len(blob) < _HDR_SIZE + 4:
        raise CorruptHeader(f"{path}: file shorter than a NIfTI-1 header")

    for endian in ("<", ">"):
        (sizeof_hdr,) = struct.unpack_from(endian + "i", blob, 0)
        if sizeof_hdr == _HDR_SIZE:
            break
    else:
        raise CorruptHeader(f"{path}: sizeof_hdr is not 348 in either byte order")

    magic = blob[_MAGIC_OFFSET:_MAGIC_OFFSET + 4]
    if magic == b"ni1\x00":
        raise UnsupportedFormat(f"{path}: two-file NIfTI (.hdr/.img) is not supported")
    if magic != b"n+1\x00":
        raise CorruptHeader(f"{path}: bad magic {magic!r}")

    dim = struct.unpack_from(endian + "8h", blob, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise CorruptHeader(f"{path}: dim[0]={ndim} out of range")
    shape_xyz = [max(1, d) for d in dim[1:4]]
    extra = [d for d in dim[4:1 + ndim] if d > 1]
    if ndim > 3 and extra:
        raise UnsupportedFormat(f"{path}: only 3-D volumes are supported, dim={dim}")

    (datatype,) = struct.unpack_from(endian + "h", blob, 70)
    if datatype not in _DTYPES:
        raise UnsupportedFormat(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack_from(endian + "8f", blob, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", blob, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", blob, 112)
    qoffset = struct.unpack_from(endian + "3f", blob, 256)

    nx, ny, nz = shape_xyz
    sx, sy, sz = pixdim[1], pixdim[2], pixdim[3]
    if min(sx, sy, sz) <= 0:
        raise CorruptHeader(f"{path}: non-positive pixdim {pixdim[1:4]}")

    offset = int(vox_offset) if vox_offset >= _HDR_SIZE else _HDR_SIZE + 4
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(endian)
    count = nx * ny * nz
    need = offset + count * dtype.itemsize
    if len(blob) < need:
        raise CorruptHeader(f"{path}: truncated data ({len(blob)} < {need} bytes)")

    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    vox = data.reshape(nz, ny, nx).astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        vox = vox * np.float32(slope) + np.float32(scl_inter)

    return CTVolume(
        voxels=vox,
        spacing=(float(sz), float(sy), float(sx)),
        origin=(float(qoffset[2]), float(qoffset[1]), float(qoffset[0])),
    )


def write_nifti(path, vol: CTVolume) -> None:
    path = Path(path)
    vox = np.ascontiguousarray(np.asarray(vol.voxels, dtype="<f4"))
    nz, ny, nx = vox.shape
    sz, sy, sx = vol.spacing

    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    hdr[38] = ord("r")  # regular
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)   # float32
    struct.pack_into("<h", hdr, 72, 32)   # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_HDR_SIZE + 4))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: millimetres
    descrip = b"neurotriage volume"
    hdr[148:148 + len(descrip)] = descrip
    struct.pack_into("<2h", hdr, 252, 1, 0)  # qform_code=1, sform_code=0
    oz, oy, ox = vol.origin
    struct.pack_into("<6f", hdr, 256, 0.0, 0.0, 0.0, ox, oy, oz)
    hdr[_MAGIC_OFFSET:_MAGIC_OFFSET + 4] = b"n+1\x00"

    payload = bytes(hdr) + b"\x00\x00\x00\x00" + vox.tobytes()
    if path.suffix == ".gz":
        # mtime pinned so identical volumes produce identical files
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def write_raw(path, vol: CTVolume) -> None:
    """Raw little-endian float32 array plus a JSON sidecar with shape/spacing/ids."""
    path = Path(path)
    vox = np.ascontiguousarray(np.asarray(vol.voxels, dtype="<f4"))
    path.write_bytes(vox.tobytes())
    sidecar = {
        "shape": list(vox.shape),
        "spacing": [float(s) for s in vol.spacing],
        "origin": [float(o) for o in vol.origin],
        "study_id": vol.study_id,
        "patient_id": vol.patient_id,
        "dtype": "float32",
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))


def read_raw(path) -> CTVolume:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise CorruptHeader(f"{path}: missing sidecar {sidecar_path.name}")
    try:
        meta = json.loads(sidecar_path.read_text())
        shape = tuple(int(s) for s in meta["shape"])
        spacing = tuple(float(s) for s in meta["spacing"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptHeader(f"{sidecar_path}: invalid sidecar ({exc})") from exc
    if meta.get("dtype", "float32") != "float32":
        raise UnsupportedFormat(f"{path}: raw dtype {meta['dtype']!r} not supported")

    blob = path.read_bytes()
    count = int(np.prod(shape))
    if len(blob) < count * 4:
        raise CorruptHeader(f"{path}: truncated data ({len(blob)} < {count * 4} bytes)")
    vox = np.frombuffer(blob, dtype="<f4", count=count).reshape(shape).copy()
    return CTVolume(
        voxels=vox,
        spacing=spacing,
        origin=tuple(meta.get("origin", (0.0, 0.0, 0.0))),
        study_id=str(meta.get("study_id", "")),
        patient_id=str(meta.get("patient_id", "")),
    )
