"""Volume ingestion: NIfTI / raw formats, normalization, stack validation.

A volume is an ordered stack of 2D short-axis slices. Index 1 is the
apex-most slice and index n the basal-most one; full-coverage stacks have
n in {8, 9, 10}. Intensities are normalized to [0, 1] at load time.

Supported on-disk formats:

* NIfTI-1, single file ``.nii`` or ``.nii.gz`` (minimal codec below; the
  third voxel axis is taken as the slice axis).
* ``.raw`` little-endian float32 C-order array with a JSON sidecar
  ``<name>.json`` holding ``{"shape": [n, h, w], "pixel_spacing": [sy, sx],
  "slice_thickness": t}``.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import NonUniformSliceShape, SliceCountOutOfRange, UnreadableFile

FULL_COVERAGE_SLICE_COUNTS = (8, 9, 10)


@dataclass(frozen=True)
class VolumeStack:
    """Ordered full-coverage cine volume.

    ``slices[0]`` is the apex end and ``slices[-1]`` the basal end. All
    slices share one height x width and hold float intensities in [0, 1].
    """

    volume_id: str
    slices: np.ndarray  # (n, h, w) float32
    pixel_spacing: tuple[float, float] = (1.8, 1.8)
    slice_thickness: float = 8.0

    def __post_init__(self):
        arr = np.asarray(self.slices, dtype=np.float32)
        if arr.ndim != 3:
            raise NonUniformSliceShape(
                f"{self.volume_id}: expected a (n, h, w) array, got shape {arr.shape}"
            )
        if arr.shape[0] not in FULL_COVERAGE_SLICE_COUNTS:
            raise SliceCountOutOfRange(
                f"{self.volume_id}: {arr.shape[0]} slices; full coverage requires "
                f"one of {FULL_COVERAGE_SLICE_COUNTS}"
            )
        if not np.isfinite(arr).all():
            raise UnreadableFile(f"{self.volume_id}: non-finite intensities")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise UnreadableFile(
                f"{self.volume_id}: intensities outside [0, 1]; normalize at load"
            )
        object.__setattr__(self, "slices", arr)

    @property
    def n_slices(self) -> int:
        return int(self.slices.shape[0])

    @property
    def slice_shape(self) -> tuple[int, int]:
        return int(self.slices.shape[1]), int(self.slices.shape[2])


def minmax_normalize(data: np.ndarray) -> np.ndarray:
    """Map per-volume min -> 0 and max -> 1; constant volumes become zero."""
    data = np.asarray(data, dtype=np.float32)
    lo = float(data.min())
    hi = float(data.max())
    if hi == lo:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)


def load_volume(path: str | Path, normalization: str = "minmax") -> VolumeStack:
    """Load a volume file into a validated :class:`VolumeStack`.

    ``normalization`` is ``"minmax"`` (per-volume rescale to [0, 1]) or
    ``"none"`` (intensities must already lie in [0, 1]).
    """
    path = Path(path)
    if normalization not in ("minmax", "none"):
        raise ValueError(f"unknown normalization {normalization!r}")
    if not path.exists():
        raise UnreadableFile(f"no such file: {path}")

    name = path.name.lower()
    if name.endswith((".nii", ".nii.gz")):
        data, spacing, thickness = _read_nifti(path)
    elif name.endswith(".raw"):
        data, spacing, thickness = _read_raw(path)
    else:
        raise UnreadableFile(f"unsupported volume format: {path.name}")

    if data.ndim != 3:
        raise UnreadableFile(f"{path.name}: expected 3D data, got {data.ndim}D")
    if not np.isfinite(data).all():
        raise UnreadableFile(f"{path.name}: non-finite voxels")
    if normalization == "minmax":
        data = minmax_normalize(data)

    volume_id = path.name
    for suffix in (".nii.gz", ".nii", ".raw"):
        if volume_id.lower().endswith(suffix):
            volume_id = volume_id[: -len(suffix)]
            break
    return VolumeStack(
        volume_id=volume_id,
        slices=data.astype(np.float32),
        pixel_spacing=spacing,
        slice_thickness=thickness,
    )


# ---------------------------------------------------------------------------
# Raw format
# ---------------------------------------------------------------------------

def _read_raw(path: Path) -> tuple[np.ndarray, tuple[float, float], float]:
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise UnreadableFile(f"raw volume {path.name} lacks sidecar {sidecar.name}")
    try:
        meta = json.loads(sidecar.read_text())
        shape = tuple(int(v) for v in meta["shape"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UnreadableFile(f"bad sidecar {sidecar.name}: {exc}") from exc
    payload = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise UnreadableFile(
            f"{path.name}: {len(payload)} bytes, sidecar shape needs {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    spacing = tuple(float(v) for v in meta.get("pixel_spacing", (1.8, 1.8)))
    thickness = float(meta.get("slice_thickness", 8.0))
    return data.copy(), spacing, thickness


def save_raw_volume(volume: VolumeStack, path: str | Path) -> Path:
    """Write a VolumeStack as .raw + .json sidecar; returns the raw path."""
    path = Path(path)
    if path.suffix != ".raw":
        path = path.with_suffix(".raw")
    path.write_bytes(volume.slices.astype("<f4").tobytes())
    sidecar = {
        "shape": list(volume.slices.shape),
        "pixel_spacing": list(volume.pixel_spacing),
        "slice_thickness": volume.slice_thickness,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# Minimal NIfTI-1 codec (single-file .nii / .nii.gz)
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
}


def _read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float], float]:
    try:
        if path.name.lower().endswith(".gz"):
            blob = gzip.decompress(path.read_bytes())
        else:
            blob = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path.name}: {exc}") from exc
    if len(blob) < 352:
        raise UnreadableFile(f"{path.name}: too short for a NIfTI-1 header")

    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != 348:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        if sizeof_hdr != 348:
            raise UnreadableFile(f"{path.name}: not a NIfTI-1 file")
    magic = blob[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise UnreadableFile(f"{path.name}: bad NIfTI magic {magic!r}")

    dim = struct.unpack_from(endian + "8h", blob, 40)
    ndim = dim[0]
    if ndim < 3:
        raise UnreadableFile(f"{path.name}: {ndim}D image, need 3D")
    nx, ny, nz = dim[1], dim[2], dim[3]
    extra = int(np.prod([max(d, 1) for d in dim[4 : 1 + ndim]])) if ndim > 3 else 1
    if extra != 1:
        raise UnreadableFile(f"{path.name}: multi-frame NIfTI not supported")

    (datatype,) = struct.unpack_from(endian + "h", blob, 70)
    if datatype not in _NIFTI_DTYPES:
        raise UnreadableFile(f"{path.name}: unsupported NIfTI datatype {datatype}")
    dtype = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    pixdim = struct.unpack_from(endian + "8f", blob, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", blob, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", blob, 112)

    offset = int(vox_offset) if vox_offset >= 352 else 352
    count = nx * ny * nz
    end = offset + count * dtype.itemsize
    if len(blob) < end:
        raise UnreadableFile(f"{path.name}: voxel data truncated")
    flat = np.frombuffer(blob[offset:end], dtype=dtype)
    # NIfTI stores x fastest; reshape to (z, y, x) so axis 0 is the slice axis.
    data = flat.reshape((nz, ny, nx)).astype(np.float64)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * slope + scl_inter
    spacing = (float(pixdim[2]) or 1.0, float(pixdim[1]) or 1.0)
    thickness = float(pixdim[3]) or 1.0
    return data, spacing, thickness


def save_nifti(volume: VolumeStack, path: str | Path) -> Path:
    """Write a VolumeStack as a single-file little-endian float32 NIfTI-1."""
    path = Path(path)
    n, h, w = volume.slices.shape
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, w, h, n, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, 16)  # float32
    struct.pack_into("<h", header, 72, 32)  # bitpix
    sy, sx = volume.pixel_spacing
    struct.pack_into(
        "<8f", header, 76, 0.0, sx, sy, volume.slice_thickness, 0, 0, 0, 0
    )
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    header[344:348] = b"n+1\x00"
    # (z, y, x) C-order equals NIfTI x-fastest layout for shape (w, h, n).
    payload = bytes(header) + b"\x00" * 4 + volume.slices.astype("<f4").tobytes()
    if path.name.lower().endswith(".gz"):
        path.write_bytes(gzip.compress(payload, mtime=0))
    else:
        path.write_bytes(payload)
    return path
