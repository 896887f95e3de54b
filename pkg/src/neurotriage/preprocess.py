"""Volume loading, reference-frame alignment, resampling and HU windowing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import nifti
from .core import CTVolume, MultiChannelVolume
from .errors import EmptyHead, UnsupportedFormat

HEAD_MASK_HU = -200.0
AIR_HU = -1000.0

ALIGNMENT_MODES = ("none", "center_of_mass", "com_plus_principal_axes")


@dataclass(frozen=True)
class PreprocessConfig:
    # (z, y, x): 4 mm out-of-plane, 1 mm in-plane
    target_spacing: tuple[float, float, float] = (4.0, 1.0, 1.0)
    # (low, high) HU pairs: bleeding, brain, bone
    windows: tuple[tuple[float, float], ...] = ((0.0, 80.0), (-20.0, 180.0), (-800.0, 2000.0))
    alignment: str = "center_of_mass"
    output_shape: tuple[int, int, int] = (40, 224, 224)

    def __post_init__(self):
        if len(self.windows) != 3:
            raise ValueError("exactly three HU windows are required")
        for low, high in self.windows:
            if not low < high:
                raise ValueError(f"window low must be < high, got ({low}, {high})")
        if any(s <= 0 for s in self.target_spacing):
            raise ValueError("target spacing must be strictly positive")
        if self.alignment not in ALIGNMENT_MODES:
            raise ValueError(f"alignment must be one of {ALIGNMENT_MODES}")
        if any(n < 1 for n in self.output_shape):
            raise ValueError("output shape entries must be >= 1")


def load_volume(path) -> CTVolume:
    """Read a single-file volume (.nii/.nii.gz or .raw + JSON sidecar)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return nifti.read_nifti(path)
    if name.endswith(".raw"):
        return nifti.read_raw(path)
    raise UnsupportedFormat(f"{path}: expected .nii, .nii.gz or .raw")


def save_volume(path, vol: CTVolume) -> None:
    path = Path(path)
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        nifti.write_nifti(path, vol)
    elif name.endswith(".raw"):
        nifti.write_raw(path, vol)
    else:
        raise UnsupportedFormat(f"{path}: expected .nii, .nii.gz or .raw")


def head_mask(vol: CTVolume) -> np.ndarray:
    return np.asarray(vol.voxels) > HEAD_MASK_HU


def mask_centroid(mask: np.ndarray) -> np.ndarray:
    """Centroid of True voxels in index coordinates (z, y, x)."""
    total = mask.sum()
    if total == 0:
        raise EmptyHead("no voxel above the head-mask threshold")
    coords = np.nonzero(mask)
    return np.array([c.sum() / total for c in coords], dtype=np.float64)


def _inplane_rotation_angle(mask: np.ndarray, spacing) -> float:
    """Angle (radians) rotating the dominant in-plane principal axis onto +y."""
    _, yy, xx = np.nonzero(mask)
    pts = np.stack([yy * spacing[1], xx * spacing[2]], axis=0).astype(np.float64)
    pts -= pts.mean(axis=1, keepdims=True)
    cov = pts @ pts.T / max(1, pts.shape[1])
    evals, evecs = np.linalg.eigh(cov)
    v = evecs[:, np.argmax(evals)]  # (vy, vx)
    if v[0] < 0 or (v[0] == 0 and v[1] < 0):
        v = -v
    # rotate v onto (1, 0) in (y, x) coordinates
    return float(np.arctan2(v[1], v[0]))


def alignment_transform(vol: CTVolume, cfg: PreprocessConfig):
    """(matrix, offset) mapping output voxel coords to input voxel coords, or
    None when alignment is a no-op.  Raises EmptyHead on headless volumes."""
    mask = head_mask(vol)
    centroid = mask_centroid(mask)
    if cfg.alignment == "none":
        return None
    center = (np.array(vol.shape, dtype=np.float64) - 1.0) / 2.0

    if cfg.alignment == "center_of_mass":
        if np.allclose(centroid, center, atol=1e-12):
            return None
        return np.eye(3), centroid - center

    # com_plus_principal_axes: rotate about the centroid in the (y, x) plane,
    # then translate the centroid to the grid center.  Output voxel p maps to
    # input voxel centroid + S^-1 R^T S (p - center), with S = diag(spacing).
    angle = _inplane_rotation_angle(mask, vol.spacing)
    c, s = np.cos(angle), np.sin(angle)
    rot_t = np.array([[c, s], [-s, c]])  # R^T in (y, x) mm coordinates
    sy, sx = vol.spacing[1], vol.spacing[2]
    m2 = np.diag([1.0 / sy, 1.0 / sx]) @ rot_t @ np.diag([sy, sx])
    matrix = np.eye(3)
    matrix[1:, 1:] = m2
    offset = centroid - matrix @ center
    return matrix, offset


def apply_alignment(arr: np.ndarray, transform, order: int, cval: float) -> np.ndarray:
    if transform is None:
        return arr
    matrix, offset = transform
    return ndimage.affine_transform(arr, matrix, offset=offset, order=order,
                                    mode="constant", cval=cval)


def align_to_reference(vol: CTVolume, cfg: PreprocessConfig) -> CTVolume:
    """Move the head-mask centroid to the grid center, optionally also rotating
    the dominant in-plane principal axis onto the y axis."""
    transform = alignment_transform(vol, cfg)
    if transform is None:
        return vol
    out = apply_alignment(np.asarray(vol.voxels, dtype=np.float64), transform,
                          order=1, cval=AIR_HU)
    return vol.with_voxels(out.astype(np.float32))


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.floor(np.abs(x) + 0.5).astype(int) * np.sign(x).astype(int)


def resample(vol: CTVolume, target_spacing) -> CTVolume:
    """Trilinear resample onto the target spacing, preserving physical extent."""
    target = tuple(float(t) for t in target_spacing)
    if any(t <= 0 for t in target):
        raise ValueError("target spacing must be strictly positive")
    if target == tuple(float(s) for s in vol.spacing):
        return vol

    in_shape = np.array(vol.shape, dtype=np.float64)
    in_spacing = np.array(vol.spacing, dtype=np.float64)
    out_shape = np.maximum(1, _round_half_away(in_shape * in_spacing / np.array(target)))

    # output voxel p sits at physical p*t, i.e. input index p*t/s
    matrix = np.diag(np.array(target) / in_spacing)
    out = ndimage.affine_transform(
        np.asarray(vol.voxels, dtype=np.float64),
        matrix,
        offset=0.0,
        output_shape=tuple(int(n) for n in out_shape),
        order=1,
        mode="nearest",
    )
    return vol.with_voxels(out.astype(np.float32), spacing=target)


def resample_labels(mask: np.ndarray, spacing, target_spacing) -> np.ndarray:
    """Nearest-neighbour resample for integer label maps (same grid rule as resample)."""
    target = tuple(float(t) for t in target_spacing)
    if target == tuple(float(s) for s in spacing):
        return mask
    in_shape = np.array(mask.shape, dtype=np.float64)
    in_spacing = np.array(spacing, dtype=np.float64)
    out_shape = np.maximum(1, _round_half_away(in_shape * in_spacing / np.array(target)))
    matrix = np.diag(np.array(target) / in_spacing)
    return ndimage.affine_transform(
        mask,
        matrix,
        offset=0.0,
        output_shape=tuple(int(n) for n in out_shape),
        order=0,
        mode="constant",
        cval=0,
    ).astype(mask.dtype)


def window_channels(vol: CTVolume, cfg: PreprocessConfig) -> MultiChannelVolume:
    """Map HU to the three normalized window channels, clamped to [0, 1]."""
    hu = np.asarray(vol.voxels, dtype=np.float32)
    channels = np.empty((len(cfg.windows),) + hu.shape, dtype=np.float32)
    for c, (low, high) in enumerate(cfg.windows):
        channels[c] = np.clip((hu - low) / (high - low), 0.0, 1.0)
    return MultiChannelVolume(voxels=channels, spacing=vol.spacing)


def center_crop_pad(arr: np.ndarray, out_shape, fill=0.0) -> np.ndarray:
    """Center-crop/pad the trailing len(out_shape) axes to out_shape."""
    lead = arr.shape[:arr.ndim - len(out_shape)]
    out = np.full(lead + tuple(out_shape), fill, dtype=arr.dtype)
    src_slices, dst_slices = [slice(None)] * len(lead), [slice(None)] * len(lead)
    for in_n, out_n in zip(arr.shape[len(lead):], out_shape):
        if in_n >= out_n:
            start = (in_n - out_n) // 2
            src_slices.append(slice(start, start + out_n))
            dst_slices.append(slice(0, out_n))
        else:
            start = (out_n - in_n) // 2
            src_slices.append(slice(0, in_n))
            dst_slices.append(slice(start, start + in_n))
    out[tuple(dst_slices)] = arr[tuple(src_slices)]
    return out


def preprocess_volume_hu(vol: CTVolume, cfg: PreprocessConfig) -> CTVolume:
    """Align + resample + center-crop/pad, staying in the HU domain.

    Padding uses air (-1000 HU), which windows to zero in all three channels,
    so windowing this output equals the zero-padded windowed pipeline exactly.
    """
    aligned = align_to_reference(vol, cfg)
    res = resample(aligned, cfg.target_spacing)
    vox = center_crop_pad(np.asarray(res.voxels), cfg.output_shape, fill=AIR_HU)
    return res.with_voxels(vox.astype(np.float32))


def preprocess_case_hu(vol: CTVolume, masks: dict[str, np.ndarray],
                       cfg: PreprocessConfig) -> tuple[CTVolume, dict[str, np.ndarray]]:
    """Preprocess a volume and carry its label masks through the same geometry.

    Masks ride along with nearest-neighbour interpolation and zero fill; mask
    arrays may have leading channel axes ahead of (z, y, x).
    """
    transform = alignment_transform(vol, cfg)
    out_vox = apply_alignment(np.asarray(vol.voxels, dtype=np.float64), transform,
                              order=1, cval=AIR_HU)
    aligned = vol.with_voxels(out_vox.astype(np.float32))
    res = resample(aligned, cfg.target_spacing)
    grid_vox = center_crop_pad(np.asarray(res.voxels), cfg.output_shape, fill=AIR_HU)

    out_masks = {}
    for name, mask in masks.items():
        mask = np.asarray(mask)
        planes = mask.reshape((-1,) + mask.shape[-3:])
        moved = []
        for plane in planes:
            plane = apply_alignment(plane, transform, order=0, cval=0)
            plane = resample_labels(plane, vol.spacing, cfg.target_spacing)
            moved.append(center_crop_pad(plane, cfg.output_shape, fill=0))
        out_masks[name] = np.stack(moved).reshape(mask.shape[:-3] + tuple(cfg.output_shape))

    return res.with_voxels(grid_vox.astype(np.float32)), out_masks


def preprocess_volume(vol: CTVolume, cfg: PreprocessConfig) -> MultiChannelVolume:
    return window_channels(preprocess_volume_hu(vol, cfg), cfg)


def preprocess_study(path, cfg: PreprocessConfig) -> MultiChannelVolume:
    """Load -> align -> resample -> window -> center-crop/pad to the output grid."""
    return preprocess_volume(load_volume(path), cfg)
