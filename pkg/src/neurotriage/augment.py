"""Training-time augmentation: in-plane translation and flip, window and image noise.

Every transform draws from the supplied rng even when disabled so that
toggling one flag never shifts the randomness of the others.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CTVolume, MultiChannelVolume, SeededRng
from .preprocess import PreprocessConfig, window_channels


@dataclass(frozen=True)
class AugmentConfig:
    max_translation_mm: float = 10.0
    flip_probability: float = 0.5
    window_noise_hu: float = 10.0
    image_noise_std: float = 0.01
    enable_translate: bool = True
    enable_flip: bool = True
    enable_window_noise: bool = True
    enable_image_noise: bool = True

    def __post_init__(self):
        if self.max_translation_mm < 0 or self.window_noise_hu < 0 or self.image_noise_std < 0:
            raise ValueError("augmentation magnitudes must be >= 0")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip probability must lie in [0, 1]")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(enable_translate=False, enable_flip=False,
                   enable_window_noise=False, enable_image_noise=False)


def _shift_mm_to_voxels(delta_mm: float, spacing_mm: float) -> int:
    v = delta_mm / spacing_mm
    return int(np.floor(abs(v) + 0.5)) * (1 if v >= 0 else -1)


def _shift2d(vox: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer (y, x) shift of a (c, z, y, x) tensor with zero fill."""
    if dy == 0 and dx == 0:
        return vox
    out = np.zeros_like(vox)
    ny, nx = vox.shape[-2], vox.shape[-1]
    ys = slice(max(0, dy), min(ny, ny + dy))
    yd = slice(max(0, -dy), min(ny, ny - dy))
    xs = slice(max(0, dx), min(nx, nx + dx))
    xd = slice(max(0, -dx), min(nx, nx - dx))
    out[..., ys, xs] = vox[..., yd, xd]
    return out


def random_translate(t: MultiChannelVolume, rng: SeededRng, cfg: AugmentConfig) -> MultiChannelVolume:
    """Shift y and x by independent uniform draws in [-max, +max] mm, nearest voxel."""
    dy_mm = rng.uniform(-cfg.max_translation_mm, cfg.max_translation_mm)
    dx_mm = rng.uniform(-cfg.max_translation_mm, cfg.max_translation_mm)
    dy = _shift_mm_to_voxels(dy_mm, t.spacing[1])
    dx = _shift_mm_to_voxels(dx_mm, t.spacing[2])
    if dy == 0 and dx == 0:
        return t
    return t.with_voxels(_shift2d(np.asarray(t.voxels), dy, dx))


def random_flip(t: MultiChannelVolume, rng: SeededRng, cfg: AugmentConfig) -> MultiChannelVolume:
    """Reverse the x axis of all channels with the configured probability."""
    u = rng.uniform()
    if u < cfg.flip_probability:
        return t.with_voxels(np.ascontiguousarray(np.asarray(t.voxels)[..., ::-1]))
    return t


def window_noise(vol: CTVolume, rng: SeededRng, cfg: AugmentConfig) -> CTVolume:
    """Global HU offset drawn once per volume; emulates window-level jitter.

    Applied before windowing, i.e. in the HU domain.
    """
    offset = rng.uniform(-cfg.window_noise_hu, cfg.window_noise_hu)
    if cfg.window_noise_hu == 0:
        return vol
    return vol.with_voxels(np.asarray(vol.voxels) + np.float32(offset))


def image_noise(t: MultiChannelVolume, rng: SeededRng, cfg: AugmentConfig) -> MultiChannelVolume:
    """Per-voxel i.i.d. Gaussian noise, clamped back to [0, 1]."""
    noise = rng.normal(0.0, cfg.image_noise_std, size=t.shape)
    if cfg.image_noise_std == 0:
        return t
    vox = np.clip(np.asarray(t.voxels) + noise.astype(np.float32), 0.0, 1.0)
    return t.with_voxels(vox.astype(np.float32))


def augment_study(vol_hu: CTVolume, rng: SeededRng, aug_cfg: AugmentConfig,
                  pre_cfg: PreprocessConfig) -> MultiChannelVolume:
    """Fixed-order pipeline: window noise (HU) -> windowing -> translate -> flip -> image noise.

    Each stage consumes its draws even when disabled (draw-and-discard).
    """
    # stage 1: window noise, one uniform draw
    offset = rng.uniform(-aug_cfg.window_noise_hu, aug_cfg.window_noise_hu)
    if aug_cfg.enable_window_noise and aug_cfg.window_noise_hu > 0:
        vol_hu = vol_hu.with_voxels(np.asarray(vol_hu.voxels) + np.float32(offset))

    t = window_channels(vol_hu, pre_cfg)

    # stage 2: translation, two uniform draws
    dy_mm = rng.uniform(-aug_cfg.max_translation_mm, aug_cfg.max_translation_mm)
    dx_mm = rng.uniform(-aug_cfg.max_translation_mm, aug_cfg.max_translation_mm)
    if aug_cfg.enable_translate:
        dy = _shift_mm_to_voxels(dy_mm, t.spacing[1])
        dx = _shift_mm_to_voxels(dx_mm, t.spacing[2])
        if dy != 0 or dx != 0:
            t = t.with_voxels(_shift2d(np.asarray(t.voxels), dy, dx))

    # stage 3: flip, one uniform draw
    u = rng.uniform()
    if aug_cfg.enable_flip and u < aug_cfg.flip_probability:
        t = t.with_voxels(np.ascontiguousarray(np.asarray(t.voxels)[..., ::-1]))

    # stage 4: image noise, one full-field draw
    noise = rng.normal(0.0, 1.0, size=t.shape)
    if aug_cfg.enable_image_noise and aug_cfg.image_noise_std > 0:
        vox = np.asarray(t.voxels) + (aug_cfg.image_noise_std * noise).astype(np.float32)
        t = t.with_voxels(np.clip(vox, 0.0, 1.0).astype(np.float32))

    return t
