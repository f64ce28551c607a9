"""Image augmentation for 32x32 training.

Pipeline order is fixed: zero-pad by 4 and take a random 32x32 crop, flip
horizontally with probability 0.5, rotate by an angle drawn uniformly from
[-15, +15] degrees (bilinear, zero fill), then subtract the per-channel
dataset means. Images enter as uint8 and leave as float32 in [0, 1] units
minus the means.

All randomness comes from an explicit ``torch.Generator`` so training runs
are reproducible and resumable.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

PAD = 4
MAX_ANGLE = 15.0


def to_unit(images: Tensor) -> Tensor:
    """uint8 pixels -> float32 in [0, 1]."""
    return images.to(torch.float32) / 255.0


def normalize(images: Tensor, mean) -> Tensor:
    """Subtract per-channel means (no division by the standard deviation)."""
    mean = torch.as_tensor(np.asarray(mean), dtype=images.dtype)
    if mean.shape != (3,):
        raise ValueError(f"expected 3 channel means, got shape {tuple(mean.shape)}")
    return images - mean[:, None, None]


def pad_and_crop(images: Tensor, oy: int, ox: int, padding: int = PAD) -> Tensor:
    """Zero-pad spatially by ``padding`` and crop back to the original size
    at offset (oy, ox); offsets range over [0, 2 * padding]."""
    h, w = images.shape[-2:]
    if not (0 <= oy <= 2 * padding and 0 <= ox <= 2 * padding):
        raise ValueError(f"crop offset ({oy}, {ox}) outside [0, {2 * padding}]")
    padded = F.pad(images, (padding, padding, padding, padding))
    return padded[..., oy : oy + h, ox : ox + w]


def hflip(images: Tensor) -> Tensor:
    return torch.flip(images, dims=[-1])


def rotate(images: Tensor, angles) -> Tensor:
    """Rotate each image about its center by its angle in degrees.

    Bilinear interpolation, zero fill outside the frame. An angle of 0 is an
    exact identity. Accepts (C, H, W) with a scalar angle or (B, C, H, W)
    with per-sample angles.
    """
    single = images.dim() == 3
    if single:
        images = images[None]
        angles = torch.as_tensor([float(angles)], dtype=images.dtype)
    else:
        angles = torch.as_tensor(angles, dtype=images.dtype)
    b, _, h, w = images.shape
    theta = angles * (math.pi / 180.0)
    cos = torch.cos(theta)[:, None, None]
    sin = torch.sin(theta)[:, None, None]

    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys = torch.arange(h, dtype=images.dtype) - cy
    xs = torch.arange(w, dtype=images.dtype) - cx
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    # inverse-map each output pixel to its source location
    sx = cos * gx + sin * gy + cx
    sy = -sin * gx + cos * gy + cy

    x0 = sx.floor()
    y0 = sy.floor()
    wx = (sx - x0)[:, None]
    wy = (sy - y0)[:, None]

    bidx = torch.arange(b)[:, None, None]

    def sample(yi: Tensor, xi: Tensor) -> Tensor:
        inside = ((yi >= 0) & (yi < h) & (xi >= 0) & (xi < w))[:, None]
        yc = yi.clamp(0, h - 1).long()
        xc = xi.clamp(0, w - 1).long()
        vals = images[bidx, :, yc, xc].permute(0, 3, 1, 2)
        return vals * inside

    v00 = sample(y0, x0)
    v01 = sample(y0, x0 + 1)
    v10 = sample(y0 + 1, x0)
    v11 = sample(y0 + 1, x0 + 1)
    out = (
        v00 * (1 - wy) * (1 - wx)
        + v01 * (1 - wy) * wx
        + v10 * wy * (1 - wx)
        + v11 * wy * wx
    )
    return out[0] if single else out


def apply_augment(image: Tensor, oy: int, ox: int, flip: bool, angle: float, mean) -> Tensor:
    """Deterministic kernel behind ``augment_image`` (parameters explicit)."""
    out = pad_and_crop(image, oy, ox)
    if flip:
        out = hflip(out)
    out = rotate(out, angle)
    return normalize(out, mean)


def augment_image(image: Tensor, rng: torch.Generator, mean) -> Tensor:
    """Randomly augment one uint8 (3, 32, 32) image."""
    offsets = torch.randint(0, 2 * PAD + 1, (2,), generator=rng)
    flip = bool(torch.rand((), generator=rng) < 0.5)
    angle = float((torch.rand((), generator=rng) * 2 - 1) * MAX_ANGLE)
    return apply_augment(to_unit(image), int(offsets[0]), int(offsets[1]), flip, angle, mean)


def augment_batch(
    images: Tensor,
    rng: torch.Generator,
    mean,
    crop: bool = True,
    flip: bool = True,
    rotation: bool = True,
) -> Tensor:
    """Randomly augment a uint8 (B, 3, 32, 32) batch.

    Parameters are drawn batched (crop offsets, then flips, then angles), so
    the stream of generator draws is fixed for a given batch size and switch
    setting.
    """
    b = images.shape[0]
    out = to_unit(images)
    if crop:
        offsets = torch.randint(0, 2 * PAD + 1, (b, 2), generator=rng)
        padded = F.pad(out, (PAD, PAD, PAD, PAD))
        h, w = images.shape[-2:]
        out = torch.stack(
            [padded[i, :, oy : oy + h, ox : ox + w] for i, (oy, ox) in enumerate(offsets.tolist())]
        )
    if flip:
        mask = torch.rand(b, generator=rng) < 0.5
        if mask.any():
            out[mask] = hflip(out[mask])
    if rotation:
        angles = (torch.rand(b, generator=rng) * 2 - 1) * MAX_ANGLE
        out = rotate(out, angles)
    return normalize(out, mean)
