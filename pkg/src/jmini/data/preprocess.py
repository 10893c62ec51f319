"""Image preprocessing rules for the two visual paths.

Images are ``(height, width, 3)`` float arrays with values in ``[0, 1]``.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

PAD_VALUE = 127 / 255


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("image has zero size")
    return img


def resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize; identity when the size already matches."""
    if img.shape[:2] == (height, width):
        return img.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    downscale = height < img.shape[0] or width < img.shape[1]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False,
                        antialias=downscale)
    return out[0].permute(1, 2, 0).clamp(0, 1).numpy()


def preprocess_understanding(raw: np.ndarray, side: int) -> np.ndarray:
    """Resize the long side to ``side`` and pad the short side with mid-gray."""
    raw = check_image(raw)
    h, w = raw.shape[:2]
    scale = side / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    body = resize(raw, nh, nw)
    out = np.full((side, side, 3), PAD_VALUE, np.float32)
    top, left = (side - nh) // 2, (side - nw) // 2
    out[top:top + nh, left:left + nw] = body
    return out


def preprocess_generation(raw: np.ndarray, side: int) -> np.ndarray:
    """Resize the short side to ``side`` and center-crop the long side."""
    raw = check_image(raw)
    h, w = raw.shape[:2]
    scale = side / min(h, w)
    nh, nw = max(side, round(h * scale)), max(side, round(w * scale))
    body = resize(raw, nh, nw)
    top, left = (nh - side) // 2, (nw - side) // 2
    return np.ascontiguousarray(body[top:top + side, left:left + side])
