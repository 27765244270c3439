"""Class activation maps for models with a global-max-pool + dense head."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from . import models
from .data import Sample
from .errors import DimensionError, UnsupportedArchitectureError
from .tensor import DTYPE, bilinear_resize

COLOR_RAMP = "inferno"
MAX_OPACITY = 0.5


@dataclass(frozen=True, eq=False)
class CamMap:
    map: np.ndarray  # H x W x 1 in [0, 1]
    target_class: int
    sample_id: str = ""
    constant: bool = False  # raw map had no spread; map is all zeros


def _head_weights(spec: models.ModelSpec) -> str:
    kinds = [l.kind for l in spec.layers]
    tail = kinds[kinds.index("gmp"):] if "gmp" in kinds else []
    if tail not in (["gmp", "dense"], ["gmp", "dropout", "dense"]):
        raise UnsupportedArchitectureError(
            f"CAM needs a GMP -> [dropout] -> dense head, model ends with {kinds[-3:]}"
        )
    return spec.head.name


def class_activation(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Channel-weighted sum of feature maps: sum_k w_k * f_k(i, j)."""
    if features.shape[-1] != weights.shape[0]:
        raise DimensionError(f"{features.shape[-1]} feature maps for {weights.shape[0]} weights")
    return features @ weights


def normalize(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max scale to [0, 1]; a constant map becomes all zeros and is flagged.
    Negative values are kept (no rectification)."""
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo <= 0 or not np.isfinite(hi - lo):
        return np.zeros_like(raw, dtype=DTYPE), True
    return ((raw - lo) / (hi - lo)).astype(DTYPE), False


def compute_cam(state: models.ModelState, x: np.ndarray, target_class: int, sample_id: str = "") -> CamMap:
    """CAM of ``target_class`` for one model-ready input, upsampled to the
    input's extents and min-max normalised."""
    dense = _head_weights(state.spec)
    if x.ndim != 3:
        raise DimensionError(f"compute_cam takes a single H x W x C input, got {x.shape}")
    _, cache = models.forward(state, x, training=False)
    feats = cache.features[0] if cache.features.ndim == 4 else cache.features
    raw = class_activation(feats.astype(np.float64), state.params[dense].kernel[:, target_class].astype(np.float64))
    h, w = x.shape[:2]
    up = bilinear_resize(raw[..., None], h, w)
    norm, constant = normalize(up)
    return CamMap(norm, target_class, sample_id, constant)


def resize_cam(cam: CamMap, h: int, w: int) -> CamMap:
    if cam.map.shape[:2] == (h, w):
        return cam
    return CamMap(np.clip(bilinear_resize(cam.map, h, w), 0, 1), cam.target_class, cam.sample_id, cam.constant)


def overlay(cam_map: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Blend a grayscale base with the colour ramp; per-pixel opacity is
    ``MAX_OPACITY * cam`` so a zero map leaves the base untouched.
    Returns H x W x 3 uint8."""
    v = np.clip(cam_map[..., 0].astype(np.float64), 0, 1)
    gray = np.clip(base[..., 0].astype(np.float64), 0, 1)
    color = colormaps[COLOR_RAMP](v)[..., :3]
    alpha = (MAX_OPACITY * v)[..., None]
    rgb = (1 - alpha) * gray[..., None] + alpha * color
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def export_heatmap(cam: CamMap, base: Sample, out: str | Path) -> tuple[Path, Path]:
    """Write ``<out>_cam.png`` (8-bit grayscale map) and ``<out>_overlay.png``
    (24-bit colour overlay on the base image)."""
    if cam.map.shape[:2] != base.image.shape[:2]:
        raise DimensionError(f"CAM extents {cam.map.shape[:2]} differ from image {base.image.shape[:2]}")
    out = Path(out)
    raw_path = out.with_name(out.name + "_cam.png")
    ov_path = out.with_name(out.name + "_overlay.png")
    q = np.clip(np.rint(cam.map[..., 0].astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="L").save(raw_path)
    Image.fromarray(overlay(cam.map, base.image), mode="RGB").save(ov_path)
    return raw_path, ov_path


def band_contrast(cam_map: np.ndarray, mask: np.ndarray) -> float:
    """Mean CAM inside a boolean mask divided by the mean outside it."""
    v = cam_map[..., 0] if cam_map.ndim == 3 else cam_map
    inside, outside = v[mask].mean(), v[~mask].mean()
    if outside == 0:
        return float("inf") if inside > 0 else float("nan")
    return float(inside / outside)
