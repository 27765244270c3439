"""Synthetic circumpapillary B-scan phantom.

Each image is a stack of smooth, horizontally undulating bands on a dark
vitreous background. The nerve fibre layer is the brightest band and sits
on top of the stack; its thickness is the class signal (thin for glaucoma,
thick for normal). A ground-truth mask of that band is returned with every
image.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import GLAUCOMA, LABELS, NORMAL, Dataset, Sample, read_image, write_image, write_manifest
from .errors import ConfigurationError, ParameterError
from .tensor import DTYPE, seeded_rng

BACKGROUND = 0.04
RNFL_INTENSITY = 0.92
# Retinal layers below the nerve fibre layer, top to bottom (RPE last).
LOWER_INTENSITIES = (0.45, 0.62, 0.30, 0.55, 0.25, 0.78)


@dataclass(frozen=True)
class SynthConfig:
    height: int = 496
    width: int = 768
    glaucoma_thickness: tuple[float, float] = (4.0, 10.0)
    normal_thickness: tuple[float, float] = (14.0, 24.0)
    layer_count: int = 6
    noise: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ConfigurationError(f"image extents {self.height}x{self.width} are too small")
        (glo, ghi), (nlo, nhi) = self.glaucoma_thickness, self.normal_thickness
        if not (0 < glo <= ghi and 0 < nlo <= nhi):
            raise ConfigurationError("thickness ranges must be positive and ordered (lo <= hi)")
        if ghi >= nlo:
            raise ConfigurationError(
                f"glaucoma thickness range {self.glaucoma_thickness} must lie strictly below "
                f"normal range {self.normal_thickness}"
            )
        if not 0 <= self.layer_count <= len(LOWER_INTENSITIES):
            raise ConfigurationError(f"layer_count must lie in 0..{len(LOWER_INTENSITIES)}")
        if self.noise < 0:
            raise ConfigurationError("noise amplitude must be >= 0")

    @classmethod
    def reduced(cls, **overrides) -> "SynthConfig":
        """124 x 192 images with thickness ranges scaled for the smaller grid."""
        base = dict(height=124, width=192, glaucoma_thickness=(4.0, 8.0), normal_thickness=(12.0, 20.0))
        base.update(overrides)
        return cls(**base)

    def thickness_range(self, label: int) -> tuple[float, float]:
        return self.glaucoma_thickness if label == GLAUCOMA else self.normal_thickness

    def threshold(self) -> float:
        """Midpoint between the class ranges; mean band height below it means glaucoma."""
        return (self.glaucoma_thickness[1] + self.normal_thickness[0]) / 2.0


def _smooth_curve(rng: np.random.Generator, x: np.ndarray, n_terms: int = 3) -> np.ndarray:
    """Sum of low-frequency sinusoids scaled to peak magnitude <= 1."""
    out = np.zeros_like(x)
    for k in range(1, n_terms + 1):
        out += rng.uniform(0.3, 1.0) / k * np.sin(2 * np.pi * k * x + rng.uniform(0, 2 * np.pi))
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def generate_sample(
    cfg: SynthConfig,
    label: int,
    rng: np.random.Generator,
    sample_id: str = "synthetic",
    patient_id: str = "synthetic",
) -> tuple[Sample, np.ndarray]:
    """Render one phantom; returns the sample and its boolean nerve-fibre-band mask."""
    if label not in (GLAUCOMA, NORMAL):
        raise ParameterError(f"unknown label {label!r}")
    h, w = cfg.height, cfg.width
    xs = np.linspace(0.0, 1.0, w)
    ys = np.arange(h, dtype=np.float64)[:, None]

    # Global vertical jitter larger than the class thickness gap, so absolute
    # layer positions carry no class information.
    top = h * (0.24 + rng.uniform(-0.08, 0.08) + 0.04 * _smooth_curve(rng, xs))
    lo, hi = cfg.thickness_range(label)
    mean_t = rng.uniform(lo, hi)
    wiggle = min(mean_t - lo, hi - mean_t, 0.25 * (hi - lo))
    thickness = mean_t + wiggle * _smooth_curve(rng, xs)

    img = np.full((h, w), BACKGROUND)
    bottom = top + thickness
    mask = (ys >= top) & (ys < bottom)
    img[mask] = RNFL_INTENSITY
    edge = bottom
    for level in LOWER_INTENSITIES[: cfg.layer_count]:
        t = h * rng.uniform(0.025, 0.045) * (1 + 0.2 * _smooth_curve(rng, xs))
        band = (ys >= edge) & (ys < edge + t)
        img[band] = level
        edge = edge + t
    below = ys >= edge
    depth = np.maximum(ys - edge, 0.0)
    img[below] = (0.2 * np.exp(-depth / (0.08 * h)))[below] + BACKGROUND

    noise = rng.standard_normal((h, w))
    if cfg.noise > 0:
        speckle = ndimage.gaussian_filter(noise, 0.7)
        speckle /= speckle.std() or 1.0
        img = img + cfg.noise * speckle
    img = np.clip(img, 0.0, 1.0)
    # Quantise to 8 bits so in-memory samples equal what round-trips through disk.
    img = (np.rint(img * 255.0) / 255.0).astype(DTYPE)
    return Sample(img[..., None], label, patient_id, sample_id), mask


def band_thickness(mask: np.ndarray) -> np.ndarray:
    """Per-column height of a band mask."""
    return mask.sum(axis=0)


def classify_by_thickness(mask: np.ndarray, cfg: SynthConfig) -> int:
    return GLAUCOMA if band_thickness(mask).mean() < cfg.threshold() else NORMAL


def sample_ids(n_glaucoma: int, n_normal: int, n_patients_per_class: int):
    """(label, index, sample_id, patient_id) tuples; patients assigned round-robin."""
    for label, n, tag in ((GLAUCOMA, n_glaucoma, "g"), (NORMAL, n_normal, "n")):
        for i in range(n):
            yield label, i, f"{tag}{i:04d}", f"p{tag}{i % n_patients_per_class:03d}"


def generate_dataset(
    cfg: SynthConfig,
    n_glaucoma: int,
    n_normal: int,
    n_patients_per_class: int,
    out_dir: str | Path | None = None,
) -> tuple[Dataset, dict[str, np.ndarray]]:
    """Render a labelled corpus. Sample ``i`` of a class is drawn from
    ``seeded_rng(cfg.seed, label, i)``. When ``out_dir`` is given, images go
    to ``images/``, masks to ``masks/`` and the manifest to ``manifest.csv``,
    and the returned dataset is the one loaded back from that manifest.
    """
    if n_glaucoma < 1 or n_normal < 1 or n_patients_per_class < 1:
        raise ParameterError("sample and patient counts must be >= 1")
    samples, masks, rows = [], {}, []
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    for label, i, sid, pid in sample_ids(n_glaucoma, n_normal, n_patients_per_class):
        s, m = generate_sample(cfg, label, seeded_rng(cfg.seed, label, i), sid, pid)
        samples.append(s)
        masks[sid] = m
        if out_dir is not None:
            rel = f"images/{sid}.png"
            write_image(out_dir / rel, s.image)
            write_image(out_dir / "masks" / f"{sid}.png", m.astype(np.float64))
            rows.append((sid, rel, LABELS[label], pid))
    if out_dir is None:
        return Dataset(tuple(samples)), masks
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return Dataset(tuple(samples), manifest), masks


def load_mask(manifest: str | Path, sample_id: str) -> np.ndarray | None:
    """Ground-truth band mask stored next to a synthetic manifest, if any."""
    p = Path(manifest).parent / "masks" / f"{sample_id}.png"
    if not p.exists():
        return None
    return read_image(p)[..., 0] > 0.5


def with_seed(cfg: SynthConfig, seed: int) -> SynthConfig:
    return replace(cfg, seed=seed)
