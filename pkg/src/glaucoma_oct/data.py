"""Dataset ingestion, preprocessing, augmentation and patient-grouped splits."""
from __future__ import annotations

import csv
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    DataError,
    DuplicateSampleError,
    ManifestFormatError,
    MissingImageError,
    ParameterError,
    PartitionError,
    UnknownLabelError,
)
from .tensor import DTYPE, bilinear_resize

GLAUCOMA, NORMAL = 0, 1
LABELS = ("glaucoma", "normal")
MANIFEST_HEADER = ("sample_id", "path", "label", "patient_id")


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray  # H x W x 1, float32 in [0, 1]
    label: int
    patient_id: str
    sample_id: str

    @property
    def label_name(self) -> str:
        return LABELS[self.label]


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[Sample, ...]
    manifest: Path | None = None

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.sample_id in seen:
                raise DuplicateSampleError(f"duplicate sample_id {s.sample_id!r}")
            seen.add(s.sample_id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def class_counts(self) -> tuple[int, int]:
        c = Counter(s.label for s in self.samples)
        return c[GLAUCOMA], c[NORMAL]

    def get(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise KeyError(sample_id)

    def subset(self, ids) -> "Dataset":
        keep = set(ids)
        return Dataset(tuple(s for s in self.samples if s.sample_id in keep), self.manifest)


# -- manifest I/O ------------------------------------------------------------


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.uint8)
    return (arr.astype(DTYPE) / DTYPE(255.0))[..., None]


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write an H x W (x 1) image in [0, 1] as 8-bit grayscale."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[..., 0]
    q = np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path)


def load_dataset(manifest: str | Path) -> Dataset:
    """Read a ``sample_id,path,label,patient_id`` manifest; image paths are
    resolved relative to the manifest's directory. Row numbers in errors are
    file line numbers (the header is line 1)."""
    manifest = Path(manifest)
    fh = manifest.open(newline="")  # a missing manifest is an i/o error, not a row error
    samples: list[Sample] = []
    seen: dict[str, int] = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestFormatError(
                f"{manifest}: header must be {','.join(MANIFEST_HEADER)}, got {header}"
            )
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ManifestFormatError(f"{manifest}, row {row_no}: expected 4 fields, got {len(row)}")
            sid, rel, label, pid = (c.strip() for c in row)
            if not sid or not pid:
                raise ManifestFormatError(f"{manifest}, row {row_no}: empty sample_id or patient_id")
            if label not in LABELS:
                raise UnknownLabelError(f"{manifest}, row {row_no}: unknown label {label!r}")
            if sid in seen:
                raise DuplicateSampleError(
                    f"{manifest}, row {row_no}: sample_id {sid!r} already used on row {seen[sid]}"
                )
            path = Path(rel)
            if not path.is_absolute():
                path = manifest.parent / path
            try:
                image = read_image(path)
            except (OSError, ValueError) as e:
                raise MissingImageError(f"{manifest}, row {row_no}: cannot read image {path}: {e}") from e
            seen[sid] = row_no
            samples.append(Sample(image, LABELS.index(label), pid, sid))
    return Dataset(tuple(samples), manifest)


def write_manifest(path: str | Path, rows) -> None:
    """``rows``: iterables of (sample_id, image path, label name, patient_id)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in rows:
            w.writerow(r)


def write_dataset_manifest(path: str | Path, dataset: Dataset) -> None:
    """Write a manifest for a subset whose images live next to ``dataset.manifest``."""
    if dataset.manifest is None:
        raise DataError("dataset has no source manifest to resolve image paths against")
    src = {}
    with Path(dataset.manifest).open(newline="") as fh:
        for row in csv.DictReader(fh):
            p = Path(row["path"].strip())
            if not p.is_absolute():
                p = (Path(dataset.manifest).parent / p).resolve()
            src[row["sample_id"].strip()] = p
    here = Path(path).resolve().parent

    def rel(p: Path) -> str:
        # Relative paths keep manifests byte-identical across output locations.
        try:
            return Path(os.path.relpath(p, here)).as_posix()
        except ValueError:  # different drive
            return str(p)

    write_manifest(path, ((s.sample_id, rel(src[s.sample_id]), s.label_name, s.patient_id) for s in dataset))


# -- preprocessing -----------------------------------------------------------


def model_input(image: np.ndarray, input_shape: tuple[int, int, int]) -> np.ndarray:
    """Resize a grayscale H x W x 1 image to the model's extents and replicate
    it across the model's channel count."""
    h, w, c = input_shape
    x = image if image.shape[:2] == (h, w) else bilinear_resize(image, h, w)
    if c > 1:
        x = np.repeat(x[..., :1], c, axis=-1)
    return x.astype(DTYPE, copy=False)


def stack_inputs(samples, input_shape) -> np.ndarray:
    return np.stack([model_input(s.image, input_shape) for s in samples]).astype(DTYPE, copy=False)


def preprocess_for_finetune(s: Sample) -> np.ndarray:
    """Half-resolution bilinear downsample followed by x3 channel replication."""
    h, w = s.image.shape[:2]
    return model_input(s.image, (-(-h // 2), -(-w // 2), 3))


# -- augmentation ------------------------------------------------------------


TRANSFORMS = frozenset({"shift", "rotation", "zoom", "elastic"})
MAX_ROTATION_DEG = 15.0
ELASTIC_AMPLITUDE_PX = 10.0
ELASTIC_SIGMA_PX = 8.0


@dataclass(frozen=True)
class AugmentConfig:
    factor: float = 0.2
    transforms: frozenset = field(default_factory=lambda: TRANSFORMS)

    def __post_init__(self):
        if self.factor < 0:
            raise ParameterError(f"augmentation factor must be >= 0, got {self.factor}")
        unknown = set(self.transforms) - TRANSFORMS
        if unknown:
            raise ParameterError(f"unknown transforms {sorted(unknown)}")


def augment(s: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random geometric + elastic warp of the image; label and ids are kept.

    With factor f: shift up to f * extent per axis, rotation up to f * 15
    degrees, isotropic zoom in [1 - f, 1 + f], and an elastic displacement
    field of peak amplitude f * 10 px built from uniform noise smoothed by a
    Gaussian (sigma 8 px). Bilinear resampling, zero fill outside the image.
    """
    f = cfg.factor
    if f == 0 or not cfg.transforms:
        return Sample(s.image.copy(), s.label, s.patient_id, s.sample_id)
    img = s.image[..., 0].astype(np.float64)
    h, w = img.shape
    t = cfg.transforms
    # Draw every variate regardless of the enabled set so streams stay aligned.
    ty, tx = rng.uniform(-f, f, size=2) * (h, w)
    theta = np.deg2rad(rng.uniform(-f, f) * MAX_ROTATION_DEG)
    zoom = rng.uniform(1 - f, 1 + f)
    noise = rng.uniform(-1.0, 1.0, size=(2, h, w))
    ty, tx = (ty, tx) if "shift" in t else (0.0, 0.0)
    theta = theta if "rotation" in t else 0.0
    zoom = zoom if "zoom" in t and zoom > 0 else 1.0

    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    oy, ox = yy - cy - ty, xx - cx - tx
    cos, sin = np.cos(theta), np.sin(theta)
    src_y = cy + (cos * oy - sin * ox) / zoom
    src_x = cx + (sin * oy + cos * ox) / zoom
    if "elastic" in t:
        disp = np.stack([ndimage.gaussian_filter(n, ELASTIC_SIGMA_PX, mode="reflect") for n in noise])
        peak = np.abs(disp).max()
        if peak > 0:
            disp *= f * ELASTIC_AMPLITUDE_PX / peak
        src_y = src_y + disp[0]
        src_x = src_x + disp[1]
    out = ndimage.map_coordinates(img, [src_y, src_x], order=1, mode="constant", cval=0.0)
    out = np.clip(out, 0.0, 1.0).astype(DTYPE)[..., None]
    return Sample(out, s.label, s.patient_id, s.sample_id)


# -- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...] = ()
    folds: tuple[Fold, ...] = ()
    achieved: dict = field(default_factory=dict)  # per-class test fraction reached


def _patients_by_class(d: Dataset) -> dict[int, list[tuple[str, list[str]]]]:
    members: dict[str, list[Sample]] = defaultdict(list)
    for s in d:
        members[s.patient_id].append(s)
    out: dict[int, list[tuple[str, list[str]]]] = {GLAUCOMA: [], NORMAL: []}
    for pid, ss in members.items():
        c = Counter(x.label for x in ss)
        # A patient is filed under its majority label (ties -> glaucoma).
        cls = GLAUCOMA if c[GLAUCOMA] >= c[NORMAL] else NORMAL
        out[cls].append((pid, [x.sample_id for x in ss]))
    return out


def _shuffled_by_size(patients, rng):
    order = rng.permutation(len(patients))
    shuffled = [patients[i] for i in order]
    return sorted(shuffled, key=lambda p: -len(p[1]))


def split_train_test(d: Dataset, test_fraction: float = 0.2, rng: np.random.Generator | None = None) -> SplitPlan:
    """Class-stratified, patient-grouped hold-out split.

    Per class, patients are shuffled, ordered by sample count (largest first)
    and greedily packed into the test side while that side stays within
    ``round(test_fraction * class samples)``.
    """
    if not 0 < test_fraction < 1:
        raise ParameterError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = rng if rng is not None else np.random.default_rng(0)
    by_class = _patients_by_class(d)
    test: set[str] = set()
    achieved = {}
    for cls, patients in by_class.items():
        if len(patients) < 2:
            raise PartitionError(
                f"class {LABELS[cls]!r} has {len(patients)} patient(s); a patient-grouped split needs at least 2"
            )
        n = sum(len(ids) for _, ids in patients)
        target = round(test_fraction * n)
        taken = 0
        chosen: list[list[str]] = []
        ordered = _shuffled_by_size(patients, rng)
        for _, ids in ordered:
            if taken + len(ids) <= target:
                chosen.append(ids)
                taken += len(ids)
        if not chosen:
            smallest = min(ordered, key=lambda p: len(p[1]))
            chosen.append(smallest[1])
            taken = len(smallest[1])
        if taken >= n:
            raise PartitionError(f"class {LABELS[cls]!r}: no patients left for training")
        for ids in chosen:
            test.update(ids)
        achieved[LABELS[cls]] = taken / n
    train_ids = tuple(i for i in d.ids if i not in test)
    test_ids = tuple(i for i in d.ids if i in test)
    return SplitPlan(train_ids, test_ids, (), achieved)


def make_icv_folds(train: Dataset, k: int = 5, rng: np.random.Generator | None = None) -> SplitPlan:
    """Patient-grouped, class-stratified k-fold partition of ``train``.

    Patients of each class (largest first, shuffled within equal sizes) go to
    the fold with the fewest samples of that class, breaking ties by the
    fold's total size and then its index.
    """
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    rng = rng if rng is not None else np.random.default_rng(0)
    by_class = _patients_by_class(train)
    fold_of: dict[str, int] = {}
    totals = [0] * k
    for cls, patients in by_class.items():
        if len(patients) < k:
            raise PartitionError(
                f"class {LABELS[cls]!r} has {len(patients)} patient(s); {k} folds need at least {k}"
            )
        per_class = [0] * k
        for _, ids in _shuffled_by_size(patients, rng):
            j = min(range(k), key=lambda f: (per_class[f], totals[f], f))
            per_class[j] += len(ids)
            totals[j] += len(ids)
            for i in ids:
                fold_of[i] = j
    folds = []
    for j in range(k):
        val = tuple(i for i in train.ids if fold_of[i] == j)
        tr = tuple(i for i in train.ids if fold_of[i] != j)
        folds.append(Fold(tr, val))
    return SplitPlan(tuple(train.ids), (), tuple(folds))


def patient_overlap(d: Dataset, a_ids, b_ids) -> set[str]:
    """Patient ids present on both sides of a split."""
    pid = {s.sample_id: s.patient_id for s in d}
    return {pid[i] for i in a_ids} & {pid[i] for i in b_ids}
