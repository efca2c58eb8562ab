"""Volume records: container IO, phantom synthesis, sampling, augmentation.

The on-disk container is one UTF-8 JSON header line (shape, spacing, dtype
tags, case id), a newline, the image voxels as little-endian float32 in
(H, W, D) row-major order, then the label voxels as uint8. The phantom
generator reproduces the small-target regime: one ellipsoidal organ with a
few tumour spheres strictly inside it, each class rendered as its mean
intensity plus Gaussian texture.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_DTYPE = "<f4"
LABEL_DTYPE = "u1"


class FormatError(ValueError):
    """A volume container is malformed; the message carries the byte offset."""


@dataclass
class VolumeRecord:
    image: np.ndarray          # (H, W, D) float32
    label: np.ndarray          # (H, W, D) uint8
    spacing: tuple             # mm per voxel along (H, W, D)
    case_id: str
    meta: dict = field(default_factory=dict)
    _fg_cache: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.label = np.asarray(self.label, dtype=np.uint8)
        if self.image.shape != self.label.shape:
            raise FormatError(
                f"image {self.image.shape} and label {self.label.shape} shapes differ"
            )
        if self.image.ndim != 3:
            raise FormatError(f"volumes must be 3-d, got shape {self.image.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise FormatError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def foreground_fraction(self) -> float:
        return float((self.label > 0).sum()) / self.label.size

    def foreground_voxels(self) -> np.ndarray:
        """(M, 3) coordinates of nonzero-label voxels; cached, records are immutable."""
        if self._fg_cache is None:
            self._fg_cache = np.argwhere(self.label > 0)
        return self._fg_cache


# -- container ------------------------------------------------------------------


def save_volume(record: VolumeRecord, path):
    header = {
        "shape": list(record.image.shape),
        "spacing": list(record.spacing),
        "image_dtype": IMAGE_DTYPE,
        "label_dtype": LABEL_DTYPE,
        "case_id": record.case_id,
        "meta": record.meta,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        f.write(np.ascontiguousarray(record.image, dtype=IMAGE_DTYPE).tobytes())
        f.write(np.ascontiguousarray(record.label, dtype=LABEL_DTYPE).tobytes())


def load_volume(path) -> VolumeRecord:
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    offset = len(header_line)
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad header line (bytes 0..{offset}): {exc}") from exc
    if header.get("image_dtype") != IMAGE_DTYPE or header.get("label_dtype") != LABEL_DTYPE:
        raise FormatError(
            f"{path}: unknown dtype tags "
            f"{header.get('image_dtype')}/{header.get('label_dtype')} at byte {offset}"
        )
    shape = tuple(int(s) for s in header["shape"])
    n = int(np.prod(shape))
    need = 4 * n + n
    if len(payload) != need:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes at offset {offset}, "
            f"expected {need} for shape {shape}"
        )
    image = np.frombuffer(payload[: 4 * n], dtype=IMAGE_DTYPE).reshape(shape).copy()
    label = np.frombuffer(payload[4 * n :], dtype=LABEL_DTYPE).reshape(shape).copy()
    return VolumeRecord(image, label, tuple(header["spacing"]), header["case_id"],
                        dict(header.get("meta", {})))


# -- synthetic phantoms -----------------------------------------------------------


class GenerationError(RuntimeError):
    """Phantom constraints could not be satisfied within the retry budget."""


@dataclass
class SyntheticSpec:
    """Small-target phantom: ellipsoidal organ, tumour spheres inside it."""

    volume_shape: tuple = (48, 48, 48)
    spacing: tuple = (1.0, 1.0, 1.0)
    num_classes: int = 3
    organ_radius_range: tuple = (10.0, 16.0)
    tumour_count_range: tuple = (1, 2)
    tumour_radius_range: tuple = (2.0, 4.0)
    tumour_fraction_bound: float = 0.006
    class_means: tuple = (0.0, 0.5, 1.0)
    class_sigmas: tuple = (0.1, 0.1, 0.1)
    seed: int = 0
    max_attempts: int = 100


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def synthesize_case(spec: SyntheticSpec, seed: int, case_id: str | None = None) -> VolumeRecord:
    """Deterministic phantom for (spec, seed); labels are {0 bg, 1 organ, 2 tumour}."""
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in spec.volume_shape)
    lo, hi = spec.organ_radius_range

    for attempt in range(spec.max_attempts):
        radii = rng.uniform(lo, hi, size=3)
        if any(2 * r + 2 >= s for r, s in zip(radii, shape)):
            continue
        center = np.array([
            rng.uniform(r + 1, s - r - 1) for r, s in zip(radii, shape)
        ])
        organ = _ellipsoid_mask(shape, center, radii)

        n_tum = int(rng.integers(spec.tumour_count_range[0], spec.tumour_count_range[1] + 1))
        tumour = np.zeros(shape, dtype=bool)
        placed = 0
        for _ in range(spec.max_attempts):
            if placed == n_tum:
                break
            r = float(rng.uniform(*spec.tumour_radius_range))
            # keep the whole sphere strictly inside the organ ellipsoid
            margin = r / min(radii)
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            rad_frac = rng.uniform(0, max(1.0 - margin - 0.05, 0.0))
            c = center + u * rad_frac * radii
            ball = _ellipsoid_mask(shape, c, (r, r, r))
            if not ball.any() or (ball & ~organ).any():
                continue
            cand = tumour | ball
            if cand.sum() / cand.size > spec.tumour_fraction_bound:
                continue
            tumour = cand
            placed += 1
        if placed < spec.tumour_count_range[0]:
            continue

        label = np.zeros(shape, dtype=np.uint8)
        label[organ] = 1
        label[tumour] = 2
        means = np.asarray(spec.class_means, dtype=np.float32)
        sigmas = np.asarray(spec.class_sigmas, dtype=np.float32)
        image = means[label] + sigmas[label] * rng.standard_normal(shape).astype(np.float32)
        frac = float(tumour.sum()) / tumour.size
        return VolumeRecord(
            image, label, spec.spacing,
            case_id or f"case_{seed:05d}",
            meta={"tumour_fraction": frac, "seed": int(seed)},
        )

    raise GenerationError(
        f"could not place a valid phantom after {spec.max_attempts} attempts (seed {seed})"
    )


def make_dataset(spec: SyntheticSpec, count: int, seed: int | None = None):
    """A list of phantoms with sequential seeds derived from the base seed."""
    base = spec.seed if seed is None else seed
    return [
        synthesize_case(spec, base + i, case_id=f"case_{base + i:05d}")
        for i in range(count)
    ]


def write_dataset_index(records, paths, index_path, split="train"):
    entries = [
        {"case_id": r.case_id, "path": str(p), "split": split}
        for r, p in zip(records, paths)
    ]
    with open(index_path, "w") as f:
        json.dump({"cases": entries}, f, indent=2)


def load_dataset_index(index_path):
    with open(index_path) as f:
        index = json.load(f)
    return [load_volume(e["path"]) for e in index["cases"]]


# -- patch sampling ----------------------------------------------------------------


@dataclass
class PatchSpec:
    patch_shape: tuple = (96, 96, 96)
    oversample_ratio: float = 0.5

    def __post_init__(self):
        self.patch_shape = tuple(int(s) for s in self.patch_shape)
        if not 0.0 <= self.oversample_ratio <= 1.0:
            raise ValueError(f"oversample_ratio must be in [0, 1], got {self.oversample_ratio}")


def _patch_corner_for_voxel(voxel, patch_shape, vol_shape):
    """Window corner centred on the voxel, clamped to stay inside the volume."""
    corner = []
    for v, p, s in zip(voxel, patch_shape, vol_shape):
        c = int(v) - p // 2
        corner.append(int(np.clip(c, 0, s - p)))
    return tuple(corner)


def _extract(record: VolumeRecord, corner, patch_shape):
    sl = tuple(slice(c, c + p) for c, p in zip(corner, patch_shape))
    return record.image[sl], record.label[sl]


def sample_batch(dataset, patch: PatchSpec, batch_size: int, rng: np.random.Generator):
    """Foreground-oversampled patch batch.

    ceil(batch_size * oversample_ratio) slots are foreground-forced: a random
    foreground voxel is drawn and the window positioned to contain it. The
    rest are uniform. Every patch lies fully inside its volume.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    pshape = patch.patch_shape
    for rec in dataset:
        if any(s < p for s, p in zip(rec.image.shape, pshape)):
            raise ValueError(
                f"volume {rec.case_id} shape {rec.image.shape} smaller than patch {pshape}"
            )
    n_forced = math.ceil(batch_size * patch.oversample_ratio)
    out = []
    for i in range(batch_size):
        rec = dataset[int(rng.integers(len(dataset)))]
        vshape = rec.image.shape
        if i < n_forced:
            fg = rec.foreground_voxels()
            if len(fg) == 0:
                log.warning("case %s has no foreground; falling back to uniform sampling",
                            rec.case_id)
                corner = tuple(int(rng.integers(s - p + 1)) for s, p in zip(vshape, pshape))
            else:
                voxel = fg[int(rng.integers(len(fg)))]
                corner = _patch_corner_for_voxel(voxel, pshape, vshape)
        else:
            corner = tuple(int(rng.integers(s - p + 1)) for s, p in zip(vshape, pshape))
        out.append(_extract(rec, corner, pshape))
    return out


def apply_flip(image: np.ndarray, label: np.ndarray, axes_mask):
    """Flip both arrays along every axis whose mask entry is true."""
    axes = tuple(i for i, m in enumerate(axes_mask) if m)
    if not axes:
        return image, label
    return np.flip(image, axes).copy(), np.flip(label, axes).copy()


def random_flip(image: np.ndarray, label: np.ndarray, rng: np.random.Generator):
    """Each spatial axis is flipped independently with probability 0.5."""
    if image.shape != label.shape:
        raise ValueError(f"image {image.shape} and label {label.shape} shapes differ")
    mask = rng.random(3) < 0.5
    return apply_flip(image, label, mask)


# -- preprocessing -----------------------------------------------------------------


def preprocess(record: VolumeRecord, target_spacing=None) -> VolumeRecord:
    """Crop the nonzero bounding box, optionally resample, z-score normalize.

    Image resampling is trilinear, labels nearest-neighbour. Normalization
    statistics come from the nonzero region of the cropped image.
    """
    nz = np.argwhere(record.image != 0)
    if len(nz) == 0:
        raise ValueError(f"case {record.case_id}: image is all zeros")
    lo = nz.min(axis=0)
    hi = nz.max(axis=0) + 1
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    image = record.image[sl].astype(np.float64)
    label = record.label[sl]
    spacing = record.spacing

    if target_spacing is not None:
        target_spacing = tuple(float(s) for s in target_spacing)
        scale = [s / t for s, t in zip(spacing, target_spacing)]
        new_shape = tuple(max(1, int(round(n * f))) for n, f in zip(image.shape, scale))
        grids = np.meshgrid(
            *[
                (np.arange(m) + 0.5) * (n / m) - 0.5
                for m, n in zip(new_shape, image.shape)
            ],
            indexing="ij",
        )
        coords = np.stack(grids)
        image = ndimage.map_coordinates(image, coords, order=1, mode="nearest")
        label = ndimage.map_coordinates(label, coords, order=0, mode="nearest")
        spacing = target_spacing

    region = image != 0
    mu = image[region].mean() if region.any() else 0.0
    sd = image[region].std() if region.any() else 1.0
    image = (image - mu) / (sd if sd > 0 else 1.0)
    return VolumeRecord(image.astype(np.float32), label.astype(np.uint8), spacing,
                        record.case_id, dict(record.meta))
