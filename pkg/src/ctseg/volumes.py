"""CT volumes, reference masks and the preprocessing chain.

Axes are (x, y, z) with z the axial slice index.  Preprocessed stacks are
laid out slice-first, (z, rows, cols), where rows follow x and cols follow y.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels, nifti
from .errors import ConfigError, DataError, NoBodyFound, ShapeError

HU_MIN = -1024.0
HU_MAX = 3071.0
BODY_THRESHOLD_HU = -500.0


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"volume must be 3D, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))


@dataclass
class BinaryMask(Volume):
    def __post_init__(self):
        super().__post_init__()
        self.data = self.data.astype(bool, copy=False)


@dataclass(frozen=True)
class PreprocSpec:
    target_rows: int = 296
    target_cols: int = 216
    hu_window: tuple = (-1024.0, 400.0)
    crop_margin_vox: int = 5

    def __post_init__(self):
        if self.target_rows < 1 or self.target_cols < 1:
            raise ConfigError("resize targets must be positive")
        if not self.hu_window[0] < self.hu_window[1]:
            raise ConfigError("HU window needs low < high")
        if self.crop_margin_vox < 0:
            raise ConfigError("crop margin must be non-negative")


@dataclass(frozen=True)
class Box:
    """Axis-aligned voxel box, ``lo`` inclusive, ``hi`` exclusive."""

    lo: tuple
    hi: tuple

    @property
    def shape(self):
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    def slices(self):
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))

    def grow(self, margin, grid_shape):
        lo = tuple(max(0, l - margin) for l in self.lo)
        hi = tuple(min(n, h + margin) for h, n in zip(self.hi, grid_shape))
        return Box(lo, hi)

    def contains(self, other):
        return all(a <= b for a, b in zip(self.lo, other.lo)) and all(a >= b for a, b in zip(self.hi, other.hi))


# ----------------------------------------------------------------------------
# file IO
# ----------------------------------------------------------------------------


def read_nifti(path):
    data, spacing, origin = nifti.read(path)
    return Volume(data, spacing, origin)


def read_mask(path):
    """Read a mask; every voxel must be exactly 0 or 1."""
    data, spacing, origin = nifti.read(path)
    if not np.all((data == 0) | (data == 1)):
        raise DataError(f"{path}: mask voxels must be 0 or 1")
    return BinaryMask(data.astype(bool), spacing, origin)


def write_nifti(volume, path, description=""):
    nifti.write(path, volume.data, volume.spacing, volume.origin, description)


# ----------------------------------------------------------------------------
# cropping
# ----------------------------------------------------------------------------


def bbox_of(mask):
    """Tight bounding box of the true voxels, or None for an empty mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    lo, hi = [], []
    for axis in range(mask.ndim):
        other = tuple(a for a in range(mask.ndim) if a != axis)
        idx = np.flatnonzero(mask.any(axis=other))
        lo.append(int(idx[0]))
        hi.append(int(idx[-1]) + 1)
    return Box(tuple(lo), tuple(hi))


def largest_component(mask):
    """Largest 6-connected component; ties go to the earliest in raster order."""
    labels, n = kernels.label6(mask)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def body_bbox(volume, margin=5, threshold=BODY_THRESHOLD_HU):
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if data.size == 0:
        raise ShapeError("empty volume")
    body = data > threshold
    if not body.any():
        raise NoBodyFound(f"no voxel above {threshold} HU")
    return bbox_of(largest_component(body)).grow(margin, data.shape)


def mask_bbox(mask, margin=5):
    data = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    box = bbox_of(data)
    if box is None:
        return None
    return box.grow(margin, data.shape)


# ----------------------------------------------------------------------------
# resampling and intensity scaling
# ----------------------------------------------------------------------------


def _check_target(rows, cols):
    if int(rows) < 1 or int(cols) < 1:
        raise ConfigError(f"resize target must be at least 1x1, got {rows}x{cols}")


def resize_slice(image, rows, cols):
    """Bilinear resize with half-pixel centres and edge clamping."""
    _check_target(rows, cols)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 1:
        raise ShapeError(f"expected a non-empty 2D slice, got {image.shape}")
    return kernels.bilinear_resize(image, int(rows), int(cols))


def resize_mask_slice(mask, rows, cols):
    """Nearest-neighbour resize under the same half-pixel mapping."""
    _check_target(rows, cols)
    mask = np.asarray(mask)
    if mask.ndim != 2 or min(mask.shape) < 1:
        raise ShapeError(f"expected a non-empty 2D slice, got {mask.shape}")
    return kernels.nearest_resize(mask.astype(bool), int(rows), int(cols))


def normalize_hu(volume, window=(-1024.0, 400.0)):
    low, high = float(window[0]), float(window[1])
    if not low < high:
        raise ConfigError("HU window needs low < high")
    data = volume.data if isinstance(volume, Volume) else volume
    out = (np.clip(np.asarray(data, dtype=np.float64), low, high) - low) / (high - low)
    if isinstance(volume, Volume):
        return Volume(out, volume.spacing, volume.origin)
    return out


# ----------------------------------------------------------------------------
# full preprocessing
# ----------------------------------------------------------------------------


@dataclass
class CropRecord:
    original_shape: tuple
    spacing: tuple
    origin: tuple
    box_lo: tuple
    box_hi: tuple
    target_rows: int
    target_cols: int
    hu_low: float
    hu_high: float
    crop_source: str = "body"

    @property
    def box(self):
        return Box(tuple(self.box_lo), tuple(self.box_hi))

    @property
    def stack_spacing(self):
        """Voxel spacing of the resized stack along (rows, cols, slices)."""
        nx, ny, _ = self.box.shape
        return (
            self.spacing[0] * nx / self.target_rows,
            self.spacing[1] * ny / self.target_cols,
            self.spacing[2],
        )

    @property
    def stack_origin(self):
        return tuple(o + lo * s for o, lo, s in zip(self.origin, self.box_lo, self.spacing))

    def to_text(self):
        def fmt(v):
            if isinstance(v, (tuple, list)):
                return ", ".join(fmt(x) for x in v)
            if isinstance(v, float):
                return repr(v)
            return str(v)

        keys = list(self.__dataclass_fields__)
        return "".join(f"{k} = {fmt(getattr(self, k))}\n" for k in keys)

    @classmethod
    def from_text(cls, text):
        raw = parse_key_values(text)
        ints3 = lambda s: tuple(int(v) for v in s.split(","))  # noqa: E731
        floats3 = lambda s: tuple(float(v) for v in s.split(","))  # noqa: E731
        try:
            return cls(
                original_shape=ints3(raw["original_shape"]),
                spacing=floats3(raw["spacing"]),
                origin=floats3(raw["origin"]),
                box_lo=ints3(raw["box_lo"]),
                box_hi=ints3(raw["box_hi"]),
                target_rows=int(raw["target_rows"]),
                target_cols=int(raw["target_cols"]),
                hu_low=float(raw["hu_low"]),
                hu_high=float(raw["hu_high"]),
                crop_source=raw.get("crop_source", "body"),
            )
        except (KeyError, ValueError) as exc:
            raise DataError(f"malformed crop record: {exc}") from exc


def parse_key_values(text):
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class PreprocessedCase:
    images: np.ndarray  # (z, rows, cols) in [0, 1]
    hu: np.ndarray  # (z, rows, cols) resized HU, not normalised
    mask: np.ndarray | None  # (z, rows, cols) bool
    record: CropRecord = field(repr=False)

    def as_volume(self, which="images"):
        arr = getattr(self, which)
        return Volume(np.transpose(arr, (1, 2, 0)), self.record.stack_spacing, self.record.stack_origin)


def stack_from_volume(volume):
    """(x, y, z) volume data -> (z, rows, cols) stack."""
    return np.ascontiguousarray(np.transpose(np.asarray(volume.data), (2, 0, 1)))


def preprocess_case(volume, mask=None, spec=PreprocSpec(), crop="auto"):
    """Crop, resize every axial slice to the target matrix and scale HU to [0, 1].

    ``crop`` selects the crop box: ``"mask"`` uses the reference-mask bounding
    box plus margin, ``"body"`` the body bounding box, ``"auto"`` the mask when
    one is given (and non-empty) and the body otherwise.
    """
    if mask is not None and tuple(mask.shape) != tuple(volume.shape):
        raise ShapeError(f"mask grid {mask.shape} differs from volume grid {volume.shape}")
    if crop not in ("auto", "mask", "body"):
        raise ConfigError(f"unknown crop rule {crop!r}")
    box = None
    source = "body"
    if crop in ("auto", "mask") and mask is not None:
        box = mask_bbox(mask, spec.crop_margin_vox)
        source = "mask"
    if box is None:
        if crop == "mask":
            raise DataError("mask crop requested but the reference mask is empty or missing")
        box = body_bbox(volume, spec.crop_margin_vox)
        source = "body"
    rows, cols = spec.target_rows, spec.target_cols
    sub = np.asarray(volume.data, dtype=np.float64)[box.slices()]
    nz = sub.shape[2]
    hu = np.empty((nz, rows, cols), dtype=np.float64)
    for z in range(nz):
        hu[z] = resize_slice(sub[:, :, z], rows, cols)
    images = normalize_hu(hu, spec.hu_window)
    out_mask = None
    if mask is not None:
        msub = np.asarray(mask.data, dtype=bool)[box.slices()]
        out_mask = np.empty((nz, rows, cols), dtype=bool)
        for z in range(nz):
            out_mask[z] = resize_mask_slice(msub[:, :, z], rows, cols)
    record = CropRecord(
        original_shape=tuple(int(s) for s in volume.shape),
        spacing=volume.spacing,
        origin=volume.origin,
        box_lo=box.lo,
        box_hi=box.hi,
        target_rows=rows,
        target_cols=cols,
        hu_low=float(spec.hu_window[0]),
        hu_high=float(spec.hu_window[1]),
        crop_source=source,
    )
    return PreprocessedCase(images, hu, out_mask, record)


def restore_mask(stack, record):
    """Map a (z, rows, cols) mask stack back onto the original grid.

    Nearest-neighbour resampling into the crop box; voxels outside the box
    are background.
    """
    stack = np.asarray(stack, dtype=bool)
    box = record.box
    nx, ny, nz = box.shape
    if stack.shape != (nz, record.target_rows, record.target_cols):
        raise ShapeError(f"stack shape {stack.shape} does not match crop record")
    out = np.zeros(record.original_shape, dtype=bool)
    region = out[box.slices()]
    for z in range(nz):
        region[:, :, z] = resize_mask_slice(stack[z], nx, ny)
    return BinaryMask(out, record.spacing, record.origin)
