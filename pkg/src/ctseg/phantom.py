"""Seeded synthetic chest phantoms with analytically known lung masks.

Each axial slice holds a soft-tissue body ellipse, two lung ellipsoid
sections, a spine and sternum, and a central air-filled airway that is kept
out of the lung mask.  The ``covid`` cohort adds peripheral lesions
(ground-glass or consolidation) inside the lungs; lesion voxels stay in the
reference mask.
"""

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, IoError
from .volumes import BinaryMask, Volume, write_nifti

MANIFEST_FIELDS = ("case_id", "cohort", "seed", "volume_path", "mask_path")
PERIPHERAL_SHELL = 0.15


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (128, 128, 24)
    spacing: tuple = (1.5, 1.5, 5.0)
    cohort: str = "normal"
    lesion_count: tuple = (1, 6)
    ggo_hu: tuple = (-500.0, -300.0)
    consolidation_hu: tuple = (-20.0, 60.0)
    lesion_radius_mm: tuple = (5.0, 14.0)
    air_hu: float = -1000.0
    lung_hu: tuple = (-880.0, -700.0)
    soft_tissue_hu: tuple = (20.0, 60.0)
    bone_hu: tuple = (300.0, 700.0)
    noise_sigma: float = 15.0
    seed: int = 0

    def validate(self):
        if len(self.shape) != 3 or self.shape[0] < 32 or self.shape[1] < 32 or self.shape[2] < 8:
            raise ConfigError(f"phantom grid must be at least 32x32x8, got {self.shape}")
        if self.cohort not in ("normal", "covid"):
            raise ConfigError(f"cohort must be 'normal' or 'covid', got {self.cohort!r}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigError("spacing must be three positive values")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ConfigError("bad lesion_count range")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        return self


@dataclass
class Lesion:
    kind: str  # "ggo" or "consolidation"
    hu: float
    side: int  # 0 = first lung (low x), 1 = second
    centers: list  # sphere centres (x, y, z) in voxel coordinates
    radius_mm: list
    shell_fraction: list  # distance to the lung boundary / lung radius, along each centre's ray


@dataclass
class PhantomCase:
    volume: Volume
    mask: BinaryMask
    cohort: str
    seed: int
    lesion_mask: np.ndarray = field(repr=False)
    lesions: list = field(default_factory=list)
    clean_hu: np.ndarray | None = field(default=None, repr=False)  # before noise


@dataclass
class _Anatomy:
    center: tuple
    body_axes: tuple
    lungs: list  # [(cx, cy, cz, ax, ay, az)]
    airway: tuple  # (cx, cy, r)
    spine: tuple  # (cx, cy, ax, ay)
    sternum: tuple


def _uniform(rng, lo_hi):
    return float(rng.uniform(lo_hi[0], lo_hi[1]))


def _anatomy(spec, rng):
    nx, ny, nz = spec.shape
    j = lambda s: 1.0 + rng.uniform(-s, s)  # noqa: E731
    cx = (nx - 1) / 2 + rng.uniform(-0.02, 0.02) * nx
    cy = (ny - 1) / 2 + rng.uniform(-0.02, 0.02) * ny
    body = (0.42 * nx * j(0.03), 0.33 * ny * j(0.03))
    lungs = []
    for sign in (-1.0, 1.0):
        lungs.append((
            cx + sign * 0.19 * nx * j(0.03),
            cy - 0.02 * ny,
            (nz - 1) / 2 + rng.uniform(-0.03, 0.03) * nz,
            0.125 * nx * j(0.05),
            0.215 * ny * j(0.05),
            0.40 * nz * j(0.05),
        ))
    airway = (cx, cy - 0.05 * ny, 0.03 * nx)
    spine = (cx, cy + 0.24 * ny, 0.07 * nx, 0.06 * ny)
    sternum = (cx, cy - 0.29 * ny, 0.05 * nx, 0.025 * ny)
    return _Anatomy((cx, cy), body, lungs, airway, spine, sternum)


def _ellipse(xx, yy, cx, cy, ax, ay):
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def _lung_section(lung, z):
    cx, cy, cz, ax, ay, az = lung
    t = (z - cz) / az
    if abs(t) >= 1.0:
        return 0.0
    return float(np.sqrt(1.0 - t * t))


def _check_fits(spec, anat):
    nx, ny, _ = spec.shape
    cx, cy = anat.center
    bx, by = anat.body_axes
    if cx - bx < 0.5 or cx + bx > nx - 1.5 or cy - by < 0.5 or cy + by > ny - 1.5:
        raise ConfigError("body ellipse does not fit in the grid")
    for lx, ly, _, ax, ay, _ in anat.lungs:
        # lung ellipse must lie strictly inside the body ellipse
        theta = np.linspace(0, 2 * np.pi, 64)
        px = lx + ax * np.cos(theta)
        py = ly + ay * np.sin(theta)
        if np.any(((px - cx) / bx) ** 2 + ((py - cy) / by) ** 2 >= 0.95):
            raise ConfigError("lungs are not placeable inside the body")


def _place_lesions(spec, anat, lung_masks, rng):
    nx, ny, nz = spec.shape
    sx, sy, sz = spec.spacing
    n = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    xx, yy, zz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    lesion_mask = np.zeros(spec.shape, dtype=bool)
    hu_map = np.zeros(spec.shape, dtype=np.float64)
    lesions = []
    for _ in range(n):
        side = int(rng.integers(0, 2))
        lung = anat.lungs[side]
        lcx, lcy, lcz, lax, lay, laz = lung
        kind = "ggo" if rng.random() < 0.5 else "consolidation"
        hu = _uniform(rng, spec.ggo_hu if kind == "ggo" else spec.consolidation_hu)
        z_lo = int(np.ceil(lcz - 0.8 * laz))
        z_hi = int(np.floor(lcz + 0.8 * laz))
        z0 = int(rng.integers(max(z_lo, 0), min(z_hi, nz - 1) + 1))
        theta0 = rng.uniform(0, 2 * np.pi)
        n_spheres = int(rng.integers(1, 4))
        centers, radii, fracs = [], [], []
        blob = np.zeros(spec.shape, dtype=bool)
        for k in range(n_spheres):
            z = int(np.clip(z0 + (rng.integers(-1, 2) if k else 0), 0, nz - 1))
            s = _lung_section(lung, z)
            if s < 0.3:
                z, s = z0, _lung_section(lung, z0)
            theta = theta0 + (rng.uniform(-0.3, 0.3) if k else 0.0)
            f = rng.uniform(1.0 - PERIPHERAL_SHELL, 1.0)
            px = lcx + f * lax * s * np.cos(theta)
            py = lcy + f * lay * s * np.sin(theta)
            r = _uniform(rng, spec.lesion_radius_mm)
            d2 = ((xx - px) * sx / r) ** 2 + ((yy - py) * sy / r) ** 2 + ((zz - z) * sz / r) ** 2
            blob |= d2 <= 1.0
            centers.append((float(px), float(py), float(z)))
            radii.append(r)
            fracs.append(1.0 - f)
        blob &= lung_masks[side]
        lesion_mask |= blob
        hu_map[blob] = hu
        lesions.append(Lesion(kind, hu, side, centers, radii, fracs))
    return lesion_mask, hu_map, lesions


def generate(spec=PhantomSpec()):
    """Build one phantom case; identical specs give bit-identical output."""
    spec = spec.validate()
    geometry_ss, lesion_ss, noise_ss = np.random.SeedSequence(int(spec.seed)).spawn(3)
    rng = np.random.default_rng(geometry_ss)
    anat = _anatomy(spec, rng)
    _check_fits(spec, anat)
    lung_hu = _uniform(rng, spec.lung_hu)
    soft_hu = _uniform(rng, spec.soft_tissue_hu)
    bone_hu = _uniform(rng, spec.bone_hu)

    nx, ny, nz = spec.shape
    xx, yy = np.meshgrid(np.arange(nx, dtype=np.float64), np.arange(ny, dtype=np.float64), indexing="ij")
    hu = np.full(spec.shape, spec.air_hu, dtype=np.float64)
    lung_masks = [np.zeros(spec.shape, dtype=bool) for _ in anat.lungs]
    airway = np.zeros(spec.shape, dtype=bool)
    body2d = _ellipse(xx, yy, anat.center[0], anat.center[1], *anat.body_axes)
    spine2d = _ellipse(xx, yy, *anat.spine)
    sternum2d = _ellipse(xx, yy, *anat.sternum)
    ax_, ay_, ar_ = anat.airway
    airway2d = (xx - ax_) ** 2 + (yy - ay_) ** 2 <= ar_ * ar_
    for z in range(nz):
        sl = hu[:, :, z]
        sl[body2d] = soft_hu
        sl[spine2d | sternum2d] = bone_hu
        for side, lung in enumerate(anat.lungs):
            s = _lung_section(lung, z)
            if s <= 0:
                continue
            sec = _ellipse(xx, yy, lung[0], lung[1], lung[3] * s, lung[4] * s) & body2d
            lung_masks[side][:, :, z] = sec & ~airway2d
            sl[sec] = lung_hu
        sl[airway2d & body2d] = spec.air_hu
        airway[:, :, z] = airway2d & body2d
    mask = (lung_masks[0] | lung_masks[1]) & ~airway
    if not mask.any():
        raise ConfigError("lungs are empty on this grid")

    lesion_mask = np.zeros(spec.shape, dtype=bool)
    lesions = []
    if spec.cohort == "covid":
        lesion_mask, lesion_hu, lesions = _place_lesions(
            spec, anat, [m & mask for m in lung_masks], np.random.default_rng(lesion_ss)
        )
        hu[lesion_mask] = lesion_hu[lesion_mask]

    clean = hu.copy()
    if spec.noise_sigma > 0:
        hu += spec.noise_sigma * np.random.default_rng(noise_ss).standard_normal(spec.shape)
    volume = Volume(hu.astype(np.float32), spec.spacing, (0.0, 0.0, 0.0))
    return PhantomCase(
        volume=volume,
        mask=BinaryMask(mask, spec.spacing, (0.0, 0.0, 0.0)),
        cohort=spec.cohort,
        seed=int(spec.seed),
        lesion_mask=lesion_mask,
        lesions=lesions,
        clean_hu=clean,
    )


def corpus_plan(n_train, n_test_normal, n_test_covid, base_seed):
    """(case_id, cohort, seed) rows; training phantoms use the covid cohort."""
    for name, n in (("n_train", n_train), ("n_test_normal", n_test_normal), ("n_test_covid", n_test_covid)):
        if int(n) < 1:
            raise ConfigError(f"{name} must be >= 1")
    rows = []
    index = 0
    for prefix, cohort, n in (("train", "covid", n_train), ("normal", "normal", n_test_normal),
                              ("covid", "covid", n_test_covid)):
        for k in range(int(n)):
            rows.append((f"{prefix}{k:04d}", cohort, int(base_seed) + index))
            index += 1
    return rows


def generate_corpus(out_dir, n_train, n_test_normal, n_test_covid, base_seed=0, spec=PhantomSpec()):
    """Write volume/mask NIfTI pairs plus ``manifest.csv``; returns the manifest path.

    Paths in the manifest are relative to ``out_dir``.
    """
    plan = corpus_plan(n_train, n_test_normal, n_test_covid, base_seed)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise IoError(f"{out_dir} is not writable")
    rows = []
    for case_id, cohort, seed in plan:
        case = generate(replace(spec, cohort=cohort, seed=seed))
        vol_name = f"{case_id}_vol.nii"
        mask_name = f"{case_id}_mask.nii"
        write_nifti(case.volume, os.path.join(out_dir, vol_name), f"phantom {cohort} seed {seed}")
        write_nifti(case.mask, os.path.join(out_dir, mask_name), f"lung mask seed {seed}")
        rows.append({"case_id": case_id, "cohort": cohort, "seed": seed,
                     "volume_path": vol_name, "mask_path": mask_name})
    path = os.path.join(out_dir, "manifest.csv")
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def read_manifest(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
