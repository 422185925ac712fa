"""Data pipeline: volume ingestion, preprocessing, splits and synthetic phantoms.

Volumes are stored as ``.npz`` archives with keys ``frames`` (T, H, W),
``pixel_spacing`` (mm/pixel, isotropic in-plane), ``slice_thickness`` (mm)
and ``subject_id``. Any volumetric format can be converted to this layout;
the loader refuses files without spacing metadata rather than guessing.
"""

import json
import os
from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import IngestionError, MetadataError, UsageError

PAD_VALUE = -1.0  # background intensity after [-1, 1] normalisation


@dataclass
class Volume:
    """A stack of 2D frames sharing one in-plane pixel spacing."""

    frames: np.ndarray  # (T, H, W) float
    pixel_spacing: float
    slice_thickness: float
    subject_id: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ValueError("frames must be (T, H, W)")
        if self.pixel_spacing <= 0 or self.slice_thickness <= 0:
            raise ValueError("spacing and thickness must be positive")


@dataclass
class ImageSlice:
    pixels: np.ndarray  # (H, W) float in [-1, 1]
    spacing: float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError("pixels must be 2D")


@dataclass
class MaskMap:
    pixels: np.ndarray  # (H, W) float in [0, 1]
    is_binary: bool = True

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError("pixels must be 2D")
        if self.is_binary and not np.isin(self.pixels, (0.0, 1.0)).all():
            raise ValueError("binary mask contains values outside {0, 1}")


@dataclass
class LabelledSample:
    image: ImageSlice
    mask: MaskMap
    sample_id: str = ""
    subject_id: str = ""

    def __post_init__(self):
        if not self.mask.is_binary:
            raise ValueError("labelled masks must be binary")


@dataclass
class UnlabelledSample:
    image: ImageSlice
    sample_id: str = ""
    subject_id: str = ""


@dataclass
class SplitSpec:
    """Volume-level fold assignment (70/15/15 train/val/test)."""

    fold: int
    seed: int
    train_ids: list
    val_ids: list
    test_ids: list


@dataclass
class LabelBudget:
    n_labelled: int
    n_unlabelled: int
    labelled_ids: list
    unlabelled_ids: list
    mask_pool_ids: list

    def __post_init__(self):
        if set(self.mask_pool_ids) & set(self.labelled_ids):
            raise ValueError("mask pool must not overlap labelled samples")


@dataclass
class PhantomSpec:
    """Parameters of the synthetic cardiac phantom.

    Each sample is an annulus around a dark blood-pool cavity (myocardium
    analogue) over a textured background with elliptical distractor blobs and
    look-alike distractor annuli, so the latent code has genuine non-mask
    content to encode and the mask cannot be found by intensity alone.
    Samples are grouped into pseudo-subjects with consistent appearance
    (narrow intensity bands, noise/texture level, possible contrast
    inversion), mimicking scanner and patient variation.
    """

    image_size: int = 64
    ring_center_range: tuple = (24, 40)  # both axes, pixels
    ring_radius_range: tuple = (8, 14)  # inner radius, pixels
    ring_thickness_range: tuple = (3, 6)
    background_texture_scale: float = 0.25
    intensity_bands: dict = field(
        default_factory=lambda: {
            "background": (0.05, 0.40),
            "blob": (0.30, 0.95),
            "ring": (0.40, 1.0),
            "pool": (0.0, 0.15),
        }
    )
    noise_sigma: float = 0.03
    contrast_inversion: float = 0.5  # chance a subject's acquisition inverts tissue contrast
    blob_count_range: tuple = (2, 5)  # distractor blobs per image, [lo, hi)
    annulus_count_range: tuple = (1, 3)  # distractor annuli per image, [lo, hi)
    seed: int = 0

    def __post_init__(self):
        reach = (
            max(self.ring_center_range)
            + max(self.ring_radius_range)
            + max(self.ring_thickness_range)
        )
        lo = min(self.ring_center_range) - max(self.ring_radius_range) - max(
            self.ring_thickness_range
        )
        if reach >= self.image_size or lo < 0:
            raise ValueError("ring can leave the image for some sampled parameters")


def load_volume(path):
    """Load a volume from an ``.npz`` archive with spacing metadata."""
    if not os.path.exists(path):
        raise IngestionError(f"no such volume file: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise MetadataError(f"unreadable volume file {path}: {exc}") from exc
    try:
        with archive:
            if "frames" not in archive:
                raise MetadataError(f"{path}: missing 'frames' array")
            for key in ("pixel_spacing", "slice_thickness"):
                if key not in archive:
                    raise MetadataError(f"{path}: missing '{key}' metadata")
            frames = archive["frames"]
            spacing = float(archive["pixel_spacing"])
            thickness = float(archive["slice_thickness"])
            subject = (
                str(archive["subject_id"]) if "subject_id" in archive else os.path.basename(path)
            )
    except MetadataError:
        raise
    except Exception as exc:
        raise MetadataError(f"corrupt volume file {path}: {exc}") from exc
    if spacing <= 0 or thickness <= 0:
        raise MetadataError(f"{path}: non-positive spacing metadata")
    return Volume(frames=frames, pixel_spacing=spacing, slice_thickness=thickness, subject_id=subject)


def save_volume(volume, path):
    np.savez(
        path,
        frames=volume.frames,
        pixel_spacing=volume.pixel_spacing,
        slice_thickness=volume.slice_thickness,
        subject_id=volume.subject_id,
    )


def resample_volume(volume, target_spacing):
    """Bilinearly resample all frames to ``target_spacing`` mm/pixel."""
    if target_spacing <= 0:
        raise ValueError("target spacing must be positive")
    if target_spacing == volume.pixel_spacing:
        return Volume(
            frames=volume.frames.copy(),
            pixel_spacing=volume.pixel_spacing,
            slice_thickness=volume.slice_thickness,
            subject_id=volume.subject_id,
        )
    _, h, w = volume.frames.shape
    scale = volume.pixel_spacing / target_spacing
    new_h = int(round(h * scale))
    new_w = int(round(w * scale))
    frames = np.stack(
        [
            cv2.resize(f, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
            for f in volume.frames.astype(np.float64)
        ]
    )
    return Volume(
        frames=frames,
        pixel_spacing=target_spacing,
        slice_thickness=volume.slice_thickness,
        subject_id=volume.subject_id,
    )


def normalise_volume(volume):
    """Min-max map the whole volume into [-1, 1]; constant volumes become zeros."""
    if volume.frames.shape[0] < 1:
        raise ValueError("volume has no frames")
    lo = volume.frames.min()
    hi = volume.frames.max()
    if hi == lo:
        frames = np.zeros_like(volume.frames)
    else:
        frames = 2.0 * (volume.frames - lo) / (hi - lo) - 1.0
    return Volume(
        frames=frames,
        pixel_spacing=volume.pixel_spacing,
        slice_thickness=volume.slice_thickness,
        subject_id=volume.subject_id,
    )


def center_crop_or_pad(image_slice, size):
    """Center-crop or pad (with -1) a slice to ``size`` x ``size``."""
    if size % 16 != 0:
        raise ValueError("size must be a multiple of 16")
    out = np.full((size, size), PAD_VALUE, dtype=np.float64)
    h, w = image_slice.pixels.shape
    src_y = max(0, (h - size) // 2)
    src_x = max(0, (w - size) // 2)
    dst_y = max(0, (size - h) // 2)
    dst_x = max(0, (size - w) // 2)
    ny = min(h, size)
    nx = min(w, size)
    out[dst_y : dst_y + ny, dst_x : dst_x + nx] = image_slice.pixels[
        src_y : src_y + ny, src_x : src_x + nx
    ]
    return ImageSlice(pixels=out, spacing=image_slice.spacing)


def make_splits(subject_ids, fold, n_folds=3, seed=0):
    """Deterministic 70/15/15 volume-level split with disjoint test sets per fold."""
    if n_folds != 3:
        raise ValueError("only 3-fold splitting is supported")
    if not 0 <= fold < n_folds:
        raise ValueError(f"fold must be in [0, {n_folds})")
    subject_ids = list(subject_ids)
    n = len(subject_ids)
    if n < 7:
        raise ValueError("need at least 7 subjects for a 70/15/15 split")
    rng = np.random.default_rng(seed)
    order = [subject_ids[i] for i in rng.permutation(n)]
    n_test = max(1, int(round(0.15 * n)))
    if n_folds * n_test > n:
        n_test = n // n_folds
    test = order[fold * n_test : (fold + 1) * n_test]
    rest = [s for s in order if s not in test]
    n_val = max(1, int(round(0.15 * n)))
    val = rest[:n_val]
    train = rest[n_val:]
    return SplitSpec(fold=fold, seed=seed, train_ids=train, val_ids=val, test_ids=test)


def make_label_budget(train_samples, n_labelled, n_unlabelled, seed=0):
    """Partition training slices into labelled / unlabelled / unpaired-mask pools.

    ``train_samples`` is a sequence of ``(sample_id, subject_id)`` pairs.
    Labelled slices are drawn whole-subject-first (realistic annotation);
    the mask pool comes only from subjects with no labelled slice, so the
    discriminator never sees a mask paired with a training image.
    """
    train_samples = list(train_samples)
    if n_labelled + n_unlabelled > len(train_samples):
        raise ValueError(
            f"budget {n_labelled}+{n_unlabelled} exceeds {len(train_samples)} available slices"
        )
    if n_labelled < 1:
        raise ValueError("need at least one labelled slice")
    rng = np.random.default_rng(seed)
    by_subject = {}
    for sid, subj in train_samples:
        by_subject.setdefault(subj, []).append(sid)
    subjects = sorted(by_subject)
    subject_order = [subjects[i] for i in rng.permutation(len(subjects))]

    labelled = []
    labelled_subjects = set()
    for subj in subject_order:
        if len(labelled) >= n_labelled:
            break
        slices = by_subject[subj]
        take = min(len(slices), n_labelled - len(labelled))
        picked = [slices[i] for i in rng.permutation(len(slices))[:take]]
        labelled.extend(picked)
        labelled_subjects.add(subj)

    labelled_set = set(labelled)
    remaining = [sid for sid, _ in train_samples if sid not in labelled_set]
    unlabelled = [remaining[i] for i in rng.permutation(len(remaining))[:n_unlabelled]]

    mask_pool = [
        sid for sid, subj in train_samples if subj not in labelled_subjects
    ]
    if not mask_pool:
        raise UsageError(
            "no subjects left outside the labelled set to build an unpaired mask pool"
        )
    return LabelBudget(
        n_labelled=n_labelled,
        n_unlabelled=n_unlabelled,
        labelled_ids=labelled,
        unlabelled_ids=unlabelled,
        mask_pool_ids=mask_pool,
    )


def _annulus_mask(size, cy, cx, r_in, r_out):
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return ((d2 >= r_in**2) & (d2 <= r_out**2)).astype(np.float64)


def _subject_style(spec, subject):
    """Per-subject appearance: each pseudo-subject keeps a consistent narrow
    slice of every intensity band plus its own noise and texture levels, the
    way one scanner/patient has a consistent look. Slices from one subject are
    therefore not representative of the rest of the population."""
    rng = np.random.default_rng([spec.seed, 7919, subject])
    bands = {}
    for name, (lo, hi) in spec.intensity_bands.items():
        centre = rng.uniform(lo, hi)
        half = 0.06 * (hi - lo)
        bands[name] = (max(lo, centre - half), min(hi, centre + half))
    return {
        "bands": bands,
        "noise_mult": rng.uniform(0.5, 2.5),
        "texture_mult": rng.uniform(0.4, 2.0),
        "invert": bool(rng.random() < spec.contrast_inversion),
    }


def _render_phantom(spec, index, with_noise=True, subject=None):
    """Render one phantom image/mask pair. Deterministic in (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if subject is None:
        bands, noise_sigma, texture = spec.intensity_bands, spec.noise_sigma, spec.background_texture_scale
        invert = False
    else:
        style = _subject_style(spec, subject)
        bands = style["bands"]
        noise_sigma = spec.noise_sigma * style["noise_mult"]
        texture = spec.background_texture_scale * style["texture_mult"]
        invert = style["invert"]

    # low-frequency textured background
    bg_lo, bg_hi = bands["background"]
    base = rng.uniform(bg_lo, bg_hi)
    gx, gy = rng.uniform(-1, 1, size=2)
    img = base + texture * (
        gx * (xx / size - 0.5) + gy * (yy / size - 0.5)
    )
    coarse = rng.uniform(-1, 1, size=(4, 4))
    img = img + texture * 0.5 * cv2.resize(
        coarse, (size, size), interpolation=cv2.INTER_CUBIC
    )

    # distractor blobs
    blob_lo, blob_hi = bands["blob"]
    for _ in range(rng.integers(*spec.blob_count_range)):
        bcy, bcx = rng.uniform(0.15 * size, 0.85 * size, size=2)
        ay, ax = rng.uniform(0.04 * size, 0.12 * size, size=2)
        theta = rng.uniform(0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        ry = (yy - bcy) * ct - (xx - bcx) * st
        rx = (yy - bcy) * st + (xx - bcx) * ct
        inside = (ry / ay) ** 2 + (rx / ax) ** 2 <= 1.0
        img[inside] = rng.uniform(blob_lo, blob_hi)

    # myocardium geometry, needed before the distractor annuli are placed
    cy = rng.uniform(*spec.ring_center_range)
    cx = rng.uniform(*spec.ring_center_range)
    r_in = rng.uniform(*spec.ring_radius_range)
    r_out = r_in + rng.uniform(*spec.ring_thickness_range)

    # distractor annuli share the ring band but have a bright interior; only
    # the dark blood-pool cavity identifies the myocardium
    ring_lo, ring_hi = bands["ring"]
    blob_lo, blob_hi = bands["blob"]
    d2_grid = (yy - cy) ** 2 + (xx - cx) ** 2
    for _ in range(rng.integers(*spec.annulus_count_range)):
        for _ in range(8):
            dcy, dcx = rng.uniform(0.15 * size, 0.85 * size, size=2)
            dr_in = rng.uniform(*spec.ring_radius_range)
            dr_out = dr_in + rng.uniform(*spec.ring_thickness_range)
            if (dcy - cy) ** 2 + (dcx - cx) ** 2 > (dr_out + r_out + 2.0) ** 2:
                dd2 = (yy - dcy) ** 2 + (xx - dcx) ** 2
                img[dd2 <= dr_in**2] = rng.uniform(blob_lo, blob_hi)
                img[(dd2 >= dr_in**2) & (dd2 <= dr_out**2)] = rng.uniform(ring_lo, ring_hi)
                break

    # myocardium annulus around a dark cavity, painted last
    mask = _annulus_mask(size, cy, cx, r_in, r_out)
    pool_lo, pool_hi = bands["pool"]
    img[d2_grid < r_in**2] = rng.uniform(pool_lo, pool_hi)
    img[mask == 1.0] = rng.uniform(ring_lo, ring_hi)

    if invert:
        img = 1.0 - img

    if with_noise and noise_sigma > 0:
        img = img + rng.normal(0, noise_sigma, size=img.shape)

    lo, hi = img.min(), img.max()
    img = np.zeros_like(img) if hi == lo else 2.0 * (img - lo) / (hi - lo) - 1.0
    return img, mask, (cy, cx, r_in, r_out)


def generate_phantom(spec, n, slices_per_subject=10):
    """Generate ``n`` labelled phantom samples, grouped into pseudo-subjects."""
    samples = []
    for i in range(n):
        img, mask, _ = _render_phantom(spec, i, subject=i // slices_per_subject)
        samples.append(
            LabelledSample(
                image=ImageSlice(pixels=img, spacing=1.37),
                mask=MaskMap(pixels=mask, is_binary=True),
                sample_id=f"ph{i:05d}",
                subject_id=f"sub{i // slices_per_subject:04d}",
            )
        )
    return samples


def save_phantom_dataset(samples, out_dir, spec, n):
    """Serialize phantom samples as paired arrays plus a JSON manifest."""
    os.makedirs(out_dir, exist_ok=True)
    images = np.stack([s.image.pixels for s in samples])
    masks = np.stack([s.mask.pixels for s in samples])
    np.save(os.path.join(out_dir, "images.npy"), images)
    np.save(os.path.join(out_dir, "masks.npy"), masks)
    manifest = {
        "count": n,
        "seed": spec.seed,
        "spec": {
            "image_size": spec.image_size,
            "ring_center_range": list(spec.ring_center_range),
            "ring_radius_range": list(spec.ring_radius_range),
            "ring_thickness_range": list(spec.ring_thickness_range),
            "background_texture_scale": spec.background_texture_scale,
            "intensity_bands": {k: list(v) for k, v in spec.intensity_bands.items()},
            "noise_sigma": spec.noise_sigma,
            "contrast_inversion": spec.contrast_inversion,
            "blob_count_range": list(spec.blob_count_range),
            "annulus_count_range": list(spec.annulus_count_range),
            "seed": spec.seed,
        },
        "sample_ids": [s.sample_id for s in samples],
        "subject_ids": [s.subject_id for s in samples],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_phantom_dataset(in_dir):
    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    images = np.load(os.path.join(in_dir, "images.npy"))
    masks = np.load(os.path.join(in_dir, "masks.npy"))
    samples = []
    for i in range(manifest["count"]):
        samples.append(
            LabelledSample(
                image=ImageSlice(pixels=images[i], spacing=1.37),
                mask=MaskMap(pixels=masks[i], is_binary=True),
                sample_id=manifest["sample_ids"][i],
                subject_id=manifest["subject_ids"][i],
            )
        )
    return samples, manifest
