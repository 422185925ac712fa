"""Latent-space arithmetic: mask/code recombination across images, null-mask
and null-code reconstructions, and comparison figure grids."""

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .data import ImageSlice, MaskMap
from .networks import LatentCode, decompose, reconstruct

MODES = ("self_i", "self_j", "Mi_Zj", "Mj_Zi", "null_mask_i", "null_z_i")


@dataclass
class ArithmeticJob:
    pair: tuple  # (slice_i, slice_j) as ImageSlice
    modes: list = field(default_factory=lambda: list(MODES))

    def __post_init__(self):
        if not self.modes:
            raise ValueError("job must request at least one recombination")
        unknown = set(self.modes) - set(MODES)
        if unknown:
            raise ValueError(f"unknown recombination modes: {sorted(unknown)}")


def _binarized(mask):
    return MaskMap(pixels=(mask.pixels >= 0.5).astype(np.float64), is_binary=True)


def recombine(model, x_a, x_b, mode):
    """Reconstruct from a mask/code combination of two decomposed inputs.

    Modes: self_i = (M_i, Z_i), self_j = (M_j, Z_j), Mi_Zj = (M_i, Z_j),
    Mj_Zi = (M_j, Z_i), null_mask_i = (0, Z_i), null_z_i = (M_i, 0).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    dec_a = decompose(model, x_a)
    dec_b = decompose(model, x_b)
    zeros_mask = MaskMap(np.zeros_like(dec_a.mask.pixels), is_binary=True)
    zeros_z = LatentCode(np.zeros(model.arch.z_dim))
    combos = {
        "self_i": (_binarized(dec_a.mask), dec_a.z),
        "self_j": (_binarized(dec_b.mask), dec_b.z),
        "Mi_Zj": (_binarized(dec_a.mask), dec_b.z),
        "Mj_Zi": (_binarized(dec_b.mask), dec_a.z),
        "null_mask_i": (zeros_mask, dec_a.z),
        "null_z_i": (_binarized(dec_a.mask), zeros_z),
    }
    mask, z = combos[mode]
    return reconstruct(model, mask, z)


def null_mask(model, x):
    """Reconstruction with an all-zero mask and the image's own code."""
    return recombine(model, x, x, "null_mask_i")


def null_z(model, x):
    """Reconstruction with the predicted mask and an all-zero code."""
    return recombine(model, x, x, "null_z_i")


def _to_u8(pixels, lo=-1.0, hi=1.0):
    arr = np.clip((pixels - lo) / (hi - lo), 0.0, 1.0)
    return (arr * 255).astype(np.uint8)


def emit_figure(model, jobs, path, label=""):
    """Write a tiled PNG: one row per job, columns = inputs, predicted mask
    and the requested recombinations. Deterministic for identical inputs."""
    if not jobs:
        raise ValueError("no arithmetic jobs given")
    size = model.arch.image_size
    margin = 14  # label strip above each row
    n_cols = max(2 + len(job.modes) for job in jobs)
    n_rows = len(jobs)
    canvas = Image.new("L", (n_cols * size, n_rows * (size + margin)), color=32)
    draw = ImageDraw.Draw(canvas)
    for r, job in enumerate(jobs):
        x_i, x_j = job.pair
        dec = decompose(model, x_i)
        tiles = [("input_i", x_i.pixels), ("mask_i", dec.mask.pixels * 2.0 - 1.0)]
        for mode in job.modes:
            tiles.append((mode, recombine(model, x_i, x_j, mode).pixels))
        y0 = r * (size + margin)
        for c, (name, pixels) in enumerate(tiles):
            canvas.paste(Image.fromarray(_to_u8(pixels)), (c * size, y0 + margin))
            draw.text((c * size + 2, y0 + 2), name, fill=255)
    if label:
        draw.text((2, n_rows * (size + margin) - 12), label, fill=255)
    try:
        canvas.save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write figure to {path}: {exc}") from exc
    return path


def save_jobs(jobs, path):
    """Serialize jobs (by sample index pair and modes) as JSON."""
    payload = [{"pair": j.pair, "modes": j.modes} for j in jobs]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def load_jobs(path, samples):
    """Load jobs whose pairs are indices into ``samples``."""
    with open(path) as fh:
        payload = json.load(fh)
    jobs = []
    for item in payload:
        i, j = item["pair"]
        jobs.append(ArithmeticJob(pair=(samples[i].image, samples[j].image), modes=item["modes"]))
    return jobs
