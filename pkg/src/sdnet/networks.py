"""Network definitions: decomposer, straight-through binarizer, reconstructor
and the two least-squares discriminators.

The decomposer is a 4-level U-Net whose final 1-channel sigmoid layer emits a
soft myocardium mask; a separate head derives the 16-dimensional bounded code
from the bottleneck feature maps. The reconstructor broadcasts the code over
the spatial grid, concatenates it with the binarized mask and maps the result
back to an image through three residual blocks.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import ImageSlice, MaskMap
from .errors import CheckpointError, ShapeError

CHECKPOINT_VERSION = "sdnet-ckpt-1"


@dataclass(frozen=True)
class ArchDescriptor:
    """Architecture hyperparameters; stored in every checkpoint."""

    image_size: int = 224
    base_width: int = 64
    z_dim: int = 16
    recon_width: int = 64
    disc_width: int = 64

    def __post_init__(self):
        if self.image_size % 16 != 0:
            raise ValueError("image_size must be divisible by 16 (4 poolings)")


@dataclass
class LatentCode:
    values: np.ndarray  # (16,) in (0, 1)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("latent code must be a flat vector")


@dataclass
class Decomposition:
    mask: MaskMap  # soft
    z: LatentCode


class _ConvBlock(nn.Module):
    """Two 3x3 conv + BatchNorm + LeakyReLU(0.2) layers."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.BatchNorm2d(c_out),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.BatchNorm2d(c_out),
            nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class Decomposer(nn.Module):
    """U-Net trunk with a sigmoid mask head and a bottleneck-fed code head."""

    def __init__(self, arch):
        super().__init__()
        b = arch.base_width
        self.arch = arch
        self.inc = _ConvBlock(1, b)
        self.down1 = nn.Sequential(nn.MaxPool2d(2), _ConvBlock(b, 2 * b))
        self.down2 = nn.Sequential(nn.MaxPool2d(2), _ConvBlock(2 * b, 4 * b))
        self.down3 = nn.Sequential(nn.MaxPool2d(2), _ConvBlock(4 * b, 8 * b))
        self.down4 = nn.Sequential(nn.MaxPool2d(2), _ConvBlock(8 * b, 8 * b))

        self.up1 = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.dec1 = _ConvBlock(16 * b, 4 * b)
        self.up2 = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.dec2 = _ConvBlock(8 * b, 2 * b)
        self.up3 = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.dec3 = _ConvBlock(4 * b, b)
        self.up4 = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.dec4 = _ConvBlock(2 * b, b)
        self.mask_head = nn.Conv2d(b, 1, 1)

        # code head: bottleneck -> two stride-2 convs -> GAP -> two FC -> sigmoid
        # (no norm here: the spatial extent can shrink to 1x1, which breaks
        # batch statistics for small batches)
        self.z_convs = nn.Sequential(
            nn.Conv2d(8 * b, 8 * b, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(8 * b, 8 * b, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.z_fc = nn.Sequential(
            nn.Linear(8 * b, 8 * b),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(8 * b, arch.z_dim),
        )

    def forward(self, x):
        """x: (B, 1, H, W) in [-1, 1] -> (soft mask (B, 1, H, W), z (B, z_dim))."""
        x1 = self.inc(x)
        x2 = self.down1(x1)
        x3 = self.down2(x2)
        x4 = self.down3(x3)
        x5 = self.down4(x4)

        d = self.dec1(torch.cat([self.up1(x5), x4], dim=1))
        d = self.dec2(torch.cat([self.up2(d), x3], dim=1))
        d = self.dec3(torch.cat([self.up3(d), x2], dim=1))
        d = self.dec4(torch.cat([self.up4(d), x1], dim=1))
        mask = torch.sigmoid(self.mask_head(d))

        zf = self.z_convs(x5)
        zf = zf.mean(dim=(2, 3))
        z = torch.sigmoid(self.z_fc(zf))
        return mask, z


class _Binarize(torch.autograd.Function):
    """Threshold at 0.5 forward; identity Jacobian backward."""

    @staticmethod
    def forward(ctx, soft):
        return (soft >= 0.5).to(soft.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output


def binarize_st(soft):
    """Straight-through binarization of a soft mask tensor.

    Applied only at the reconstructor input; the mask discriminator sees
    the soft mask directly.
    """
    return _Binarize.apply(soft)


class _ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1),
            nn.BatchNorm2d(width),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.BatchNorm2d(width),
            nn.LeakyReLU(0.2, inplace=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Reconstructor(nn.Module):
    """Maps (binary mask, broadcast code) back to an image in [-1, 1]."""

    def __init__(self, arch):
        super().__init__()
        w = arch.recon_width
        self.arch = arch
        self.head = nn.Sequential(
            nn.Conv2d(1 + arch.z_dim, w, 7, padding=3),
            nn.BatchNorm2d(w),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.blocks = nn.Sequential(_ResBlock(w), _ResBlock(w), _ResBlock(w))
        self.out = nn.Conv2d(w, 1, 1)

    def forward(self, mask, z):
        """mask: (B, 1, H, W); z: (B, z_dim) broadcast to every pixel."""
        if mask.shape[0] != z.shape[0]:
            raise ShapeError("mask/code batch sizes differ")
        b, _, h, w = mask.shape
        z_map = z.view(b, -1, 1, 1).expand(b, z.shape[1], h, w)
        x = torch.cat([mask, z_map], dim=1)
        return torch.tanh(self.out(self.blocks(self.head(x))))


class Discriminator(nn.Module):
    """Least-squares patch discriminator: 4 stride-2 convs, linear head, mean.

    No BatchNorm in the first layer; no sigmoid on the output.
    """

    def __init__(self, arch, in_channels=1):
        super().__init__()
        b = arch.disc_width
        layers = [nn.Conv2d(in_channels, b, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        widths = [b, 2 * b, 4 * b, 8 * b]
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            layers += [
                nn.Conv2d(c_in, c_out, 4, stride=2, padding=1),
                nn.BatchNorm2d(c_out),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        layers.append(nn.Conv2d(widths[-1], 1, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        """Returns one score per batch item: the mean of the patch score map."""
        return self.body(x).mean(dim=(1, 2, 3))


class SDNet(nn.Module):
    """Container for the decomposer f, reconstructor g and both discriminators."""

    def __init__(self, arch):
        super().__init__()
        self.arch = arch
        self.f = Decomposer(arch)
        self.g = Reconstructor(arch)
        self.d_image = Discriminator(arch, in_channels=1)
        self.d_mask = Discriminator(arch, in_channels=1)

    def generator_parameters(self):
        return list(self.f.parameters()) + list(self.g.parameters())

    def discriminator_parameters(self):
        return list(self.d_image.parameters()) + list(self.d_mask.parameters())


def init_params(arch, seed):
    """Build an SDNet with deterministic initialisation."""
    torch.manual_seed(seed)
    model = SDNet(arch)
    model.eval()
    return model


def _check_canonical(model, pixels, name):
    size = model.arch.image_size
    if pixels.shape != (size, size):
        raise ShapeError(f"{name} must be {size}x{size}, got {pixels.shape}")


def _to_batch(pixels):
    return torch.from_numpy(np.asarray(pixels, dtype=np.float32))[None, None]


def decompose(model, image_slice):
    """Inference-mode decomposition of one ImageSlice."""
    _check_canonical(model, image_slice.pixels, "image")
    model.eval()
    with torch.no_grad():
        mask, z = model.f(_to_batch(image_slice.pixels))
    return Decomposition(
        mask=MaskMap(pixels=mask[0, 0].double().numpy(), is_binary=False),
        z=LatentCode(values=z[0].double().numpy()),
    )


def reconstruct(model, mask, z):
    """Inference-mode reconstruction from a binary MaskMap and a LatentCode."""
    _check_canonical(model, mask.pixels, "mask")
    if z.values.shape[0] != model.arch.z_dim:
        raise ShapeError(f"latent code must have {model.arch.z_dim} components")
    model.eval()
    with torch.no_grad():
        out = model.g(
            _to_batch(mask.pixels),
            torch.from_numpy(z.values.astype(np.float32))[None],
        )
    return ImageSlice(pixels=out[0, 0].double().numpy(), spacing=1.37)


def discriminate_image(model, image_slice):
    _check_canonical(model, image_slice.pixels, "image")
    model.eval()
    with torch.no_grad():
        return float(model.d_image(_to_batch(image_slice.pixels))[0])


def discriminate_mask(model, mask):
    _check_canonical(model, mask.pixels, "mask")
    model.eval()
    with torch.no_grad():
        return float(model.d_mask(_to_batch(mask.pixels))[0])


def save_params(model, path, step=0, extra=None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(model.arch),
        "state_dict": model.state_dict(),
        "step": step,
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_params(path, arch=None):
    """Load an SDNet checkpoint; the stored descriptor must match ``arch``."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version")
    stored_arch = ArchDescriptor(**payload["arch"])
    if arch is not None and stored_arch != arch:
        raise CheckpointError(
            f"architecture mismatch: checkpoint {stored_arch}, requested {arch}"
        )
    model = SDNet(stored_arch)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["step"], payload.get("extra")
