"""Loss terms and composite costs.

Both adversarial losses use the least-squares form: the discriminator
regresses reals to 1 and fakes to 0; the generator side minimizes
(D(fake) - 1)^2. Generator-side weights default to (10, 10, 1, 10, 1)
for (mask Dice, mask adversarial, reconstruction, supervised image,
image adversarial); discriminator updates are unweighted.
"""

from dataclasses import dataclass, fields

import torch

from .errors import ShapeError, UsageError

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Generator-side weights, in the order the composite cost sums them."""

    l_m: float = 10.0
    a_m: float = 10.0
    l_rec: float = 1.0
    l_i: float = 10.0
    a_i: float = 1.0

    def as_tuple(self):
        return (self.l_m, self.a_m, self.l_rec, self.l_i, self.a_i)


@dataclass
class LossReport:
    """Per-step loss values; l_m / l_i are None on unlabelled steps."""

    l_rec: float
    l_m: float | None
    l_i: float | None
    a_i_gen: float
    a_m_gen: float
    d_x_loss: float
    d_m_loss: float
    composite: float

    CSV_COLUMNS = ("step", "l_rec", "l_m", "l_i", "a_i_gen", "a_m_gen", "d_x_loss", "d_m_loss", "composite")

    def is_finite(self):
        import math

        return all(
            math.isfinite(getattr(self, f.name))
            for f in fields(self)
            if getattr(self, f.name) is not None
        )

    def csv_row(self, step):
        vals = [step] + [getattr(self, c) for c in self.CSV_COLUMNS[1:]]
        return ",".join("" if v is None else f"{v:.8g}" if isinstance(v, float) else str(v) for v in vals)


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_rec(x, x_hat):
    """Mean absolute reconstruction error."""
    _check_same_shape(x, x_hat)
    return (x - x_hat).abs().mean()


def loss_dice(m_true, m_pred, eps=DICE_EPS):
    """1 - soft Dice overlap between a binary target and a soft prediction."""
    _check_same_shape(m_true, m_pred)
    inter = (m_true * m_pred).sum()
    total = m_true.sum() + m_pred.sum()
    return 1.0 - (2.0 * inter + eps) / (total + eps)


def loss_image_supervised(x, m_true, z, g):
    """L1 error of reconstructing from the ground-truth mask and predicted code."""
    if m_true is None:
        raise UsageError("supervised image loss needs a ground-truth mask")
    x_hat = g(m_true, z)
    return loss_rec(x, x_hat)


def _lsgan(d, real, fake):
    disc = (d(fake.detach()) ** 2).mean() + ((d(real) - 1.0) ** 2).mean()
    gen = ((d(fake) - 1.0) ** 2).mean()
    return disc, gen


def adv_losses_image(d_x, x_real, x_fake):
    """Least-squares adversarial losses for the image discriminator.

    The discriminator loss detaches the fake, so discriminator updates
    never reach the generator.
    """
    _check_same_shape(x_real, x_fake)
    return _lsgan(d_x, x_real, x_fake)


def adv_losses_mask(d_m, m_real, m_fake):
    """As adv_losses_image, on masks; reals come from the unpaired pool."""
    if not torch.isin(m_real.detach(), torch.tensor([0.0, 1.0])).all():
        raise ValueError("real masks must be binary")
    return _lsgan(d_m, m_real, m_fake)


def composite_labelled(l_m, a_m, l_rec_term, l_i, a_i, weights=LossWeights()):
    """Weighted sum of all five generator-side terms."""
    terms = (l_m, a_m, l_rec_term, l_i, a_i)
    if any(t is None for t in terms):
        raise UsageError("labelled composite needs all five terms")
    w = weights.as_tuple()
    return sum(wi * ti for wi, ti in zip(w, terms))


def composite_unlabelled(a_m, l_rec_term, a_i, weights=LossWeights()):
    """Labelled composite with the supervised terms (first and fourth) dropped."""
    terms = (a_m, l_rec_term, a_i)
    if any(t is None for t in terms):
        raise UsageError("unlabelled composite needs a_m, l_rec and a_i")
    return weights.a_m * a_m + weights.l_rec * l_rec_term + weights.a_i * a_i
