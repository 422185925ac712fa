"""Training loops: semi-supervised SDNet and the two baselines.

One training step does a single generator update on the composite cost,
then one update each for the image and mask discriminators on their own
least-squares losses (fakes detached). Unlabelled batches are interleaved
with labelled ones at a ratio derived from the label budget.
"""

import copy
import json
from dataclasses import dataclass, asdict

import numpy as np
import torch

from . import objectives as obj
from .errors import CheckpointError, ConfigError, TrainingError
from .networks import ArchDescriptor, SDNet, binarize_st, init_params
from .objectives import LossReport, LossWeights

TRAINER_CKPT_VERSION = "sdnet-train-ckpt-1"

VARIANTS = ("sdnet", "unet", "gan")


@dataclass
class TrainConfig:
    variant: str = "sdnet"
    image_size: int = 64
    base_width: int = 16
    batch_size: int = 8
    epochs: int = 100
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    disc_width: int = 0  # first-layer width of both discriminators; 0 = base_width
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 = off
    unlabelled_cap: int = 10  # max unlabelled batches per labelled batch
    w_l_m: float = 10.0
    w_a_m: float = 10.0
    w_l_rec: float = 1.0
    w_l_i: float = 10.0
    w_a_i: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")

    @property
    def weights(self):
        return LossWeights(self.w_l_m, self.w_a_m, self.w_l_rec, self.w_l_i, self.w_a_i)

    def arch(self):
        return ArchDescriptor(
            image_size=self.image_size,
            base_width=self.base_width,
            recon_width=4 * self.base_width,
            disc_width=self.disc_width or self.base_width,
        )

    def to_file(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)

    @classmethod
    def from_file(cls, path, overrides=()):
        with open(path) as fh:
            raw = json.load(fh)
        cfg = cls(**raw)
        return cfg.with_overrides(overrides)

    def with_overrides(self, overrides):
        """Apply 'key=value' strings; values are coerced to the field's type."""
        raw = asdict(self)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            if key not in raw:
                raise ConfigError(f"unknown config key {key!r}")
            current = raw[key]
            if isinstance(current, bool):
                raw[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                raw[key] = int(value)
            elif isinstance(current, float):
                raw[key] = float(value)
            else:
                raw[key] = value
        return TrainConfig(**raw)


def _stack_images(samples):
    return np.stack([s.image.pixels for s in samples]).astype(np.float32)[:, None]


def _stack_masks(samples):
    return np.stack([s.mask.pixels for s in samples]).astype(np.float32)[:, None]


class Trainer:
    """Owns the model, optimizers and data tensors for one training run."""

    def __init__(self, config, labelled, unlabelled=(), mask_pool=(), val=()):
        if config.variant in ("sdnet", "unet", "gan") and not labelled:
            raise ConfigError(f"variant {config.variant} needs labelled data")
        self.config = config
        self.model = init_params(config.arch(), config.seed)
        self.rng = np.random.default_rng(config.seed)
        torch.manual_seed(config.seed)

        self.l_images = torch.from_numpy(_stack_images(labelled))
        self.l_masks = torch.from_numpy(_stack_masks(labelled))
        self.u_images = (
            torch.from_numpy(_stack_images(unlabelled)) if len(unlabelled) else torch.empty(0)
        )
        self.pool_masks = (
            torch.from_numpy(
                np.stack([m.pixels for m in mask_pool]).astype(np.float32)[:, None]
            )
            if len(mask_pool)
            else torch.empty(0)
        )
        self.val_images = _stack_images(val) if len(val) else None
        self.val_masks = _stack_masks(val) if len(val) else None

        betas = (config.beta1, config.beta2)
        self.opt_gen = torch.optim.Adam(
            self.model.generator_parameters()
            if config.variant == "sdnet"
            else list(self.model.f.parameters()),
            lr=config.lr,
            betas=betas,
        )
        self.opt_dx = torch.optim.Adam(self.model.d_image.parameters(), lr=config.lr, betas=betas)
        self.opt_dm = torch.optim.Adam(self.model.d_mask.parameters(), lr=config.lr, betas=betas)

        self.step = 0
        self.epoch = 0
        self.best_dice = -1.0
        self.best_state = None
        self.loss_history = []  # (step, LossReport)
        self.val_history = []  # (epoch, dice)

    # ------------------------------------------------------------------ steps

    def _sample_pool_masks(self, n):
        if len(self.pool_masks) == 0:
            raise ConfigError("adversarial mask training needs a mask pool")
        idx = self.rng.integers(0, len(self.pool_masks), size=n)
        return self.pool_masks[torch.from_numpy(idx)]

    def _check_finite(self, report):
        if not report.is_finite():
            raise TrainingError("non-finite loss encountered", report=report)
        self.loss_history.append((self.step, report))

    def train_step_labelled(self, images, masks, pool_masks):
        """One generator + discriminator update on a labelled batch."""
        self.model.train()
        w = self.config.weights
        mask_soft, z = self.model.f(images)
        x_rec = self.model.g(binarize_st(mask_soft), z)

        l_rec = obj.loss_rec(images, x_rec)
        l_m = obj.loss_dice(masks, mask_soft)
        l_i = obj.loss_image_supervised(images, masks, z, self.model.g)
        _, a_i_gen = obj.adv_losses_image(self.model.d_image, images, x_rec)
        _, a_m_gen = obj.adv_losses_mask(self.model.d_mask, pool_masks, mask_soft)
        composite = obj.composite_labelled(l_m, a_m_gen, l_rec, l_i, a_i_gen, w)

        self.opt_gen.zero_grad()
        self.opt_dx.zero_grad()
        self.opt_dm.zero_grad()
        composite.backward()
        self.opt_gen.step()

        d_x_loss = self._update_discriminator(self.opt_dx, self.model.d_image, images, x_rec)
        d_m_loss = self._update_discriminator(self.opt_dm, self.model.d_mask, pool_masks, mask_soft)

        self.step += 1
        report = LossReport(
            l_rec=float(l_rec.detach()),
            l_m=float(l_m.detach()),
            l_i=float(l_i.detach()),
            a_i_gen=float(a_i_gen.detach()),
            a_m_gen=float(a_m_gen.detach()),
            d_x_loss=d_x_loss,
            d_m_loss=d_m_loss,
            composite=float(composite.detach()),
        )
        self._check_finite(report)
        return report

    def train_step_unlabelled(self, images, pool_masks):
        """As the labelled step, without the supervised mask/image terms."""
        self.model.train()
        w = self.config.weights
        mask_soft, z = self.model.f(images)
        x_rec = self.model.g(binarize_st(mask_soft), z)

        l_rec = obj.loss_rec(images, x_rec)
        _, a_i_gen = obj.adv_losses_image(self.model.d_image, images, x_rec)
        _, a_m_gen = obj.adv_losses_mask(self.model.d_mask, pool_masks, mask_soft)
        composite = obj.composite_unlabelled(a_m_gen, l_rec, a_i_gen, w)

        self.opt_gen.zero_grad()
        self.opt_dx.zero_grad()
        self.opt_dm.zero_grad()
        composite.backward()
        self.opt_gen.step()

        d_x_loss = self._update_discriminator(self.opt_dx, self.model.d_image, images, x_rec)
        d_m_loss = self._update_discriminator(self.opt_dm, self.model.d_mask, pool_masks, mask_soft)

        self.step += 1
        report = LossReport(
            l_rec=float(l_rec.detach()),
            l_m=None,
            l_i=None,
            a_i_gen=float(a_i_gen.detach()),
            a_m_gen=float(a_m_gen.detach()),
            d_x_loss=d_x_loss,
            d_m_loss=d_m_loss,
            composite=float(composite.detach()),
        )
        self._check_finite(report)
        return report

    def _update_discriminator(self, optimizer, disc, real, fake):
        disc_loss = (disc(fake.detach()) ** 2).mean() + ((disc(real) - 1.0) ** 2).mean()
        optimizer.zero_grad()
        disc_loss.backward()
        optimizer.step()
        return float(disc_loss.detach())

    def _step_unet(self, images, masks):
        self.model.train()
        mask_soft, _ = self.model.f(images)
        l_m = obj.loss_dice(masks, mask_soft)
        self.opt_gen.zero_grad()
        l_m.backward()
        self.opt_gen.step()
        self.step += 1
        report = LossReport(
            l_rec=0.0, l_m=float(l_m.detach()), l_i=None, a_i_gen=0.0, a_m_gen=0.0,
            d_x_loss=0.0, d_m_loss=0.0, composite=float(l_m.detach()),
        )
        self._check_finite(report)
        return report

    def _step_gan(self, images, masks, pool_masks):
        """Segmenter with a mask-adversarial term; masks is None on unlabelled batches."""
        self.model.train()
        w = self.config.weights
        mask_soft, _ = self.model.f(images)
        _, a_m_gen = obj.adv_losses_mask(self.model.d_mask, pool_masks, mask_soft)
        if masks is not None:
            l_m = obj.loss_dice(masks, mask_soft)
            gen = w.l_m * l_m + w.a_m * a_m_gen
        else:
            l_m = None
            gen = w.a_m * a_m_gen
        self.opt_gen.zero_grad()
        self.opt_dm.zero_grad()
        gen.backward()
        self.opt_gen.step()
        d_m_loss = self._update_discriminator(self.opt_dm, self.model.d_mask, pool_masks, mask_soft)
        self.step += 1
        report = LossReport(
            l_rec=0.0,
            l_m=None if l_m is None else float(l_m.detach()),
            l_i=None,
            a_i_gen=0.0,
            a_m_gen=float(a_m_gen.detach()),
            d_x_loss=0.0,
            d_m_loss=d_m_loss,
            composite=float(gen.detach()),
        )
        self._check_finite(report)
        return report

    # ----------------------------------------------------------------- epochs

    def _batches(self, n, shuffle=True):
        order = self.rng.permutation(n) if shuffle else np.arange(n)
        bs = self.config.batch_size
        for i in range(0, n, bs):
            yield torch.from_numpy(order[i : i + bs])

    def unlabelled_ratio(self):
        n_l = len(self.l_images)
        n_u = len(self.u_images)
        if n_u == 0:
            return 0
        return min(self.config.unlabelled_cap, max(1, int(round(n_u / n_l))))

    def train_epoch(self):
        """One pass over the labelled set with interleaved unlabelled batches."""
        k = self.unlabelled_ratio()
        u_iter = None
        if k:
            u_order = self.rng.permutation(len(self.u_images))
            u_pos = 0

        def next_u_batch():
            nonlocal u_pos, u_order
            bs = self.config.batch_size
            if u_pos + bs > len(u_order):
                u_order = self.rng.permutation(len(self.u_images))
                u_pos = 0
            idx = torch.from_numpy(u_order[u_pos : u_pos + bs])
            u_pos += bs
            return self.u_images[idx]

        for idx in self._batches(len(self.l_images)):
            images = self.l_images[idx]
            masks = self.l_masks[idx]
            if self.config.variant == "sdnet":
                pool = self._sample_pool_masks(len(idx))
                self.train_step_labelled(images, masks, pool)
                for _ in range(k):
                    u = next_u_batch()
                    self.train_step_unlabelled(u, self._sample_pool_masks(len(u)))
            elif self.config.variant == "unet":
                self._step_unet(images, masks)
            else:  # gan
                pool = self._sample_pool_masks(len(idx))
                self._step_gan(images, masks, pool)
                for _ in range(k):
                    u = next_u_batch()
                    self._step_gan(u, None, self._sample_pool_masks(len(u)))

        self.epoch += 1
        dice = self.validate()
        self.val_history.append((self.epoch, dice))
        if dice is not None and dice > self.best_dice:
            self.best_dice = dice
            self.best_state = copy.deepcopy(self.model.state_dict())
        return dice

    def validate(self):
        if self.val_images is None:
            return None
        from .evaluation import dice_score  # local import avoids a module cycle

        preds = self.predict_masks(self.val_images)
        scores = [
            dice_score(preds[i, 0], self.val_masks[i, 0]) for i in range(len(preds))
        ]
        return float(np.mean(scores))

    def predict_masks(self, images):
        """Inference-mode soft masks for an (N, 1, H, W) array."""
        self.model.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(images), 32):
                batch = torch.as_tensor(images[i : i + 32], dtype=torch.float32)
                mask, _ = self.model.f(batch)
                out.append(mask.numpy())
        return np.concatenate(out)

    def fit(self, log_every=0):
        for _ in range(self.config.epochs):
            dice = self.train_epoch()
            if log_every and self.epoch % log_every == 0:
                print(f"epoch {self.epoch}: step {self.step} val_dice {dice}")
        return self

    def best_model(self):
        """The model at the best validation epoch (current weights if no val set)."""
        if self.best_state is None:
            return self.model
        model = SDNet(self.config.arch())
        model.load_state_dict(self.best_state)
        model.eval()
        return model

    # ------------------------------------------------------------ persistence

    def write_loss_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(LossReport.CSV_COLUMNS) + "\n")
            for step, report in self.loss_history:
                fh.write(report.csv_row(step) + "\n")

    def write_val_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,val_dice\n")
            for epoch, dice in self.val_history:
                fh.write(f"{epoch},{'' if dice is None else f'{dice:.8g}'}\n")

    def checkpoint(self, path):
        payload = {
            "version": TRAINER_CKPT_VERSION,
            "config": asdict(self.config),
            "model": self.model.state_dict(),
            "opt_gen": self.opt_gen.state_dict(),
            "opt_dx": self.opt_dx.state_dict(),
            "opt_dm": self.opt_dm.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "best_dice": self.best_dice,
            "best_state": self.best_state,
            "np_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }
        torch.save(payload, path)

    @classmethod
    def resume(cls, path, labelled, unlabelled=(), mask_pool=(), val=()):
        """Restore a run; subsequent steps match the uninterrupted run exactly."""
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("version") != TRAINER_CKPT_VERSION:
            raise CheckpointError(f"{path}: unknown trainer checkpoint version")
        config = TrainConfig(**payload["config"])
        trainer = cls(config, labelled, unlabelled, mask_pool, val)
        trainer.model.load_state_dict(payload["model"])
        trainer.opt_gen.load_state_dict(payload["opt_gen"])
        trainer.opt_dx.load_state_dict(payload["opt_dx"])
        trainer.opt_dm.load_state_dict(payload["opt_dm"])
        trainer.step = payload["step"]
        trainer.epoch = payload["epoch"]
        trainer.best_dice = payload["best_dice"]
        trainer.best_state = payload["best_state"]
        trainer.rng.bit_generator.state = payload["np_rng"]
        torch.set_rng_state(payload["torch_rng"])
        return trainer


def train_baseline_unet(config, labelled, val=()):
    """Supervised baseline: the segmentation trunk with a Dice loss only."""
    cfg = config.with_overrides(["variant=unet"]) if config.variant != "unet" else config
    return Trainer(cfg, labelled, val=val).fit()


def train_baseline_gan(config, labelled, unlabelled=(), mask_pool=(), val=()):
    """Semi-supervised baseline: Dice on labelled plus a mask-adversarial loss."""
    cfg = config.with_overrides(["variant=gan"]) if config.variant != "gan" else config
    return Trainer(cfg, labelled, unlabelled, mask_pool, val).fit()


def train_sdnet(config, labelled, unlabelled=(), mask_pool=(), val=()):
    cfg = config.with_overrides(["variant=sdnet"]) if config.variant != "sdnet" else config
    return Trainer(cfg, labelled, unlabelled, mask_pool, val).fit()
