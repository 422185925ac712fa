"""Acceptance suite. One test per criterion, one PASS/FAIL line each.

Fast criteria (1-4, 8) run with the normal suite; the training-heavy ones
(5, 6, 7) are marked ``slow`` and can be excluded with ``-m "not slow"``.
Criterion 9 needs a locally provided cardiac dataset and reports SKIP
unless SDNET_ACDC_DIR points at one in the package dataset layout.
"""

import hashlib
import os

import numpy as np
import pytest
import torch

from sdnet.data import (
    MaskMap,
    PhantomSpec,
    UnlabelledSample,
    generate_phantom,
    make_label_budget,
)
from sdnet.evaluation import dice_score, evaluate_model
from sdnet.networks import ArchDescriptor, binarize_st, decompose, init_params
from sdnet.objectives import (
    LossWeights,
    adv_losses_image,
    adv_losses_mask,
    composite_labelled,
    composite_unlabelled,
    loss_dice,
    loss_image_supervised,
    loss_rec,
)
from sdnet.trainer import TrainConfig, Trainer

# settings for the training criteria (5, 6, 7); pinned so the runs are
# reproducible and fit a single-core CPU budget
OVERFIT_SPEC = dict(
    noise_sigma=0.0, background_texture_scale=0.0, contrast_inversion=0.0, seed=5
)
OVERFIT_LR = 1e-2
OVERFIT_BETA1 = 0.9
TREND_BUDGETS = (100, 25, 10)
TREND_SEEDS = (0, 1, 2)
# smaller budgets need more passes over their few labelled slices
TREND_EPOCHS = {
    ("unet", 100): 60, ("unet", 25): 100, ("unet", 10): 150,
    ("sdnet", 100): 60, ("sdnet", 25): 80, ("sdnet", 10): 120,
}
# at 64x64/width-16 desk scale the paper-scale weighting underweights the
# supervised Dice term against the unlabelled objectives, so the sweep
# anchors it; adversarial weights are scaled down to match (see trainer
# config docs — these are plain TrainConfig fields)
TREND_SDNET = dict(unlabelled_cap=3, w_l_m=50.0, w_a_m=0.3, w_a_i=0.03)
TREND_N = 840  # 600 training pool + 120 validation + 120 test


def _report(capsys, num, name, ok, detail=""):
    line = f"ACCEPTANCE {num} ({name}): {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  [{detail}]"
    with capsys.disabled():
        print(line)
    assert ok, line


def _skip(capsys, num, name, reason):
    with capsys.disabled():
        print(f"ACCEPTANCE {num} ({name}): SKIP  [{reason}]")
    pytest.skip(reason)


# --------------------------------------------------------------- criterion 1


def _grad_matches_fd(fn, x, n_points, rng, h=1e-5, rtol=1e-3):
    """Central finite differences vs autograd at n_points random coordinates."""
    x = x.double().detach().requires_grad_(True)
    loss = fn(x)
    (grad,) = torch.autograd.grad(loss, x)
    flat = grad.reshape(-1)
    for idx in rng.choice(x.numel(), size=n_points, replace=False):
        idx = int(idx)
        xp = x.detach().clone().reshape(-1)
        xm = xp.clone()
        xp[idx] += h
        xm[idx] -= h
        fd = (fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))).item() / (2 * h)
        an = flat[idx].item()
        if abs(an - fd) > rtol * max(abs(fd), abs(an), 1e-4):
            return False, f"idx {idx}: autograd {an:.6g} vs fd {fd:.6g}"
    return True, ""


def test_criterion_1_gradient_correctness(capsys):
    rng = np.random.default_rng(17)
    arch = ArchDescriptor(image_size=32, base_width=4, recon_width=8, disc_width=4)
    model = init_params(arch, 3).double().eval()

    x = torch.from_numpy(rng.normal(size=(2, 1, 32, 32)))
    x_hat0 = torch.from_numpy(rng.normal(size=(2, 1, 32, 32)))
    m_true = torch.from_numpy((rng.random((2, 1, 32, 32)) > 0.7).astype(float))
    m_soft0 = torch.from_numpy(rng.random((2, 1, 32, 32)) * 0.9 + 0.05)
    z0 = torch.from_numpy(rng.random((2, arch.z_dim)))

    checks = {
        "L_rec/x_hat": (lambda t: loss_rec(x, t), x_hat0),
        "Dice/m_soft": (lambda t: loss_dice(m_true, t), m_soft0),
        "L_I/z": (lambda t: loss_image_supervised(x, m_true, t, model.g), z0),
        "adv_gen/x_fake": (lambda t: adv_losses_image(model.d_image, x, t)[1], x_hat0),
        "adv_disc/x_real": (lambda t: adv_losses_image(model.d_image, t, x_hat0)[0], x),
        "adv_gen/m_fake": (lambda t: adv_losses_mask(model.d_mask, m_true, t)[1], m_soft0),
        "adv_disc/m_real": (
            lambda t: (model.d_mask(m_soft0.detach()) ** 2).mean()
            + ((model.d_mask(t) - 1.0) ** 2).mean(),
            m_true + 0.0,
        ),
    }
    for name, (fn, point) in checks.items():
        ok, why = _grad_matches_fd(fn, point, n_points=10, rng=rng)
        if not ok:
            _report(capsys, 1, "gradient correctness", False, f"{name}: {why}")
    _report(capsys, 1, "gradient correctness", True, f"{len(checks)} loss terms, 10 points each")


# --------------------------------------------------------------- criterion 2


def test_criterion_2_straight_through_contract(capsys):
    rng = np.random.default_rng(2)
    for i in range(100):
        shape = tuple(rng.integers(1, 9, size=int(rng.integers(1, 5))))
        soft = torch.from_numpy(rng.random(shape)).requires_grad_(True)
        hard = binarize_st(soft)
        assert torch.isin(hard.detach(), torch.tensor([0.0, 1.0], dtype=hard.dtype)).all()
        assert torch.equal(hard.detach(), (soft.detach() >= 0.5).double())
        upstream = torch.from_numpy(rng.normal(size=shape))
        hard.backward(upstream)
        assert torch.equal(soft.grad, upstream), "backward is not the identity"
    # exact threshold behaviour
    edge = torch.tensor([0.5 - 1e-12, 0.5, 0.5 + 1e-12], dtype=torch.float64)
    assert binarize_st(edge).tolist() == [0.0, 1.0, 1.0]
    _report(capsys, 2, "straight-through contract", True, "100 tensors, identity Jacobian exact")


# --------------------------------------------------------------- criterion 3


def test_criterion_3_loss_identities(capsys):
    rng = np.random.default_rng(3)
    terms = {k: torch.tensor(v) for k, v in
             zip(("l_m", "a_m", "l_rec", "l_i", "a_i"), rng.random(5).tolist())}
    zeroed = LossWeights(l_m=0.0, a_m=10.0, l_rec=1.0, l_i=0.0, a_i=1.0)
    full = composite_labelled(
        terms["l_m"], terms["a_m"], terms["l_rec"], terms["l_i"], terms["a_i"], zeroed
    )
    dropped = composite_unlabelled(terms["a_m"], terms["l_rec"], terms["a_i"], zeroed)
    assert float(full) == float(dropped), "lambda1=lambda4=0 identity is not exact"

    worked = composite_labelled(
        torch.tensor(0.2), torch.tensor(0.5), torch.tensor(0.1),
        torch.tensor(0.3), torch.tensor(0.4), LossWeights(),
    )
    assert float(worked) == pytest.approx(10.5, abs=1e-12)
    assert LossWeights().as_tuple() == (10.0, 10.0, 1.0, 10.0, 1.0)
    _report(capsys, 3, "loss identities", True, "drop identity exact; defaults give 10.5")


# --------------------------------------------------------------- criterion 4


def test_criterion_4_dice_oracle(capsys):
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(1000):
        if i == 0:  # empty vs empty
            a = np.zeros((16, 16))
            b = np.zeros((16, 16))
        elif i == 1:  # disjoint
            a = np.zeros((16, 16))
            b = np.zeros((16, 16))
            a[:8] = 1.0
            b[8:] = 1.0
        else:
            a = (rng.random((16, 16)) > rng.random()).astype(float)
            b = (rng.random((16, 16)) > rng.random()).astype(float)
        n_inter = int(np.sum((a == 1) & (b == 1)))
        n_a = int(np.sum(a == 1))
        n_b = int(np.sum(b == 1))
        oracle = 1.0 if n_a + n_b == 0 else 2.0 * n_inter / (n_a + n_b)
        got = dice_score(b, a)
        got_soft = 1.0 - float(loss_dice(torch.from_numpy(a), torch.from_numpy(b)))
        worst = max(worst, abs(got - oracle), abs(got_soft - oracle))
        if i == 0:
            assert got == 1.0
        if i == 1:
            assert got == 0.0
    _report(capsys, 4, "Dice oracle equivalence", worst < 1e-6, f"max |diff| {worst:.2e} over 1000 pairs")


# --------------------------------------------------------------- criterion 5


@pytest.mark.slow
def test_criterion_5_overfit_sanity(capsys):
    # single-sample reconstruction overfit
    sample = generate_phantom(PhantomSpec(**OVERFIT_SPEC), 1)[0]
    arch = ArchDescriptor(image_size=64, base_width=16, recon_width=64, disc_width=16)
    model = init_params(arch, 0)
    model.train()
    x = torch.from_numpy(sample.image.pixels.astype(np.float32))[None, None]
    opt = torch.optim.Adam(
        list(model.f.parameters()) + list(model.g.parameters()),
        lr=OVERFIT_LR, betas=(OVERFIT_BETA1, 0.999),
    )
    final_rec = None
    for _ in range(200):
        m, z = model.f(x)
        x_hat = model.g(binarize_st(m), z)
        l = loss_rec(x, x_hat)
        opt.zero_grad()
        l.backward()
        opt.step()
        final_rec = float(l.detach())
    ok_rec = final_rec < 0.05

    # 5-sample supervised U-Net overfit
    five = generate_phantom(PhantomSpec(seed=6), 5)
    cfg = TrainConfig(variant="unet", base_width=16, batch_size=5, epochs=500, lr=1e-3, beta1=0.9, seed=0)
    trainer = Trainer(cfg, five)
    for _ in range(500):
        idx = torch.arange(5)
        trainer._step_unet(trainer.l_images[idx], trainer.l_masks[idx])
    preds = trainer.predict_masks(trainer.l_images.numpy())
    dices = [dice_score(preds[i, 0], five[i].mask.pixels) for i in range(5)]
    ok_unet = float(np.mean(dices)) > 0.95

    _report(
        capsys, 5, "overfit sanity", ok_rec and ok_unet,
        f"L_rec {final_rec:.4f} after 200 steps; 5-sample U-Net Dice {np.mean(dices):.4f} after 500 steps",
    )


# --------------------------------------------------------------- criterion 6


def _trend_data(seed):
    samples = generate_phantom(PhantomSpec(seed=100 + seed), TREND_N)
    return samples[:600], samples[600:720], samples[720:]


def _trend_trainer(variant, budget, seed, train_pool, val, epochs=None, n_unlabelled=500):
    pairs = [(s.sample_id, s.subject_id) for s in train_pool]
    lb = make_label_budget(pairs, budget, n_unlabelled, seed=seed)
    by = {s.sample_id: s for s in train_pool}
    labelled = [by[i] for i in lb.labelled_ids]
    unlabelled = [UnlabelledSample(by[i].image, i, by[i].subject_id) for i in lb.unlabelled_ids]
    pool = [MaskMap(by[i].mask.pixels) for i in lb.mask_pool_ids]
    extra = TREND_SDNET if variant == "sdnet" else {}
    cfg = TrainConfig(
        variant=variant, base_width=16, batch_size=8,
        epochs=epochs or TREND_EPOCHS[(variant, budget)], seed=seed, **extra,
    )
    if variant == "unet":
        trainer = Trainer(cfg, labelled, val=val)
    else:
        trainer = Trainer(cfg, labelled, unlabelled, pool, val=val)
    trainer.fit()
    trainer.model = trainer.best_model()
    return trainer


def _trend_cell(variant, budget, seed, train_pool, val, test, **kw):
    return evaluate_model(_trend_trainer(variant, budget, seed, train_pool, val, **kw), test).mean_dice


@pytest.mark.slow
def test_criterion_6_semi_supervised_trend(capsys, trend_sdnet):
    means = {}
    for variant in ("unet", "sdnet"):
        for budget in TREND_BUDGETS:
            scores = []
            for seed in TREND_SEEDS:
                train_pool, val, test = _trend_data(seed)
                if variant == "sdnet" and budget == 100 and seed == 0:
                    # this cell is shared with the latent-arithmetic criterion
                    shared, _ = trend_sdnet
                    scores.append(evaluate_model(shared, test).mean_dice)
                else:
                    scores.append(_trend_cell(variant, budget, seed, train_pool, val, test))
            means[(variant, budget)] = float(np.mean(scores))
    gap_100 = means[("sdnet", 100)] - means[("unet", 100)]
    gap_10 = means[("sdnet", 10)] - means[("unet", 10)]
    ok = gap_100 >= -0.05 and gap_10 > 0.10
    detail = "; ".join(
        f"budget {b}: unet {means[('unet', b)]:.3f} sdnet {means[('sdnet', b)]:.3f}"
        for b in TREND_BUDGETS
    )
    _report(capsys, 6, "semi-supervised trend", ok, detail)


# --------------------------------------------------------------- criterion 7


@pytest.fixture(scope="module")
def trend_sdnet():
    """One budget-100 SDNet, shared between the trend sweep and the latent
    arithmetic properties so the cell is only trained once."""
    train_pool, val, test = _trend_data(0)
    return _trend_trainer("sdnet", 100, 0, train_pool, val), test


@pytest.mark.slow
def test_criterion_7_latent_arithmetic(capsys, trend_sdnet):
    from sdnet.latent import null_mask, recombine

    trainer, test = trend_sdnet
    model = trainer.model
    images = [s.image for s in test[:20]]

    # self-swap identity, bit exact
    for x in images[:5]:
        a = recombine(model, x, x, "Mi_Zj")
        b = recombine(model, x, x, "self_i")
        assert np.array_equal(a.pixels, b.pixels), "self-swap is not bit-exact"

    # null-mask reconstructions should re-segment to (almost) nothing
    shrunk = 0
    for x in images:
        area0 = float((decompose(model, x).mask.pixels >= 0.5).sum())
        renull = null_mask(model, x)
        from sdnet.data import ImageSlice

        area1 = float(
            (decompose(model, ImageSlice(renull.pixels, x.spacing)).mask.pixels >= 0.5).sum()
        )
        if area0 == 0 or area1 < 0.2 * area0:
            shrunk += 1

    # Mj_Zi output should segment like image j, not image i
    dominated = 0
    for i in range(20):
        xi, xj = images[i], images[(i + 7) % 20]
        mi = decompose(model, xi).mask.pixels >= 0.5
        mj = decompose(model, xj).mask.pixels >= 0.5
        out = recombine(model, xi, xj, "Mj_Zi")
        from sdnet.data import ImageSlice

        mo = decompose(model, ImageSlice(out.pixels, xi.spacing)).mask.pixels >= 0.5
        if dice_score(mo, mj) > dice_score(mo, mi):
            dominated += 1

    ok = shrunk >= 16 and dominated >= 16
    _report(
        capsys, 7, "latent arithmetic", ok,
        f"self-swap exact; null-mask shrink {shrunk}/20; Mj_Zi provenance {dominated}/20",
    )


# --------------------------------------------------------------- criterion 8


def _tiny_run_data():
    samples = generate_phantom(PhantomSpec(seed=8), 60)
    pairs = [(s.sample_id, s.subject_id) for s in samples]
    lb = make_label_budget(pairs, 16, 32, seed=0)
    by = {s.sample_id: s for s in samples}
    labelled = [by[i] for i in lb.labelled_ids]
    unlabelled = [UnlabelledSample(by[i].image, i, by[i].subject_id) for i in lb.unlabelled_ids]
    pool = [MaskMap(by[i].mask.pixels) for i in lb.mask_pool_ids]
    return labelled, unlabelled, pool


def test_criterion_8_reproducibility(capsys, tmp_path):
    labelled, unlabelled, pool = _tiny_run_data()
    cfg = TrainConfig(variant="sdnet", base_width=4, batch_size=4, epochs=1, seed=9)

    checksums = []
    for run in range(2):
        trainer = Trainer(cfg, labelled, unlabelled, pool)
        trainer.fit()
        # same file names both times: torch embeds the archive name in the bytes
        csv = tmp_path / "loss.csv"
        ckpt = tmp_path / "run.ckpt"
        trainer.write_loss_csv(csv)
        trainer.checkpoint(ckpt)
        checksums.append(
            (
                hashlib.sha256(csv.read_bytes()).hexdigest(),
                hashlib.sha256(ckpt.read_bytes()).hexdigest(),
            )
        )
    identical = checksums[0] == checksums[1]

    # resume must reproduce subsequent steps exactly
    full = Trainer(cfg, labelled, unlabelled, pool)
    full.train_epoch()
    full.checkpoint(tmp_path / "mid.ckpt")
    full.train_epoch()
    resumed = Trainer.resume(tmp_path / "mid.ckpt", labelled, unlabelled, pool)
    resumed.train_epoch()
    tail_full = [r.csv_row(s) for s, r in full.loss_history[-10:]]
    tail_res = [r.csv_row(s) for s, r in resumed.loss_history[-10:]]
    resume_exact = len(tail_res) == 10 and tail_full == tail_res

    _report(
        capsys, 8, "reproducibility", identical and resume_exact,
        f"rerun checksums {'equal' if identical else 'differ'}; resume tail {'exact' if resume_exact else 'diverged'}",
    )


# --------------------------------------------------------------- criterion 9


@pytest.mark.slow
def test_criterion_9_acdc_optional(capsys):
    """Needs a real cardiac dataset in the package layout (images.npy, masks.npy,
    manifest.json) under SDNET_ACDC_DIR; skipped otherwise."""
    root = os.environ.get("SDNET_ACDC_DIR")
    if not root:
        _skip(capsys, 9, "ACDC low-label gap", "SDNET_ACDC_DIR not set; optional, not gating")
    from sdnet.data import load_phantom_dataset

    samples = load_phantom_dataset(root)
    n_test = max(1, len(samples) // 5)
    train_pool, test = samples[:-n_test], samples[-n_test:]
    scores = {}
    n_unl = min(500, len(train_pool) - 11)
    for variant in ("unet", "sdnet"):
        scores[variant] = _trend_cell(
            variant, 11, 0, train_pool, test[: n_test // 2], test[n_test // 2 :],
            epochs=TREND_EPOCHS[(variant, 10)], n_unlabelled=n_unl,
        )
    gap = scores["sdnet"] - scores["unet"]
    _report(capsys, 9, "ACDC low-label gap", gap > 0.2, f"unet {scores['unet']:.3f} sdnet {scores['sdnet']:.3f}")
