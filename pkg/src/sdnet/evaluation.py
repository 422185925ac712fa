"""Segmentation metrics, held-out evaluation and the label-budget sweep."""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import LeakageError, ShapeError


@dataclass
class MetricRecord:
    variant: str
    dataset: str
    fold: int
    n_labelled: int
    subject_dice: dict  # subject_id -> mean dice over that subject's slices
    mean_dice: float


def dice_score(m_pred, m_true, threshold=0.5):
    """Hard Dice: threshold the prediction, then 2|A∩B| / (|A|+|B|).

    Returns 1.0 when both masks are empty (no myocardium present or predicted).
    """
    m_pred = np.asarray(m_pred)
    m_true = np.asarray(m_true)
    if m_pred.shape != m_true.shape:
        raise ShapeError(f"shape mismatch: {m_pred.shape} vs {m_true.shape}")
    a = m_pred >= threshold
    b = m_true >= threshold
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * (a & b).sum() / total)


def evaluate_model(trainer, test_samples, split=None, variant="", dataset="", fold=0, n_labelled=0):
    """Per-subject Dice on a held-out test set, averaged subject-first.

    If a SplitSpec is given, test subjects are checked against its train set
    and any overlap raises a LeakageError.
    """
    if split is not None:
        overlap = {s.subject_id for s in test_samples} & set(split.train_ids)
        if overlap:
            raise LeakageError(f"test subjects appear in training split: {sorted(overlap)}")
    images = np.stack([s.image.pixels for s in test_samples]).astype(np.float32)[:, None]
    preds = trainer.predict_masks(images)
    per_subject = {}
    for i, s in enumerate(test_samples):
        score = dice_score(preds[i, 0], s.mask.pixels)
        per_subject.setdefault(s.subject_id, []).append(score)
    subject_dice = {k: float(np.mean(v)) for k, v in sorted(per_subject.items())}
    return MetricRecord(
        variant=variant,
        dataset=dataset,
        fold=fold,
        n_labelled=n_labelled,
        subject_dice=subject_dice,
        mean_dice=float(np.mean(list(subject_dice.values()))),
    )


def _samples_by_subject(samples, subject_ids):
    wanted = set(subject_ids)
    return [s for s in samples if s.subject_id in wanted]


def run_label_sweep(
    samples,
    budgets,
    variants=("unet", "gan", "sdnet"),
    folds=3,
    n_unlabelled=None,
    config=None,
    seed=0,
    dataset="phantom",
    out_dir=None,
    log=False,
):
    """Train every (variant, budget, fold) cell and collect test Dice records.

    All cells of one fold share the same volume-level split and the same
    unlabelled pool; the unpaired mask pool is always disjoint from the
    labelled subjects.
    """
    from .data import MaskMap, UnlabelledSample, make_label_budget, make_splits
    from .trainer import TrainConfig, Trainer

    if config is None:
        config = TrainConfig()
    subject_ids = sorted({s.subject_id for s in samples})
    max_budget = max(budgets)
    records = []
    for fold in range(folds):
        split = make_splits(subject_ids, fold, seed=seed)
        train_pool = _samples_by_subject(samples, split.train_ids)
        val_set = _samples_by_subject(samples, split.val_ids)
        test_set = _samples_by_subject(samples, split.test_ids)
        pairs = [(s.sample_id, s.subject_id) for s in train_pool]
        n_unl = n_unlabelled
        if n_unl is None:
            n_unl = len(train_pool) - max_budget
        for budget in budgets:
            if budget > len(train_pool):
                raise ValueError(f"budget {budget} exceeds {len(train_pool)} training slices")
            lb = make_label_budget(pairs, budget, min(n_unl, len(train_pool) - budget), seed=seed)
            by_id = {s.sample_id: s for s in train_pool}
            labelled = [by_id[i] for i in lb.labelled_ids]
            unlabelled = [
                UnlabelledSample(image=by_id[i].image, sample_id=i, subject_id=by_id[i].subject_id)
                for i in lb.unlabelled_ids
            ]
            mask_pool = [MaskMap(pixels=by_id[i].mask.pixels, is_binary=True) for i in lb.mask_pool_ids]
            for variant in variants:
                cfg = config.with_overrides([f"variant={variant}", f"seed={config.seed}"])
                trainer = Trainer(cfg, labelled, unlabelled, mask_pool, val_set)
                trainer.fit()
                best = trainer.best_model()
                trainer.model = best  # evaluate the best-validation snapshot
                rec = evaluate_model(
                    trainer, test_set, split=split, variant=variant, dataset=dataset,
                    fold=fold, n_labelled=budget,
                )
                records.append(rec)
                if log:
                    print(
                        f"[sweep] fold {fold} budget {budget} {variant}: "
                        f"test dice {rec.mean_dice:.3f}"
                    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_sweep_csv(records, os.path.join(out_dir, "sweep_cells.csv"))
        write_summary_csv(records, os.path.join(out_dir, "sweep_summary.csv"))
    return records


def write_sweep_csv(records, path):
    """One row per (variant, budget, fold); per-subject scores JSON-encoded."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "dataset", "fold", "n_labelled", "mean_dice", "subject_dice"])
        for r in records:
            writer.writerow(
                [r.variant, r.dataset, r.fold, r.n_labelled, f"{r.mean_dice:.6f}", json.dumps(r.subject_dice)]
            )


def write_summary_csv(records, path):
    """Mean-over-folds table: one row per variant, one column per budget."""
    budgets = sorted({r.n_labelled for r in records}, reverse=True)
    variants = []
    for r in records:
        if r.variant not in variants:
            variants.append(r.variant)
    with open(path, "w") as fh:
        fh.write("variant," + ",".join(str(b) for b in budgets) + "\n")
        for v in variants:
            cells = []
            for b in budgets:
                scores = [r.mean_dice for r in records if r.variant == v and r.n_labelled == b]
                cells.append(f"{np.mean(scores):.6f}" if scores else "")
            fh.write(v + "," + ",".join(cells) + "\n")


def summarize(records):
    """{variant: {budget: mean dice over folds}}."""
    out = {}
    for r in records:
        out.setdefault(r.variant, {}).setdefault(r.n_labelled, []).append(r.mean_dice)
    return {
        v: {b: float(np.mean(scores)) for b, scores in sorted(by_budget.items())}
        for v, by_budget in out.items()
    }
