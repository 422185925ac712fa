"""SDNet: factorised spatial representation learning for semi-supervised
myocardium segmentation."""

from .data import (
    ImageSlice,
    LabelBudget,
    LabelledSample,
    MaskMap,
    PhantomSpec,
    UnlabelledSample,
    Volume,
    center_crop_or_pad,
    generate_phantom,
    load_volume,
    make_label_budget,
    make_splits,
    normalise_volume,
    resample_volume,
)
from .networks import (
    ArchDescriptor,
    Decomposition,
    LatentCode,
    SDNet,
    binarize_st,
    decompose,
    discriminate_image,
    discriminate_mask,
    init_params,
    load_params,
    reconstruct,
    save_params,
)
from .objectives import (
    LossReport,
    LossWeights,
    adv_losses_image,
    adv_losses_mask,
    composite_labelled,
    composite_unlabelled,
    loss_dice,
    loss_image_supervised,
    loss_rec,
)
from .trainer import TrainConfig, Trainer, train_baseline_gan, train_baseline_unet, train_sdnet
from .evaluation import MetricRecord, dice_score, evaluate_model, run_label_sweep
from .latent import ArithmeticJob, emit_figure, null_mask, null_z, recombine

__version__ = "0.1.0"
