"""zaplab: a continual/transfer-learning lab built on a small autodiff engine.

Pre-train convolutional classifiers with i.i.d. batches, alternating
sequential-and-batch episodes (ASB), or meta-gradients through the unrolled
inner loop (Meta-ASB), with optional "zapping" (resampling final-layer rows);
then evaluate few-shot transfer sequentially or by standard fine-tuning.
"""

from .autodiff import Tensor, backward, no_grad, tensor
from .config import ExperimentConfig, config_from_dict, load_config
from .data import ClassDataset, EpisodeBatch, SplitPlan, load_imagefolder, make_split, sample_episode, synth_glyphs
from .models import ArchitectureSpec, ConvNet, arch_preset, build_convnet, clone_params, load_checkpoint, load_params, replace_head, save_checkpoint
from .optim import AdamState, adam_step, sgd_step_functional, sgd_step_inplace
from .protocols import (
    evaluate_classifier,
    mann_whitney_u,
    pretrain_asb,
    pretrain_iid,
    run_pretrain,
    run_transfer,
    sweep_and_select,
    transfer_iid,
    transfer_sequential,
)
from .zapping import ZapPolicy, zap_class, zap_iid

__version__ = "0.1.0"
