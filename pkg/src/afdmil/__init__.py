"""Dual-channel feature-distillation multiple instance learning.

Bags of precomputed instance feature vectors are classified by selecting
the most diagnostic instances through two channels (an instance-level
classifier and an attention pooler), fusing the selected features with
gated attention, and coupling the channel losses to the final prediction
through a global loss.
"""

from .autograd import ParamStore, Tensor, affine, backward, bce, grad_check, softmax
from .data import Bag, Dataset, SynthConfig, gen_binary, gen_subtype, load_dataset, split, write_dataset
from .errors import AfdError
from .metrics import MetricsReport, auc, classify_metrics, distill_precision, export_instance_scores
from .model import (
    AfdModel,
    DistillConfig,
    DistillMode,
    ForwardTrace,
    attention_forward,
    distill_by_attention,
    distill_instances,
    forward_bag,
    fuse_and_classify,
    global_loss,
    instance_forward,
    model_grad_check,
)
from .training import (
    Adam,
    Checkpoint,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    select_checkpoint,
    train,
)

__version__ = "0.1.0"
