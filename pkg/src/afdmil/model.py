"""Dual-channel feature-distillation MIL model.

One bag of instance feature vectors flows through two selection channels:
an instance-level classifier picks the features it scores most relevant,
and an attention pooler picks the features it weights hardest. The union
of the selected features is fused by gated attention and classified. The
three partial losses (instance channel, attention channel, final
classifier) couple through a global loss that scales the channel losses by
exp(-|final loss|), so good end predictions reward the distillation step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, Tensor
from .errors import ConfigError, DimensionError, EmptyBagError

log = logging.getLogger(__name__)

FUSION_BACKENDS = ("gated", "mean")


class DistillMode(str, Enum):
    MAX_POSITIVE = "max-p"
    MAX_POSITIVE_NEGATIVE = "max-pn"


def parse_mode(text: str) -> DistillMode:
    try:
        return DistillMode(text)
    except ValueError:
        valid = ", ".join(m.value for m in DistillMode)
        raise ConfigError(f"unknown distill mode {text!r} (expected one of: {valid})") from None


@dataclass(frozen=True)
class DistillConfig:
    """How many features each channel keeps and which selection policy."""

    k: int = 8
    mode: DistillMode = DistillMode.MAX_POSITIVE

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"distilled feature count k must be >= 1, got {self.k}")
        if self.mode == DistillMode.MAX_POSITIVE_NEGATIVE and self.k % 2 != 0:
            raise ConfigError(f"k must be even in {self.mode.value} mode, got k={self.k}")


@dataclass
class ForwardTrace:
    """Full record of one bag's forward pass."""

    instance_probs: np.ndarray
    attention_weights: np.ndarray
    channel1_indices: list[int]
    channel2_indices: list[int]
    attention_branch_prob: float
    final_prob: float
    loss1: float
    loss2: float
    loss3: float
    total_loss: float
    loss_node: Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def predicted_label(self) -> int:
        return 1 if self.final_prob >= 0.5 else 0


class AfdModel:
    """All trainable parameters of the distillation network.

    Sub-networks, all acting on n-dimensional instance features:
      * instance classifier  n -> h1 (relu) -> 1 (sigmoid)
      * attention scorer     n -> h2 (tanh) -> 1
      * attention-branch classifier  n -> 1 (sigmoid)
      * gated fusion         V, U: n -> fusion_dim, w: fusion_dim -> 1
      * final classifier     n -> h1 (relu) -> 1 (sigmoid)
    """

    def __init__(
        self,
        n: int,
        h1: int = 256,
        h2: int = 128,
        fusion_dim: int = 128,
        rng: np.random.Generator | None = None,
    ):
        if min(n, h1, h2, fusion_dim) < 1:
            raise ConfigError(f"all model dims must be >= 1, got n={n} h1={h1} h2={h2} D={fusion_dim}")
        self.n = n
        self.h1 = h1
        self.h2 = h2
        self.fusion_dim = fusion_dim
        rng = rng if rng is not None else np.random.default_rng(0)

        p = ParamStore()
        self.params = p

        def weight(name, fan_in, fan_out):
            p.add(name, rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)))

        def bias(name, width):
            p.add(name, np.zeros((1, width)))

        weight("ins_w1", n, h1)
        bias("ins_b1", h1)
        weight("ins_w2", h1, 1)
        bias("ins_b2", 1)

        weight("att_w1", n, h2)
        bias("att_b1", h2)
        weight("att_w2", h2, 1)
        bias("att_b2", 1)

        weight("attcls_w", n, 1)
        bias("attcls_b", 1)

        weight("gate_v", n, fusion_dim)
        weight("gate_u", n, fusion_dim)
        weight("gate_w", fusion_dim, 1)

        weight("final_w1", n, h1)
        bias("final_b1", h1)
        weight("final_w2", h1, 1)
        bias("final_b2", 1)

        log.info(
            "model built: n=%d h1=%d h2=%d fusion_dim=%d, %d parameters",
            n, h1, h2, fusion_dim, p.n_params(),
        )

    @property
    def dims(self) -> dict[str, int]:
        return {"n": self.n, "h1": self.h1, "h2": self.h2, "fusion_dim": self.fusion_dim}


def _check_features(model: AfdModel, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError(f"bag features must be 2-D (K, n), got shape {X.shape}")
    if X.shape[0] < 1:
        raise EmptyBagError("bag has no instances")
    if X.shape[1] != model.n:
        raise DimensionError(f"bag feature dim {X.shape[1]} != model feature dim {model.n}")
    return X


def top_indices(values: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest values, descending, ties to the smaller index."""
    order = np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")
    return [int(i) for i in order[:k]]


def bottom_indices(values: np.ndarray, k: int) -> list[int]:
    """Indices of the k smallest values, ascending, ties to the smaller index."""
    order = np.argsort(np.asarray(values, dtype=np.float64), kind="stable")
    return [int(i) for i in order[:k]]


def instance_forward(model: AfdModel, features: np.ndarray) -> Tensor:
    """Per-instance positive probability, shape (K,); no cross-instance mixing."""
    X = _check_features(model, features)
    p = model.params
    hidden = ag.relu(ag.affine(Tensor(X), p["ins_w1"], p["ins_b1"]))
    logits = ag.affine(hidden, p["ins_w2"], p["ins_b2"])
    return ag.reshape(ag.sigmoid(logits), (X.shape[0],))


def distill_instances(
    instance_probs: Tensor,
    features: np.ndarray,
    config: DistillConfig,
    bag_label: int,
) -> tuple[list[int], np.ndarray, Tensor]:
    """Select features by instance probability and score them against the bag label.

    Max-positive keeps the min(k, K) highest-probability instances. The
    positive&negative variant keeps min(k/2, K) from each end of the
    probability ranking; the two halves are drawn independently from the
    whole bag, so an instance may appear in both. The channel loss is the
    mean BCE of the selected positive-side probabilities against the bag
    label (the negative half is fusion input only: scoring the
    least-positive instances against the bag label would mislabel neutral
    instances in subtype-vs-subtype tasks).
    """
    probs = instance_probs.data
    K = probs.shape[0]
    if config.mode == DistillMode.MAX_POSITIVE:
        k_eff = min(config.k, K)
        indices = top_indices(probs, k_eff)
        loss_indices = indices
    else:
        half = min(config.k // 2, K)
        positive = top_indices(probs, half)
        negative = bottom_indices(probs, half)
        indices = positive + negative
        loss_indices = positive
    loss1 = ag.bce_mean(ag.gather(instance_probs, loss_indices), bag_label)
    return indices, np.asarray(features, dtype=np.float64)[indices], loss1


def attention_forward(
    model: AfdModel, features: np.ndarray, bag_label: int
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Attention weights, pooled bag feature, branch probability and its loss.

    The branch probability only drives training of the attention scorer;
    it is never the model's prediction.
    """
    X = _check_features(model, features)
    K = X.shape[0]
    p = model.params
    hidden = ag.tanh(ag.affine(Tensor(X), p["att_w1"], p["att_b1"]))
    scores = ag.affine(hidden, p["att_w2"], p["att_b2"])
    alpha = ag.softmax(ag.reshape(scores, (K,)))
    pooled = ag.matmul(ag.reshape(alpha, (1, K)), Tensor(X))
    branch_prob = ag.sigmoid(ag.affine(pooled, p["attcls_w"], p["attcls_b"]))
    loss2 = ag.bce(ag.reshape(branch_prob, ()), bag_label)
    return alpha, pooled, branch_prob, loss2


def distill_by_attention(
    attention_weights: Tensor | np.ndarray, features: np.ndarray, k: int
) -> tuple[list[int], np.ndarray]:
    """Select the min(k, K) features with the largest attention weights."""
    alpha = attention_weights.data if isinstance(attention_weights, Tensor) else attention_weights
    indices = top_indices(alpha, min(k, len(alpha)))
    return indices, np.asarray(features, dtype=np.float64)[indices]


def fuse_and_classify(
    model: AfdModel, distilled: np.ndarray, backend: str = "gated"
) -> tuple[Tensor, Tensor]:
    """Pool the distilled features into one bag feature and classify it.

    Gated pooling scores each feature with w^T(tanh(Vf) * sigmoid(Uf)),
    softmax-normalizes the scores and takes the weighted sum; the mean
    backend averages the features instead. Duplicate features are kept.
    """
    F = np.asarray(distilled, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 1:
        raise EmptyBagError(f"fusion needs at least one distilled feature, got shape {F.shape}")
    if F.shape[1] != model.n:
        raise DimensionError(f"distilled feature dim {F.shape[1]} != model feature dim {model.n}")
    m = F.shape[0]
    p = model.params
    F_t = Tensor(F)
    if backend == "gated":
        gate = ag.mul(ag.tanh(ag.matmul(F_t, p["gate_v"])), ag.sigmoid(ag.matmul(F_t, p["gate_u"])))
        scores = ag.matmul(gate, p["gate_w"])
        weights = ag.softmax(ag.reshape(scores, (m,)))
        fused = ag.matmul(ag.reshape(weights, (1, m)), F_t)
    elif backend == "mean":
        fused = ag.matmul(Tensor(np.full((1, m), 1.0 / m)), F_t)
    else:
        raise ConfigError(f"unknown fusion backend {backend!r} (expected one of: {FUSION_BACKENDS})")
    hidden = ag.relu(ag.affine(fused, p["final_w1"], p["final_b1"]))
    final_prob = ag.sigmoid(ag.affine(hidden, p["final_w2"], p["final_b2"]))
    return ag.reshape(final_prob, ()), fused


def global_loss(loss1, loss2, loss3, *, coeff_override: float | None = None):
    """Couple the three losses: (l1 + l2) * exp(-|l3|) + l3.

    The exp(-|l3|) factor is a per-step constant, not a gradient path:
    it re-weights the distillation losses by the quality of the final
    prediction. ``coeff_override`` pins the factor explicitly (used by the
    finite-difference harness, which must evaluate the same step-frozen
    function the analytic gradient differentiates).
    """
    if isinstance(loss1, Tensor) or isinstance(loss2, Tensor) or isinstance(loss3, Tensor):
        l1, l2, l3 = ag.ensure_tensor(loss1), ag.ensure_tensor(loss2), ag.ensure_tensor(loss3)
        coeff = coeff_override if coeff_override is not None else math.exp(-abs(l3.item()))
        return (l1 + l2) * float(coeff) + l3
    coeff = coeff_override if coeff_override is not None else math.exp(-abs(loss3))
    return (loss1 + loss2) * coeff + loss3


def forward_bag(
    model: AfdModel,
    bag,
    config: DistillConfig,
    training: bool = True,
    *,
    fusion: str = "gated",
    attention_channel: bool = True,
    use_global_loss: bool = True,
    distill_enabled: bool = True,
    coeff_override: float | None = None,
) -> ForwardTrace:
    """Run one bag through both channels, fusion and the final classifier.

    With ``distill_enabled`` False the model degrades to plain attention
    pooling over every instance (no channel selections, loss1 = loss2 = 0).
    With ``attention_channel`` False only channel-1 features feed fusion
    and loss2 = 0. The returned trace records every intermediate; the
    differentiable total-loss node is attached when ``training``.
    """
    X = _check_features(model, bag.features)
    y = int(bag.label)

    instance_probs = instance_forward(model, X)
    alpha, _pooled, branch_prob, loss2_node = attention_forward(model, X, y)

    zero = Tensor(0.0)
    if distill_enabled:
        ch1_indices, ch1_features, loss1_node = distill_instances(instance_probs, X, config, y)
        if attention_channel:
            ch2_indices, ch2_features = distill_by_attention(alpha, X, config.k)
            fused_input = np.concatenate([ch1_features, ch2_features], axis=0)
        else:
            ch2_indices = []
            fused_input = ch1_features
            loss2_node = zero
    else:
        ch1_indices, ch2_indices = [], []
        fused_input = X
        loss1_node = zero
        loss2_node = zero

    final_prob, _fused = fuse_and_classify(model, fused_input, backend=fusion)
    loss3_node = ag.bce(final_prob, y)

    if use_global_loss:
        total_node = global_loss(loss1_node, loss2_node, loss3_node, coeff_override=coeff_override)
    else:
        total_node = loss1_node + loss2_node + loss3_node

    return ForwardTrace(
        instance_probs=instance_probs.data.copy(),
        attention_weights=alpha.data.copy(),
        channel1_indices=ch1_indices,
        channel2_indices=ch2_indices,
        attention_branch_prob=branch_prob.item(),
        final_prob=final_prob.item(),
        loss1=loss1_node.item(),
        loss2=loss2_node.item(),
        loss3=loss3_node.item(),
        total_loss=total_node.item(),
        loss_node=total_node if training else None,
    )


def model_grad_check(
    model: AfdModel,
    bag,
    config: DistillConfig,
    *,
    eps: float = 1e-5,
    fusion: str = "gated",
    attention_channel: bool = True,
    use_global_loss: bool = True,
    distill_enabled: bool = True,
) -> ag.GradCheckReport:
    """Finite-difference check of the full per-bag training gradient.

    The global-loss coefficient is frozen at its unperturbed value so the
    difference quotient samples the same step-constant objective whose
    gradient training computes.
    """
    kwargs = dict(
        fusion=fusion,
        attention_channel=attention_channel,
        use_global_loss=use_global_loss,
        distill_enabled=distill_enabled,
    )
    base = forward_bag(model, bag, config, training=True, **kwargs)
    coeff = math.exp(-abs(base.loss3)) if use_global_loss else None

    def loss_fn(_params):
        trace = forward_bag(model, bag, config, training=True, coeff_override=coeff, **kwargs)
        return trace.loss_node

    return ag.grad_check(loss_fn, model.params, eps)
