"""Optimizer, training loop, checkpoint selection and persistence."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import ParamStore, backward
from .data import Bag
from .errors import ConfigError, DimensionError, FormatError, TrainingDivergedError
from .metrics import MetricsReport, classify_metrics
from .model import (
    AfdModel,
    DistillConfig,
    ForwardTrace,
    FUSION_BACKENDS,
    forward_bag,
    parse_mode,
)
from .rng import ALGORITHM_ID, make_rng

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "AFDC v1"
CHECKPOINT_FORMAT = "afd-checkpoint v1"

HISTORY_HEADER = "epoch,loss1,loss2,loss3,total,val_acc,val_auc,val_recall,val_precision"


@dataclass
class TrainConfig:
    """Optimizer settings plus the architecture/ablation switches.

    The three boolean switches select the model variant: with
    ``distill_enabled`` False the model is plain gated-attention pooling
    over all instances; ``attention_channel`` drops the second distillation
    channel; ``global_loss`` switches between the coupled loss and the
    plain sum of the three partial losses.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    epochs: int = 50
    shuffle_seed: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig)
    fusion: str = "gated"
    distill_enabled: bool = True
    attention_channel: bool = True
    global_loss: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.fusion not in FUSION_BACKENDS:
            raise ConfigError(f"unknown fusion backend {self.fusion!r}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "shuffle_seed": self.shuffle_seed,
            "k": self.distill.k,
            "mode": self.distill.mode.value,
            "fusion": self.fusion,
            "distill_enabled": self.distill_enabled,
            "attention_channel": self.attention_channel,
            "global_loss": self.global_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            lr=float(d["lr"]),
            beta1=float(d["beta1"]),
            beta2=float(d["beta2"]),
            adam_eps=float(d["adam_eps"]),
            weight_decay=float(d["weight_decay"]),
            epochs=int(d["epochs"]),
            shuffle_seed=int(d["shuffle_seed"]),
            distill=DistillConfig(k=int(d["k"]), mode=parse_mode(d["mode"])),
            fusion=d["fusion"],
            distill_enabled=bool(d["distill_enabled"]),
            attention_channel=bool(d["attention_channel"]),
            global_loss=bool(d["global_loss"]),
        )


class Adam:
    """Bias-corrected adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params: ParamStore, config: TrainConfig):
        self.params = params
        self.lr = config.lr
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.adam_eps
        self.weight_decay = config.weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        """One update from the accumulated gradients; zeroes them afterward."""
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for name, tensor in self.params.items():
            g = tensor.grad
            if g is None:
                g = np.zeros_like(tensor.data)
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient for parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bias1
            v_hat = v / bias2
            tensor.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps))
            if self.weight_decay:
                tensor.data -= self.lr * self.weight_decay * tensor.data
        self.params.zero_grad()


@dataclass
class EpochStats:
    epoch: int
    loss1: float
    loss2: float
    loss3: float
    total: float
    val: MetricsReport | None = None


@dataclass
class TrainResult:
    model: AfdModel
    history: list[EpochStats]
    best_epoch: int
    best_state: dict[str, np.ndarray]
    best_val: MetricsReport | None


def predict_bags(model: AfdModel, bags: list[Bag], config: TrainConfig) -> list[ForwardTrace]:
    """Inference traces for each bag under the config's architecture switches."""
    return [
        forward_bag(
            model,
            bag,
            config.distill,
            training=False,
            fusion=config.fusion,
            attention_channel=config.attention_channel,
            distill_enabled=config.distill_enabled,
            use_global_loss=config.global_loss,
        )
        for bag in bags
    ]


def evaluate(
    model: AfdModel, bags: list[Bag], config: TrainConfig, threshold: float = 0.5
) -> MetricsReport:
    traces = predict_bags(model, bags, config)
    probs = [t.final_prob for t in traces]
    labels = [b.label for b in bags]
    return classify_metrics(probs, labels, threshold)


def train(
    model: AfdModel,
    train_bags: list[Bag],
    config: TrainConfig,
    val_bags: list[Bag] | None = None,
) -> TrainResult:
    """Per-bag Adam updates with a seeded shuffle each epoch.

    History records the mean partial losses per epoch plus validation
    metrics when a validation set is given. The returned best state is the
    epoch-end snapshot ranked by validation AUC (ties: higher recall, then
    earlier epoch); without validation it is the final state.
    """
    if not train_bags:
        raise ConfigError("training needs at least one bag")
    optimizer = Adam(model.params, config)
    shuffle_rng = make_rng(config.shuffle_seed)
    history: list[EpochStats] = []
    best_epoch = -1
    best_key: tuple[float, float] | None = None
    best_state: dict[str, np.ndarray] | None = None
    best_val: MetricsReport | None = None

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_bags))
        sums = np.zeros(4)
        for bag_idx in order:
            bag = train_bags[bag_idx]
            trace = forward_bag(
                model,
                bag,
                config.distill,
                training=True,
                fusion=config.fusion,
                attention_channel=config.attention_channel,
                distill_enabled=config.distill_enabled,
                use_global_loss=config.global_loss,
            )
            if not math.isfinite(trace.total_loss):
                raise TrainingDivergedError(f"total loss is not finite at epoch {epoch}")
            backward(trace.loss_node)
            optimizer.step()
            sums += (trace.loss1, trace.loss2, trace.loss3, trace.total_loss)
        means = sums / len(train_bags)
        val_report = evaluate(model, val_bags, config) if val_bags else None
        history.append(EpochStats(epoch, *map(float, means), val_report))

        if val_report is not None and val_report.auc is not None:
            key = (val_report.auc, val_report.recall)
            if best_key is None or key > best_key:
                best_key = key
                best_epoch = epoch
                best_state = model.params.snapshot()
                best_val = val_report
        log.debug("epoch %d: mean total loss %.5f", epoch, means[3])

    if best_state is None:
        best_epoch = len(history) - 1
        best_state = model.params.snapshot()
        best_val = history[-1].val
    return TrainResult(model, history, best_epoch, best_state, best_val)


def select_checkpoint(history: list[EpochStats]) -> int:
    """Epoch with the best validation AUC; ties prefer higher recall, then
    the earlier epoch. Falls back to the final epoch when no epoch carries
    validation metrics."""
    if not history:
        raise ConfigError("history is empty")
    best_idx: int | None = None
    best_key: tuple[float, float] | None = None
    for i, stats in enumerate(history):
        if stats.val is None or stats.val.auc is None:
            continue
        key = (stats.val.auc, stats.val.recall)
        if best_key is None or key > best_key:
            best_idx, best_key = i, key
    if best_idx is None:
        log.warning("no validation metrics in history; selecting the final epoch")
        return len(history) - 1
    return best_idx


def history_csv(history: list[EpochStats]) -> str:
    lines = [HISTORY_HEADER]
    for stats in history:
        if stats.val is not None:
            val_cols = (
                f"{stats.val.acc!r},{'' if stats.val.auc is None else repr(stats.val.auc)},"
                f"{stats.val.recall!r},{stats.val.precision!r}"
            )
        else:
            val_cols = ",,,"
        lines.append(
            f"{stats.epoch},{stats.loss1!r},{stats.loss2!r},{stats.loss3!r},{stats.total!r},{val_cols}"
        )
    return "\n".join(lines) + "\n"


# -- checkpoint file ----------------------------------------------------------


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    dims: dict[str, int]
    train_config: TrainConfig
    epoch: int
    val_metrics: dict[str, float]
    rng_id: str
    seed: int


def save_checkpoint(
    path: str | Path,
    model: AfdModel,
    config: TrainConfig,
    *,
    epoch: int,
    seed: int,
    val_metrics: MetricsReport | None = None,
    state: dict[str, np.ndarray] | None = None,
) -> Path:
    """Write a single-file checkpoint: text manifest, then raw f64 payloads.

    The first line carries the magic and the manifest byte length; tensors
    follow in manifest order, little-endian row-major. The round trip is
    bit-exact.
    """
    path = Path(path)
    state = state if state is not None else model.params.snapshot()
    lines = [
        f"format: {CHECKPOINT_FORMAT}",
        f"n: {model.n}",
        f"h1: {model.h1}",
        f"h2: {model.h2}",
        f"fusion_dim: {model.fusion_dim}",
        f"epoch: {epoch}",
        f"seed: {seed}",
        f"rng: {ALGORITHM_ID}",
        f"config: {json.dumps(config.to_dict(), sort_keys=True)}",
    ]
    if val_metrics is not None:
        lines.append(f"val_acc: {val_metrics.acc!r}")
        if val_metrics.auc is not None:
            lines.append(f"val_auc: {val_metrics.auc!r}")
        lines.append(f"val_recall: {val_metrics.recall!r}")
        lines.append(f"val_precision: {val_metrics.precision!r}")
    names = list(state)
    lines.append(f"tensor_count: {len(names)}")
    for name in names:
        arr = state[name]
        lines.append(f"tensor: name={name} rows={arr.shape[0]} cols={arr.shape[1]}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_MAGIC} {len(manifest)}\n".encode("ascii"))
        f.write(manifest)
        for name in names:
            f.write(state[name].astype("<f8").tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[AfdModel, Checkpoint]:
    """Rebuild the model from a checkpoint file, validating the manifest."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FormatError(f"{path}: truncated checkpoint header")
    header = raw[:newline].decode("ascii", errors="replace")
    if not header.startswith(CHECKPOINT_MAGIC + " "):
        raise FormatError(f"{path}: bad checkpoint magic {header!r}")
    try:
        manifest_len = int(header[len(CHECKPOINT_MAGIC) + 1 :])
    except ValueError:
        raise FormatError(f"{path}: malformed checkpoint header {header!r}") from None
    manifest_start = newline + 1
    manifest_bytes = raw[manifest_start : manifest_start + manifest_len]
    if len(manifest_bytes) != manifest_len:
        raise FormatError(f"{path}: manifest truncated")
    fields: dict[str, str] = {}
    tensors: list[tuple[str, int, int]] = []
    for line in manifest_bytes.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, value = line.split(":", 1)
        key, value = key.strip(), value.strip()
        if key == "tensor":
            spec = dict(token.split("=", 1) for token in value.split())
            tensors.append((spec["name"], int(spec["rows"]), int(spec["cols"])))
        else:
            fields[key] = value
    if fields.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unsupported checkpoint format {fields.get('format')!r}")

    dims = {key: int(fields[key]) for key in ("n", "h1", "h2", "fusion_dim")}
    model = AfdModel(dims["n"], dims["h1"], dims["h2"], dims["fusion_dim"])
    declared = int(fields.get("tensor_count", len(tensors)))
    if declared != len(tensors):
        raise FormatError(f"{path}: tensor_count {declared} != {len(tensors)} entries")
    model_names = set(model.params.names())
    manifest_names = {name for name, _, _ in tensors}
    if model_names != manifest_names:
        missing = sorted(model_names ^ manifest_names)
        raise FormatError(f"{path}: tensor names do not match the model (mismatched: {missing})")

    state: dict[str, np.ndarray] = {}
    offset = manifest_start + manifest_len
    for name, rows, cols in tensors:
        expected_shape = model.params[name].data.shape
        if (rows, cols) != expected_shape:
            raise DimensionError(
                f"{path}: tensor {name!r} has shape ({rows}, {cols}), "
                f"model with n={dims['n']} expects {expected_shape}"
            )
        nbytes = rows * cols * 8
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: payload truncated in tensor {name!r}")
        state[name] = np.frombuffer(chunk, dtype="<f8").reshape(rows, cols).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} unexpected trailing bytes")
    model.params.load_state(state)

    val_metrics = {
        key[4:]: float(value) for key, value in fields.items() if key.startswith("val_")
    }
    checkpoint = Checkpoint(
        state=state,
        dims=dims,
        train_config=TrainConfig.from_dict(json.loads(fields["config"])),
        epoch=int(fields["epoch"]),
        val_metrics=val_metrics,
        rng_id=fields.get("rng", ""),
        seed=int(fields.get("seed", 0)),
    )
    return model, checkpoint
