"""Command-line surface: gen / train / eval / ablate / heatmap / gradcheck.

Configuration precedence is flag > config file > built-in default. The
config file is a flat JSON object using the same keys as the flags (see
DEFAULTS). Every command writes the fully resolved configuration next to
its outputs so a run can be reproduced from its output directory alone.
All randomness derives from the single master seed through named
sub-streams.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import Bag, Dataset, SynthConfig, generate, load_dataset, split, write_dataset
from .errors import AfdError
from .metrics import classify_metrics, export_instance_scores, mean_distill_precision, metrics_csv
from .model import AfdModel, DistillConfig, forward_bag, model_grad_check, parse_mode
from .rng import ALGORITHM_ID, child_seed, substream
from .training import (
    TrainConfig,
    evaluate,
    history_csv,
    load_checkpoint,
    predict_bags,
    save_checkpoint,
    train,
)

DEFAULTS: dict = {
    "seed": 0,
    # synthetic data
    "kind": "binary",
    "bags_per_class": 150,
    "k_min": 50,
    "k_max": 200,
    "feature_dim": 32,
    "witness_rate": 0.05,
    "separation": 2.0,
    "noise_sigma": 1.0,
    # model / distillation
    "k": 8,
    "mode": "max-p",
    "fusion": "gated",
    "h1": 256,
    "h2": 128,
    "fusion_dim": 128,
    "distill_enabled": True,
    "attention_channel": True,
    "global_loss": True,
    # optimization
    "lr": 1e-4,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "weight_decay": 1e-5,
    "epochs": 50,
    "val_fraction": 0.2,
    # evaluation / sweeps
    "threshold": 0.5,
    "test_fraction": 1.0 / 3.0,
    "k_list": [2, 4, 8, 16, 32, 64],
}


def _resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        file_cfg = json.loads(Path(args.config).read_text())
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise AfdError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    # negative switches: present means "turn off"
    if getattr(args, "no_global_loss", False):
        merged["global_loss"] = False
    if getattr(args, "no_attention_channel", False):
        merged["attention_channel"] = False
    if getattr(args, "no_distill", False):
        merged["distill_enabled"] = False
    return merged


def _write_resolved(out: Path, command: str, resolved: dict, extra: dict | None = None) -> None:
    payload = {"command": command, "rng": ALGORITHM_ID, **resolved}
    if extra:
        payload.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _synth_config(resolved: dict) -> SynthConfig:
    return SynthConfig(
        kind=resolved["kind"],
        bags_per_class=int(resolved["bags_per_class"]),
        k_min=int(resolved["k_min"]),
        k_max=int(resolved["k_max"]),
        feature_dim=int(resolved["feature_dim"]),
        witness_rate=float(resolved["witness_rate"]),
        separation=float(resolved["separation"]),
        noise_sigma=float(resolved["noise_sigma"]),
    )


def _train_config(resolved: dict, shuffle_seed: int) -> TrainConfig:
    return TrainConfig(
        lr=float(resolved["lr"]),
        beta1=float(resolved["beta1"]),
        beta2=float(resolved["beta2"]),
        adam_eps=float(resolved["adam_eps"]),
        weight_decay=float(resolved["weight_decay"]),
        epochs=int(resolved["epochs"]),
        shuffle_seed=shuffle_seed,
        distill=DistillConfig(k=int(resolved["k"]), mode=parse_mode(resolved["mode"])),
        fusion=resolved["fusion"],
        distill_enabled=bool(resolved["distill_enabled"]),
        attention_channel=bool(resolved["attention_channel"]),
        global_loss=bool(resolved["global_loss"]),
    )


def _build_model(resolved: dict, init_seed: int) -> AfdModel:
    return AfdModel(
        n=int(resolved["feature_dim"]),
        h1=int(resolved["h1"]),
        h2=int(resolved["h2"]),
        fusion_dim=int(resolved["fusion_dim"]),
        rng=np.random.default_rng(init_seed),
    )


# -- commands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    resolved = _resolve(args)
    out = Path(args.out)
    config = _synth_config(resolved)
    dataset = generate(config, child_seed(int(resolved["seed"]), "data"))
    manifest = write_dataset(dataset, out)
    _write_resolved(out, "gen", resolved)
    print(manifest)
    return 0


def _load_for_model(data_dir: str, model: AfdModel, with_latent: bool) -> Dataset:
    dataset = load_dataset(data_dir, with_latent=with_latent)
    if dataset.feature_dim != model.n:
        raise AfdError(
            f"dataset feature dim {dataset.feature_dim} != checkpoint feature dim {model.n}"
        )
    return dataset


def cmd_train(args) -> int:
    resolved = _resolve(args)
    out = Path(args.out)
    seed = int(resolved["seed"])
    dataset = load_dataset(args.data, with_latent=False)
    resolved["feature_dim"] = dataset.feature_dim

    val_fraction = float(resolved["val_fraction"])
    if val_fraction > 0:
        train_ds, val_ds = split(dataset, val_fraction, child_seed(seed, "val-split"))
        train_bags, val_bags = train_ds.bags, val_ds.bags
    else:
        train_bags, val_bags = dataset.bags, None

    model = _build_model(resolved, child_seed(seed, "init"))
    config = _train_config(resolved, child_seed(seed, "shuffle"))
    result = train(model, train_bags, config, val_bags)

    out.mkdir(parents=True, exist_ok=True)
    (out / "history.csv").write_text(history_csv(result.history))
    save_checkpoint(
        out / "checkpoint.afdc",
        model,
        config,
        epoch=result.best_epoch,
        seed=seed,
        val_metrics=result.best_val,
        state=result.best_state,
    )
    _write_resolved(out, "train", resolved, {"data": str(args.data)})
    best = result.history[result.best_epoch]
    print(f"trained {config.epochs} epochs on {len(train_bags)} bags")
    if best.val is not None and best.val.auc is not None:
        print(f"checkpoint: epoch {result.best_epoch} (val auc {best.val.auc:.4f})")
    else:
        print(f"checkpoint: epoch {result.best_epoch}")
    print(out / "checkpoint.afdc")
    return 0


def cmd_eval(args) -> int:
    resolved = _resolve(args)
    out = Path(args.out)
    model, checkpoint = load_checkpoint(args.checkpoint)
    dataset = _load_for_model(args.data, model, with_latent=True)
    config = checkpoint.train_config
    threshold = float(resolved["threshold"])

    traces = predict_bags(model, dataset.bags, config)
    report = classify_metrics(
        [t.final_prob for t in traces], [b.label for b in dataset.bags], threshold
    )
    positives = [
        (trace, bag) for trace, bag in zip(traces, dataset.bags) if bag.label == 1
    ]
    report.distill_precision_ins = mean_distill_precision(
        (t.channel1_indices, b.instance_labels) for t, b in positives
    )
    report.distill_precision_att = mean_distill_precision(
        (t.channel2_indices, b.instance_labels) for t, b in positives
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(report))
    _write_resolved(out, "eval", resolved, {"data": str(args.data), "checkpoint": str(args.checkpoint)})
    auc_txt = "n/a" if report.auc is None else f"{report.auc:.4f}"
    print(
        f"acc {report.acc:.4f}  auc {auc_txt}  recall {report.recall:.4f}  "
        f"precision {report.precision:.4f}  (threshold {threshold})"
    )
    print(out / "metrics.csv")
    return 0


ABLATION_ROWS = (
    ("plain", False, False, False),
    ("fd", True, False, False),
    ("att-fd", True, True, False),
    ("full", True, True, True),
)

ABLATION_HEADER = "k,variant,distill,attention_channel,global_loss,cell_seed,acc,auc,recall,precision"


def cmd_ablate(args) -> int:
    resolved = _resolve(args)
    out = Path(args.out)
    seed = int(resolved["seed"])

    if args.data:
        dataset = load_dataset(args.data, with_latent=False)
        resolved["feature_dim"] = dataset.feature_dim
    else:
        dataset = generate(_synth_config(resolved), child_seed(seed, "data"))
    train_ds, test_ds = split(dataset, float(resolved["test_fraction"]), child_seed(seed, "split"))

    k_list = [int(k) for k in resolved["k_list"]]
    rows = [ABLATION_HEADER]
    for k in k_list:
        for variant, distill_on, attention_on, global_on in ABLATION_ROWS:
            cell_seed = child_seed(seed, f"ablate/{k}/{variant}")
            cell = dict(resolved)
            cell.update(
                k=k,
                distill_enabled=distill_on,
                attention_channel=attention_on,
                global_loss=global_on,
            )
            model = _build_model(cell, child_seed(cell_seed, "init"))
            config = _train_config(cell, child_seed(cell_seed, "shuffle"))
            train(model, train_ds.bags, config)
            report = evaluate(model, test_ds.bags, config, float(resolved["threshold"]))
            auc_txt = "" if report.auc is None else repr(report.auc)
            rows.append(
                f"{k},{variant},{int(distill_on)},{int(attention_on)},{int(global_on)},"
                f"{cell_seed},{report.acc!r},{auc_txt},{report.recall!r},{report.precision!r}"
            )
            print(rows[-1])
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text("\n".join(rows) + "\n")
    _write_resolved(out, "ablate", resolved, {"data": str(args.data) if args.data else None})
    print(out / "ablation.csv")
    return 0


def cmd_heatmap(args) -> int:
    resolved = _resolve(args)
    out = Path(args.out)
    model, checkpoint = load_checkpoint(args.checkpoint)
    dataset = _load_for_model(args.data, model, with_latent=True)
    try:
        bag = dataset.bag_by_id(args.bag)
    except KeyError:
        available = ", ".join(b.id for b in dataset.bags[:20])
        more = "" if len(dataset.bags) <= 20 else f", ... ({len(dataset.bags)} total)"
        print(f"error: unknown bag id {args.bag!r}; available: {available}{more}", file=sys.stderr)
        return 1
    config = checkpoint.train_config
    trace = forward_bag(
        model,
        bag,
        config.distill,
        training=False,
        fusion=config.fusion,
        attention_channel=config.attention_channel,
        distill_enabled=config.distill_enabled,
        use_global_loss=config.global_loss,
    )
    table, raster = export_instance_scores(trace, bag, out / f"{bag.id}_scores.csv")
    _write_resolved(out, "heatmap", resolved, {"bag": bag.id, "checkpoint": str(args.checkpoint)})
    print(table)
    if raster is not None:
        print(raster)
    return 0


def cmd_gradcheck(args) -> int:
    resolved = _resolve(args)
    seed = int(resolved["seed"])
    n = int(args.n)
    dims = dict(n=n, h1=int(args.h1), h2=int(args.h2), fusion_dim=int(args.fusion_dim))
    K = int(args.bag_size)
    k = int(args.k) if args.k is not None else 4
    eps = float(args.eps)
    tol = float(args.tol)

    worst_overall = 0.0
    ok = True
    for mode_txt in ("max-p", "max-pn"):
        for y in (0, 1):
            stream = substream(seed, f"gradcheck/{mode_txt}/{y}")
            model = AfdModel(**dims, rng=stream)
            bag = Bag(id=f"probe-{mode_txt}-{y}", label=y, features=stream.normal(size=(K, n)))
            config = DistillConfig(k=k, mode=parse_mode(mode_txt))
            report = model_grad_check(model, bag, config, eps=eps)
            worst_overall = max(worst_overall, report.max_rel_error)
            status = "ok" if report.max_rel_error < tol else "FAIL"
            print(
                f"mode={mode_txt} y={y} max_rel_error={report.max_rel_error:.3e} "
                f"worst={report.worst_param} [{status}]"
            )
            if report.max_rel_error >= tol:
                ok = False
    print(f"overall max relative error: {worst_overall:.3e} (tolerance {tol:g})")
    return 0 if ok else 1


# -- parser -------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (flags override it)")
    parser.add_argument("--seed", type=int, help="master seed; all streams derive from it")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--k", type=int, help="distilled features per channel")
    parser.add_argument("--mode", choices=["max-p", "max-pn"], help="distillation policy")
    parser.add_argument("--fusion", choices=["gated", "mean"], help="fusion backend")
    parser.add_argument("--no-global-loss", action="store_true", help="use plain loss sum")
    parser.add_argument("--no-attention-channel", action="store_true", help="drop channel 2")
    parser.add_argument("--no-distill", action="store_true", help="plain attention pooling, no distillation")
    parser.add_argument("--threshold", type=float, help="decision threshold")


def _add_synth(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--kind", choices=["binary", "subtype"])
    parser.add_argument("--bags-per-class", type=int, dest="bags_per_class")
    parser.add_argument("--k-min", type=int, dest="k_min")
    parser.add_argument("--k-max", type=int, dest="k_max")
    parser.add_argument("--feature-dim", type=int, dest="feature_dim")
    parser.add_argument("--witness-rate", type=float, dest="witness_rate")
    parser.add_argument("--separation", type=float)
    parser.add_argument("--noise-sigma", type=float, dest="noise_sigma")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afdmil", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)
    _add_synth(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--val-fraction", type=float, dest="val_fraction")
    p.add_argument("--h1", type=int)
    p.add_argument("--h2", type=int)
    p.add_argument("--fusion-dim", type=int, dest="fusion_dim")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep k and the component-toggle grid")
    _add_common(p)
    _add_synth(p)
    p.add_argument("--data", help="dataset directory (default: generate synthetic)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--test-fraction", type=float, dest="test_fraction")
    p.add_argument(
        "--k-list",
        type=lambda text: [int(v) for v in text.split(",")],
        dest="k_list",
        help="comma-separated k values",
    )
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("heatmap", help="export per-instance scores for one bag")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bag", required=True, help="bag id")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    _add_common(p)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--h1", type=int, default=8)
    p.add_argument("--h2", type=int, default=8)
    p.add_argument("--fusion-dim", type=int, dest="fusion_dim", default=8)
    p.add_argument("--bag-size", type=int, default=12)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AfdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
