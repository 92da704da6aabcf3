"""Command-line interface: extract, synth, train, eval, ablate, params.

Configuration precedence (lowest to highest): built-in defaults, the YAML
file given by ``--config``, command-line flags. The fully resolved config is
written to ``<out>/resolved_config.yaml`` and can be fed back via
``--config`` to repeat a run.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .blocks import ConfigError
from .cache import FeatureCache, default_cache_root
from .data import (
    FormatError, generate_synthetic, load_class_table, load_dataset, read_image, save_dataset,
    split_dataset,
)
from .features import ExtractorParams, canonical_extractors
from .infusion import InjectionPlan
from .metrics import TABLE_COLUMNS, format_report, write_report
from .network import (
    ABLATION_VARIANTS, REFERENCE_PARAMS, NetworkConfig, Variant, build_model, count_parameters,
    parameters_by_module,
)
from .training import (
    TrainConfig, evaluate, model_from_checkpoint, seed_everything, train,
)

log = logging.getLogger("attnseg")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    data: str | None = None
    out: str = "runs/default"
    class_table: str | None = None
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    cache_dir: str | None = None
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(injection_plan=InjectionPlan()))
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "out": self.out,
            "class_table": self.class_table,
            "split": list(self.split),
            "cache_dir": self.cache_dir,
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {"data", "out", "class_table", "split", "cache_dir", "network", "train"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        net = NetworkConfig.from_dict(d.pop("network", None) or {})
        tr = TrainConfig.from_dict(d.pop("train", None) or {})
        if "split" in d:
            d["split"] = tuple(d["split"])
        return cls(network=net, train=tr, **d)


def load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        cfg = RunConfig.from_dict(yaml.safe_load(path.read_text()))

    top = {k: getattr(args, k) for k in ("data", "out", "class_table", "cache_dir")
           if getattr(args, k, None) is not None}
    if getattr(args, "split", None):
        top["split"] = tuple(float(v) for v in args.split.split(","))
    cfg = replace(cfg, **top)

    net = {}
    for flag, key in (("variant", "variant"), ("base_filters", "base_filters"), ("depth", "depth"),
                      ("dropout", "dropout_rate")):
        if getattr(args, flag, None) is not None:
            net[key] = getattr(args, flag)
    if getattr(args, "fixed_ratio", False):
        net["learnable_ratio"] = False

    inject = getattr(args, "inject", None)
    features = getattr(args, "features", None)
    plan = cfg.network.injection_plan
    variant = Variant(net.get("variant", cfg.network.variant))
    if inject is False or (inject is None and features is None and variant is Variant.UNET_BASELINE):
        plan = None
    elif inject is True or features is not None:
        base = plan or InjectionPlan()
        plan = InjectionPlan.from_dict({**base.to_dict(),
                                        **({"extractors": features.split(",")} if features else {})})
    # one replace so the plan is validated against the final depth
    network = replace(cfg.network, **net, injection_plan=plan)

    tr = {}
    for flag in ("epochs", "batch_size", "seed", "lr0", "checkpoint_every"):
        if getattr(args, flag, None) is not None:
            tr[flag] = getattr(args, flag)
    if getattr(args, "ciw", None) is not None:
        tr["ciw_loss_weighting"] = args.ciw
    train_cfg = replace(cfg.train, **tr) if tr else cfg.train
    return replace(cfg, network=network, train=train_cfg)


def _resolve_table(cfg: RunConfig):
    if cfg.class_table:
        return load_class_table(cfg.class_table)
    if cfg.data and (Path(cfg.data) / "classes.csv").exists():
        return load_class_table(Path(cfg.data) / "classes.csv")
    return load_class_table()


def _finalize_network(cfg: RunConfig, table) -> RunConfig:
    net = replace(cfg.network, num_classes=table.num_classes)
    return replace(cfg, network=net)


def _echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def _load_data(cfg: RunConfig, table):
    if not cfg.data:
        raise UsageError("no dataset given (--data or `data:` in the config)")
    if not Path(cfg.data).is_dir():
        raise UsageError(f"dataset directory {cfg.data} not found")
    samples = load_dataset(cfg.data, table)
    if not samples:
        raise UsageError(f"dataset {cfg.data} is empty")
    return samples


# --- commands ------------------------------------------------------------------

def cmd_extract(args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise UsageError(f"input directory {src} not found")
    img_dir = src / "images" if (src / "images").is_dir() else src
    paths = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"))
    extractors = canonical_extractors(args.features.split(","))
    root = Path(args.out) if args.out else default_cache_root()
    if root is None:
        raise UsageError("no output directory (--out or $ATTNSEG_CACHE_DIR)")
    cache = FeatureCache(root, extractors, ExtractorParams())
    names = None
    for p in paths:
        try:
            image = read_image(p)
        except OSError as exc:
            raise UsageError(f"cannot read {p}: {exc}") from exc
        names = cache.get(p.stem, image).names
    if names is not None:
        cache.write_manifest(names, [p.stem for p in paths])
    if cache.misses == 0 and cache.hits:
        log.info("cache hit for all %d images in %s; nothing to do", cache.hits, cache.dir)
    else:
        log.info("extracted %d images (%d cache hits) into %s", cache.misses, cache.hits, cache.dir)
    print(cache.dir)
    return EXIT_OK


def cmd_synth(args) -> int:
    table = load_class_table(args.class_table) if args.class_table else load_class_table()
    if args.classes is not None:
        table = table.subset(args.classes)
    samples = generate_synthetic(args.num, (args.size, args.size), args.seed, table)
    save_dataset(samples, args.out, table)
    log.info("wrote %d samples to %s", len(samples), args.out)
    return EXIT_OK


def _split_samples(cfg: RunConfig, samples):
    split = split_dataset(samples, cfg.split, cfg.train.seed)
    return split


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    table = _resolve_table(cfg)
    cfg = _finalize_network(cfg, table)
    samples = _load_data(cfg, table)
    out = Path(cfg.out)
    _echo_config(cfg, out)
    split = _split_samples(cfg, samples)
    (out / "split.json").write_text(json.dumps(split.to_dict(), indent=2))
    seed_everything(cfg.train.seed, cfg.train.deterministic)
    model = build_model(cfg.network)
    log.info("model %s with %d parameters", cfg.network.variant.value, count_parameters(model))
    state = train(model, samples, split, cfg.train, table, out, resume_from=args.resume,
                  cache_root=default_cache_root(cfg.cache_dir))
    log.info("finished epoch %d; last checkpoint %s", state.epoch, state.checkpoint)
    return EXIT_OK


def _plot_samples(model, samples, table, features, out: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .training import images_to_tensor, predict

    pred = predict(model, images_to_tensor(samples), features).numpy()
    out.mkdir(parents=True, exist_ok=True)
    for s, p in zip(samples, pred):
        fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
        for ax, img, title in zip(axes, (s.image, table.encode(s.mask), table.encode(p)),
                                  ("image", "ground truth", "prediction")):
            ax.imshow(img)
            ax.set_title(title)
            ax.axis("off")
        fig.tight_layout()
        fig.savefig(out / f"{s.id}.png", dpi=80)
        plt.close(fig)


def _plot_curves(history, path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    epochs = [r["epoch"] for r in history]
    axes[2].plot(epochs, [r["train_loss"] for r in history], label="train loss")
    for ax, key, title in ((axes[0], "iou_bg", "validation IoU"), (axes[1], "f1", "validation F1")):
        vals = [r.get("val", {}).get(key) for r in history]
        if any(v is not None for v in vals):
            ax.plot(epochs, [np.nan if v is None else v for v in vals])
        ax.set_title(title)
        ax.set_xlabel("epoch")
    axes[2].set_title("loss")
    axes[2].set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    model, payload = model_from_checkpoint(ckpt)
    data = Path(args.data)
    if not data.is_dir():
        raise UsageError(f"dataset directory {data} not found")
    table = load_class_table(args.class_table) if args.class_table else (
        load_class_table(data / "classes.csv") if (data / "classes.csv").exists() else load_class_table()
    )
    if table.num_classes != model.config.num_classes:
        raise ConfigError(
            f"class table has {table.num_classes} classes but checkpoint expects {model.config.num_classes}"
        )
    samples = load_dataset(data, table)
    if args.split != "all":
        split_file = Path(args.split_file) if args.split_file else ckpt.parent / "split.json"
        if not split_file.is_file():
            raise UsageError(f"split file {split_file} not found (use --split all)")
        ids = set(json.loads(split_file.read_text())[args.split])
        samples = [s for s in samples if s.id in ids]
    if not samples:
        raise UsageError("no samples to evaluate")
    from .training import compute_features
    features = compute_features(model, samples, default_cache_root(args.cache_dir))
    rep = evaluate(model, samples, table, features)
    out = Path(args.out)
    write_report(rep, out / "metrics.json")
    text = format_report(rep)
    (out / "metrics.txt").write_text(text + "\n")
    print(text)
    if args.plots:
        _plot_samples(model, samples, table, features, out / "plots")
        history = (payload.get("train_state") or {}).get("history") or []
        _plot_curves(history, out / "plots" / "curves.png")
    return EXIT_OK


def _format_table(rows) -> str:
    head = ["variant", "params", *TABLE_COLUMNS]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        vals = [r["variant"], str(r["params"])] + [
            "n/a" if r.get(c) is None else f"{r[c]:.5f}" for c in TABLE_COLUMNS
        ]
        lines.append("| " + " | ".join(vals) + " |")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = load_run_config(args)
    table = _resolve_table(cfg)
    cfg = _finalize_network(cfg, table)
    samples = _load_data(cfg, table)
    out = Path(cfg.out)
    _echo_config(cfg, out)
    split = _split_samples(cfg, samples)
    by_id = {s.id: s for s in samples}
    eval_ids = split.test or split.val or split.train
    eval_samples = [by_id[i] for i in eval_ids]
    rows, status = [], {}
    for v in ABLATION_VARIANTS:
        try:
            seed_everything(cfg.train.seed, cfg.train.deterministic)
            model = build_model(replace(cfg.network, variant=v))
            train(model, samples, split, cfg.train, table, out / v.value,
                  cache_root=default_cache_root(cfg.cache_dir))
            rep = evaluate(model, eval_samples, table)
            rows.append({"variant": v.value, "params": count_parameters(model),
                         **{c: rep[c] for c in TABLE_COLUMNS}})
            status[v.value] = "ok"
        except Exception as exc:  # report every variant's status before failing
            status[v.value] = f"failed: {exc}"
            log.error("variant %s failed: %s", v.value, exc)
            break
    (out / "status.json").write_text(json.dumps(status, indent=2))
    if any(s != "ok" for s in status.values()) or len(status) < len(ABLATION_VARIANTS):
        for v in ABLATION_VARIANTS:
            print(f"{v.value}: {status.get(v.value, 'not run')}")
        return EXIT_RUNTIME
    table_txt = _format_table(rows)
    (out / "ablation.md").write_text(table_txt + "\n")
    (out / "ablation.json").write_text(json.dumps(rows, indent=2))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "params", *TABLE_COLUMNS])
        w.writeheader()
        w.writerows(rows)
    print(table_txt)
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = load_run_config(args)
    if args.num_classes is not None:
        cfg = replace(cfg, network=replace(cfg.network, num_classes=args.num_classes))
    model = build_model(cfg.network)
    total = count_parameters(model)
    for name, n in parameters_by_module(model).items():
        print(f"{name:<14}{n:>12,}")
    print(f"{'total':<14}{total:>12,}")
    delta = total - REFERENCE_PARAMS
    print(f"reference {REFERENCE_PARAMS:,}; delta {delta:+,} ({100 * delta / REFERENCE_PARAMS:+.2f}%)")
    return EXIT_OK


# --- parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_options(p, data=True):
    p.add_argument("--config", help="YAML run configuration")
    if data:
        p.add_argument("--data", help="dataset root")
    p.add_argument("--out", help="output directory")
    p.add_argument("--class-table", dest="class_table")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--split", help="train,val,test fractions, e.g. 0.8,0.1,0.1")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--base-filters", dest="base_filters", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--fixed-ratio", dest="fixed_ratio", action="store_true",
                   help="original fixed-ratio attention units")
    p.add_argument("--inject", dest="inject", action="store_true", default=None)
    p.add_argument("--no-inject", dest="inject", action="store_false")
    p.add_argument("--features", help="comma-separated extractor ids for injection")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--ciw", dest="ciw", action="store_true", default=None)
    p.add_argument("--no-ciw", dest="ciw", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attnseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="compute engineered feature stacks into a cache")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--features", default="gabor,sobel,canny")
    p.add_argument("--out")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--num", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, help="use only the first N classes of the table")
    p.add_argument("--class-table", dest="class_table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _run_options(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--class-table", dest="class_table")
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="all")
    p.add_argument("--split-file", dest="split_file")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare placements P1-P6")
    _run_options(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="report trainable parameter counts")
    _run_options(p, data=False)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"attnseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.exception("attnseg %s failed", args.command)
        print(f"attnseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
