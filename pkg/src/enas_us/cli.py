"""``enas-us`` command line: augment, folds, search, cv, train, eval, params, render."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import tomli
import torch

from . import __version__
from .controller import ControllerConfig
from .datapipe import DatasetError, Provenance, fingerprint, load_dataset, read_augmented_set, \
    stratified_folds, write_augmented_set
from .genotype import CountingConfig, GenotypeError, load_arch, save_arch, to_dot
from .nets import enumerate_parameters, instantiate
from .searchspace import PUBLISHED_PARAMS, NetworkManifest, build_alexnet, build_network, deviation_pct, \
    make_stack_plan, network_param_count
from .trainer import SearchConfig, TrainConfig, cross_validate, evaluate, fold_split, load_checkpoint, \
    save_checkpoint, search, search_split, to_tensors, train_from_scratch, write_metrics_csv

log = logging.getLogger("enas_us")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_RUNTIME = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class ExperimentConfig:
    """Flat run configuration; every key may appear in the config file."""

    data: str = ""
    folds: str = ""
    seed: int = 0
    workers: int = 1
    augment: bool = True
    # search
    controller_epochs: int = 150
    candidates_per_epoch: int = 10
    validation_fraction: float = 0.10
    B: int = 5
    search_base_channels: int = 20
    search_plan: str = "ENAS7"
    search_fold: int = 0
    child_lr_max: float = 0.05
    child_lr_min: float = 5e-4
    child_lr_t0: int = 10
    child_lr_t_mul: int = 2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    batch_size: int = 32
    controller_hidden: int = 64
    controller_lr: float = 3.5e-4
    entropy_weight: float = 1e-4
    tanh_constant: float = 1.10
    temperature: float = 5.0
    baseline_decay: float = 0.999
    # final training
    epochs: int = 100
    base_channels: int = 36
    lr_max: float = 0.05
    lr_min: float = 5e-4
    # parameter counting
    include_batchnorm_affine: bool = True
    include_conv_bias: bool = False
    include_projection_ops: bool = True

    def search_config(self) -> SearchConfig:
        ctrl = ControllerConfig(hidden=self.controller_hidden, lr=self.controller_lr,
                                entropy_weight=self.entropy_weight, tanh_constant=self.tanh_constant or None,
                                temperature=self.temperature or None, baseline_decay=self.baseline_decay)
        return SearchConfig(self.controller_epochs, self.candidates_per_epoch, self.validation_fraction, self.B,
                            self.search_base_channels, self.search_plan, self.batch_size, self.child_lr_max,
                            self.child_lr_min, self.child_lr_t0, self.child_lr_t_mul, self.momentum,
                            self.weight_decay, self.grad_clip, self.seed, ctrl)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.base_channels, self.lr_max, self.lr_min,
                           self.momentum, self.weight_decay, self.grad_clip, self.augment, self.seed)

    def counting(self) -> CountingConfig:
        return CountingConfig(self.include_batchnorm_affine, self.include_conv_bias, self.include_projection_ops)


def load_config(path: str | Path | None, **overrides) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = tomli.loads(Path(path).read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    raw.update({k: v for k, v in overrides.items() if v is not None})
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    problems = []
    values = {}
    for key, value in raw.items():
        if key not in fields:
            problems.append(f"unknown key {key!r}")
            continue
        expected = type(getattr(ExperimentConfig, key))
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if type(value) is not expected:
            problems.append(f"key {key!r} expects {expected.__name__}, got {type(value).__name__}")
            continue
        values[key] = value
    if problems:
        raise ConfigError("invalid configuration: " + "; ".join(problems))
    cfg = ExperimentConfig(**values)
    try:
        cfg.search_config()
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return cfg


# -- shared plumbing ---------------------------------------------------------

def _prepare_out(path: Path, force: bool, is_dir: bool = True) -> Path:
    if path.exists() and (not is_dir or any(path.iterdir())) and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    if is_dir:
        path.mkdir(parents=True, exist_ok=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, images=None, started=None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "versions": {"enas_us": __version__, "torch": torch.__version__, "numpy": np.__version__},
        "dataset": fingerprint(images) if images is not None else None,
        "timestamps": {"started": started, "finished": datetime.now(timezone.utc).isoformat()},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _load_data(cfg: ExperimentConfig):
    if not cfg.data:
        raise ConfigError("configuration key 'data' (augmented-set directory) is required")
    data = Path(cfg.data)
    if not (data / "manifest.csv").is_file():
        raise FileNotFoundError(f"{data}: no augmented set found (missing manifest.csv)")
    images, folds = read_augmented_set(data)
    if cfg.folds:
        folds = {k: int(v) for k, v in json.loads(Path(cfg.folds).read_text()).items()}
    return images, folds


def _setup_threads(workers: int) -> None:
    torch.set_num_threads(max(1, workers))


# -- commands ----------------------------------------------------------------

def cmd_augment(args) -> int:
    started = _now()
    originals = load_dataset(args.dataset_root, convert=args.convert)
    folds = stratified_folds(originals, args.k, args.seed)
    out = _prepare_out(Path(args.out), args.force)
    write_augmented_set(originals, folds, out, side=args.side)
    config = {"dataset_root": str(args.dataset_root), "k": args.k, "side": args.side, "convert": args.convert}
    write_manifest(out, "augment", config, args.seed, originals, started)
    print(f"wrote {len(originals) * 8} images to {out}")
    return EXIT_OK


def cmd_folds(args) -> int:
    originals = load_dataset(args.dataset_root, convert=args.convert)
    folds = stratified_folds(originals, args.k, args.seed)
    out = _prepare_out(Path(args.out), args.force, is_dir=False)
    out.write_text(json.dumps(folds, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(folds)} fold assignments to {out}")
    return EXIT_OK


def cmd_search(args) -> int:
    started = _now()
    cfg = load_config(args.config, seed=args.seed, workers=args.workers)
    images, folds = _load_data(cfg)
    out = _prepare_out(Path(args.out), args.force)
    _setup_threads(cfg.workers)
    scfg = cfg.search_config()
    train, val = search_split(images, folds, cfg.search_fold, scfg, augment=cfg.augment)
    result, state = search(to_tensors(train), to_tensors(val), scfg)
    save_arch(result.best, out / "genotype.json")
    result.save(out / "search_report.json")
    write_manifest(out, "search", dataclasses.asdict(cfg), cfg.seed, images, started)
    print(f"best validation accuracy {result.best_accuracy:.4f} over {len(result.candidates)} candidates")
    return EXIT_OK


def cmd_cv(args) -> int:
    started = _now()
    arch = load_arch(args.genotype)
    cfg = load_config(args.config, seed=args.seed, workers=args.workers)
    images, folds = _load_data(cfg)
    out = _prepare_out(Path(args.out), args.force)
    _setup_threads(cfg.workers)
    outcomes, mean = cross_validate(arch, args.variant, images, folds, cfg.train_config(), cfg.counting(),
                                    checkpoint_dir=out / "checkpoints")
    write_metrics_csv([o.metrics for o in outcomes], out / "metrics.csv")
    plan = make_stack_plan(args.variant, cfg.base_channels)
    config = {**dataclasses.asdict(cfg), "variant": plan.name, "plan": plan.pattern()}
    write_manifest(out, "cv", config, cfg.seed, images, started)
    print(f"mean accuracy {mean['acc']:.4f} over {len(outcomes)} folds")
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    arch = load_arch(args.genotype)
    cfg = load_config(args.config, seed=args.seed, workers=args.workers)
    images, folds = _load_data(cfg)
    out = _prepare_out(Path(args.out), args.force)
    _setup_threads(cfg.workers)
    fold = -1 if args.fold is None else args.fold
    train, _ = fold_split(images, folds, fold, cfg.augment)
    net = build_network(arch, make_stack_plan(args.variant, cfg.base_channels))
    result = train_from_scratch(net, to_tensors(train), cfg.train_config(), cfg.counting())
    save_checkpoint(result.model, NetworkManifest.for_network(net, arch, cfg.counting()), out)
    (out / "curve.json").write_text(json.dumps(result.curve, indent=2) + "\n")
    write_manifest(out, "train", {**dataclasses.asdict(cfg), "variant": args.variant, "fold": args.fold},
                   cfg.seed, images, started)
    print(f"final training accuracy {result.curve[-1]['accuracy']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config)
    images, folds = _load_data(cfg)
    test = [im for im in images if im.provenance is Provenance.ORIGINAL
            and (args.fold is None or folds[im.source_id] == args.fold)]
    out = _prepare_out(Path(args.out), args.force, is_dir=False)
    metrics = evaluate(model, test)
    write_metrics_csv([metrics], out)
    print(f"accuracy {metrics.acc:.4f} on {len(test)} images")
    return EXIT_OK


def cmd_params(args) -> int:
    counting = CountingConfig(not args.no_bn_affine, args.conv_bias, not args.no_projections)
    variant = args.variant.upper()
    if variant == "ALEXNET":
        nets = {"alexnet (flatten)": build_alexnet(args.classes, args.input_side, args.in_channels),
                "alexnet (adaptive 6x6)": build_alexnet(args.classes, args.input_side, args.in_channels,
                                                        adaptive_pool=True)}
    else:
        if args.genotype is None:
            raise ConfigError(f"variant {variant} needs a genotype file")
        arch = load_arch(args.genotype)
        nets = {variant: build_network(arch, make_stack_plan(variant, args.base_channels, args.classes))}
    reference = PUBLISHED_PARAMS.get(variant.replace("-", ""))
    print(f"counting: {counting.to_dict()}")
    for name, net in nets.items():
        analytic = network_param_count(net, counting)
        enumerated = enumerate_parameters(instantiate(net, counting), counting)
        line = f"{name}: analytic {analytic:,}  enumerated {enumerated:,}"
        if reference:
            line += f"  published {reference:,}  deviation {deviation_pct(analytic, reference):+.2f}%"
        print(line)
        if analytic != enumerated:
            print("analytic and enumerated counts disagree", file=sys.stderr)
            return EXIT_RUNTIME
    return EXIT_OK


def cmd_render(args) -> int:
    arch = load_arch(args.genotype)
    out = _prepare_out(Path(args.out), args.force)
    for kind in ("normal", "reduction"):
        (out / f"{kind}.dot").write_text(to_dot(getattr(arch, kind), f"{kind} cell"))
    print(f"wrote {out / 'normal.dot'} and {out / 'reduction.dot'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enas-us", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="flat key = value TOML file")
            p.add_argument("--seed", type=int)
            p.add_argument("--workers", type=int, help="torch threads; 1 keeps runs bit-reproducible")
        p.add_argument("--out", required=True)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("augment", help="augment and resize a dataset, assign folds")
    p.add_argument("dataset_root")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--side", type=int, default=100)
    p.add_argument("--convert", action="store_true", help="convert colour images to grayscale")
    common(p, config=False)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("folds", help="write the stratified fold assignment")
    p.add_argument("dataset_root")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--convert", action="store_true")
    common(p, config=False)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("search", help="controller search over the shared supergraph")
    common(p)
    p.set_defaults(func=cmd_search)

    for name, func, doc in (("cv", cmd_cv, "cross-validate a genotype"),
                            ("train", cmd_train, "train a genotype from scratch")):
        p = sub.add_parser(name, help=doc)
        p.add_argument("genotype")
        p.add_argument("variant", choices=["ENAS7", "ENAS17"], type=str.upper)
        if name == "train":
            p.add_argument("--fold", type=int, help="hold this fold out (default: train on everything)")
        common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on original images")
    p.add_argument("checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="analytic and enumerated parameter counts")
    p.add_argument("genotype", nargs="?")
    p.add_argument("--variant", default="ENAS17", type=str.upper, choices=["ENAS7", "ENAS17", "ALEXNET"])
    p.add_argument("--base-channels", type=int, default=36)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--input-side", type=int, default=100)
    p.add_argument("--in-channels", type=int, default=3)
    p.add_argument("--no-bn-affine", action="store_true")
    p.add_argument("--conv-bias", action="store_true")
    p.add_argument("--no-projections", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("render", help="write DOT files for both cells")
    p.add_argument("genotype")
    common(p, config=False)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, GenotypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
