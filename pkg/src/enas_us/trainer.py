"""Two-stage search and evaluation: shared-weight search, then from-scratch cross-validation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .controller import BaselineState, ControllerConfig, ControllerPolicy, reinforce_update, sample_batch
from .datapipe import POSITIVE_LABEL, Label, Provenance, RoiImage, expand, split_validation
from .genotype import ArchPair, CountingConfig, check
from .nets import SharedSupergraph, activate_subnetwork, instantiate
from .searchspace import (
    FINAL_BASE_CHANNELS,
    SEARCH_BASE_CHANNELS,
    NetworkManifest,
    build_network,
    make_stack_plan,
    plan_from_pattern,
)

log = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    controller_epochs: int = 150
    candidates_per_epoch: int = 10
    validation_fraction: float = 0.10
    B: int = 5
    base_channels: int = SEARCH_BASE_CHANNELS
    search_plan: str = "ENAS7"
    batch_size: int = 32
    lr_max: float = 0.05
    lr_min: float = 5e-4
    lr_t0: int = 10
    lr_t_mul: int = 2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    seed: int = 0
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    def __post_init__(self):
        for name in ("controller_epochs", "candidates_per_epoch", "B", "base_channels", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.validation_fraction < 1:
            raise ValueError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    base_channels: int = FINAL_BASE_CHANNELS
    lr_max: float = 0.05
    lr_min: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


# -- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    tn: int
    fp: int
    fn: int
    tp: int
    tnr: float | None
    tpr: float | None
    pr: float | None
    acc: float | None

    @property
    def undefined(self) -> tuple[str, ...]:
        return tuple(name for name in ("tnr", "tpr", "pr", "acc") if getattr(self, name) is None)

    def rates(self) -> dict:
        return {"tnr": self.tnr, "tpr": self.tpr, "pr": self.pr, "acc": self.acc}


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def compute_metrics(tn: int, fp: int, fn: int, tp: int) -> Metrics:
    if min(tn, fp, fn, tp) < 0:
        raise ValueError("confusion counts must be non-negative")
    if tn + fp + fn + tp == 0:
        raise ValueError("confusion matrix is empty")
    return Metrics(tn, fp, fn, tp, _ratio(tn, tn + fp), _ratio(tp, tp + fn), _ratio(tp, tp + fp),
                   _ratio(tp + tn, tn + fp + fn + tp))


def confusion(y_true: Sequence[int], y_pred: Sequence[int], positive: int = POSITIVE_LABEL) -> Metrics:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    pos_t, pos_p = y_true == positive, y_pred == positive
    return compute_metrics(int(np.sum(~pos_t & ~pos_p)), int(np.sum(~pos_t & pos_p)),
                           int(np.sum(pos_t & ~pos_p)), int(np.sum(pos_t & pos_p)))


def mean_metrics(per_fold: Sequence[Metrics]) -> dict:
    """Unweighted mean of per-fold rates; undefined rates are skipped."""
    out = {}
    for name in ("tnr", "tpr", "pr", "acc"):
        vals = [getattr(m, name) for m in per_fold if getattr(m, name) is not None]
        out[name] = sum(vals) / len(vals) if vals else None
    return out


def pooled_metrics(per_fold: Sequence[Metrics]) -> Metrics:
    return compute_metrics(*(sum(getattr(m, k) for m in per_fold) for k in ("tn", "fp", "fn", "tp")))


def predict(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over two logits; exact ties go to BENIGN."""
    return (logits[:, Label.MALIGNANT] > logits[:, Label.BENIGN]).long()


def write_metrics_csv(per_fold: Sequence[Metrics], path: str | Path) -> None:
    fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fold", "tn", "fp", "fn", "tp", "tnr", "tpr", "pr", "acc"])
        for i, m in enumerate(per_fold):
            writer.writerow([i, m.tn, m.fp, m.fn, m.tp] + [fmt(v) for v in m.rates().values()])
        mean = mean_metrics(per_fold)
        writer.writerow(["mean", "", "", "", ""] + [fmt(mean[k]) for k in ("tnr", "tpr", "pr", "acc")])
        pooled = pooled_metrics(per_fold)
        writer.writerow(["pooled", pooled.tn, pooled.fp, pooled.fn, pooled.tp]
                        + [fmt(v) for v in pooled.rates().values()])


# -- tensors -----------------------------------------------------------------

def to_tensors(images: Sequence[RoiImage]) -> tuple[torch.Tensor, torch.Tensor]:
    if not images:
        raise ValueError("no images")
    x = torch.from_numpy(np.stack([np.asarray(im.pixels, dtype=np.float32) for im in images]) / 255.0)
    y = torch.tensor([int(im.label) for im in images], dtype=torch.long)
    return x.unsqueeze(1), y


def batches(x: torch.Tensor, y: torch.Tensor, batch_size: int, generator: torch.Generator | None = None):
    order = torch.randperm(len(x), generator=generator) if generator is not None else torch.arange(len(x))
    for start in range(0, len(x), batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]


def accuracy(model, x: torch.Tensor, y: torch.Tensor, batch_size: int = 256) -> float:
    correct = 0
    with torch.no_grad():
        for xb, yb in batches(x, y, batch_size):
            correct += int((predict(model(xb)) == yb).sum())
    return correct / len(x)


# -- search ------------------------------------------------------------------

@dataclass
class SearchState:
    supergraph: SharedSupergraph
    policy: ControllerPolicy
    baseline: BaselineState
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    generator: torch.Generator


def init_search(cfg: SearchConfig, in_channels: int = 1, counting: CountingConfig = CountingConfig()) -> SearchState:
    torch.manual_seed(cfg.seed)
    plan = make_stack_plan(cfg.search_plan, cfg.base_channels) if cfg.search_plan.upper().startswith("ENAS") \
        else plan_from_pattern(cfg.search_plan, cfg.base_channels)
    supergraph = SharedSupergraph(plan, cfg.B, counting, in_channels)
    policy = ControllerPolicy(cfg.B, cfg.controller, seed=cfg.seed)
    opt = torch.optim.SGD(supergraph.parameters(), lr=cfg.lr_max, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay, nesterov=True)
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=cfg.lr_t0, T_mult=cfg.lr_t_mul,
                                                                 eta_min=cfg.lr_min)
    return SearchState(supergraph, policy, BaselineState(decay=cfg.controller.baseline_decay), opt, sched,
                       torch.Generator().manual_seed(cfg.seed))


def train_child_epoch(state: SearchState, train_data: tuple[torch.Tensor, torch.Tensor], cfg: SearchConfig) -> dict:
    """One pass over ``train_data``; each batch trains a freshly sampled subnetwork."""
    x, y = train_data
    if len(x) == 0:
        raise ValueError("empty training stream")
    state.supergraph.train()
    losses, archs = [], []
    for xb, yb in batches(x, y, cfg.batch_size, state.generator):
        ((arch, _),) = sample_batch(state.policy, 1, state.generator)
        archs.append(arch.encode())
        view = activate_subnetwork(state.supergraph, arch)
        loss = F.cross_entropy(view(xb), yb)
        state.optimizer.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(state.supergraph.parameters(), cfg.grad_clip)
        state.optimizer.step()
        losses.append(loss.item())
    state.scheduler.step()
    return {"mean_loss": sum(losses) / len(losses), "losses": losses, "archs": archs}


def controller_epoch(state: SearchState, val_data: tuple[torch.Tensor, torch.Tensor], cfg: SearchConfig) -> list[dict]:
    """Sample candidates, score them on ``val_data``, take one REINFORCE step."""
    x, y = val_data
    if len(x) == 0:
        raise ValueError("empty validation set")
    state.supergraph.train()  # batch statistics; no parameters are touched here
    candidates = sample_batch(state.policy, cfg.candidates_per_epoch, state.generator)
    rewards = []
    for arch, _ in candidates:
        rewards.append(accuracy(activate_subnetwork(state.supergraph, arch), x, y, batch_size=cfg.batch_size))
    reinforce_update(state.policy, [tr for _, tr in candidates], rewards, state.baseline)
    return [{"arch": arch, "val_accuracy": r} for (arch, _), r in zip(candidates, rewards)]


@dataclass
class SearchResult:
    best: ArchPair
    best_accuracy: float
    candidates: list[dict]
    child_epochs: list[dict]
    config: dict

    def report(self) -> dict:
        return {
            "best": self.best.to_dict(),
            "best_val_accuracy": self.best_accuracy,
            "candidates": [
                {"epoch": c["epoch"], "index": c["index"], "genotype": c["arch"].to_dict(),
                 "val_accuracy": c["val_accuracy"]}
                for c in self.candidates
            ],
            "child_epochs": self.child_epochs,
            "config": self.config,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.report(), indent=2, sort_keys=True) + "\n")


def search(train_data, val_data, cfg: SearchConfig, in_channels: int = 1) -> tuple[SearchResult, SearchState]:
    state = init_search(cfg, in_channels)
    candidates, child_log = [], []
    for epoch in range(cfg.controller_epochs):
        child_log.append(train_child_epoch(state, train_data, cfg))
        for index, entry in enumerate(controller_epoch(state, val_data, cfg)):
            candidates.append({"epoch": epoch, "index": index, **entry})
        log.info("search epoch %d: child loss %.4f, best val acc so far %.4f", epoch,
                 child_log[-1]["mean_loss"], max(c["val_accuracy"] for c in candidates))
    best = max(candidates, key=lambda c: c["val_accuracy"])  # max keeps the earliest tie
    return SearchResult(best["arch"], best["val_accuracy"], candidates, child_log, config_dict(cfg)), state


def search_split(images: Sequence[RoiImage], folds: dict[str, int], fold: int, cfg: SearchConfig,
                 augment: bool = True) -> tuple[list[RoiImage], list[RoiImage]]:
    """Training and validation images for searching on the training side of ``fold``.

    Validation holds only ORIGINAL images of its sources; augmented copies of
    validation sources are dropped.
    """
    originals = [im for im in images if im.provenance is Provenance.ORIGINAL]
    training = [(im.source_id, im.label) for im in originals if folds[im.source_id] != fold]
    train_ids, val_ids = split_validation(training, cfg.validation_fraction, cfg.seed)
    train_ids, val_ids = set(train_ids), set(val_ids)
    train = [im for im in _training_pool(images, augment) if im.source_id in train_ids]
    val = [im for im in originals if im.source_id in val_ids]
    return train, val


def _training_pool(images: Sequence[RoiImage], augment: bool) -> list[RoiImage]:
    """Originals plus variants: taken from ``images`` if present, generated otherwise."""
    if not augment:
        return [im for im in images if im.provenance is Provenance.ORIGINAL]
    if any(im.provenance is not Provenance.ORIGINAL for im in images):
        return list(images)
    return expand(images)


# -- final training ----------------------------------------------------------

@dataclass
class TrainResult:
    model: nn.Module
    curve: list[dict]


def train_from_scratch(net, train_data: tuple[torch.Tensor, torch.Tensor], cfg: TrainConfig,
                       counting: CountingConfig = CountingConfig()) -> TrainResult:
    x, y = train_data
    if len(x) == 0:
        raise ValueError("empty training data")
    torch.manual_seed(cfg.seed)
    model = instantiate(net, counting)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr_max, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay, nesterov=True)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs, eta_min=cfg.lr_min)
    curve = []
    for epoch in range(cfg.epochs):
        model.train()
        total, correct, seen = 0.0, 0, 0
        for xb, yb in batches(x, y, cfg.batch_size, gen):
            logits = model(xb)
            loss = F.cross_entropy(logits, yb)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            total += loss.item() * len(xb)
            correct += int((predict(logits) == yb).sum())
            seen += len(xb)
        sched.step()
        curve.append({"epoch": epoch, "loss": total / seen, "accuracy": correct / seen})
    model.eval()
    return TrainResult(model, curve)


def evaluate(model: nn.Module, images: Sequence[RoiImage], batch_size: int = 256) -> Metrics:
    x, y = to_tensors(images)
    model.eval()
    preds = []
    with torch.no_grad():
        for xb, _ in batches(x, y, batch_size):
            preds.append(predict(model(xb)))
    return confusion(y.tolist(), torch.cat(preds).tolist())


@dataclass
class FoldOutcome:
    fold: int
    metrics: Metrics
    result: TrainResult
    test_ids: list[str]


def fold_split(images: Sequence[RoiImage], folds: dict[str, int], fold: int,
               augment: bool) -> tuple[list[RoiImage], list[RoiImage]]:
    train = [im for im in _training_pool(images, augment) if folds[im.source_id] != fold]
    test = [im for im in images if im.provenance is Provenance.ORIGINAL and folds[im.source_id] == fold]
    return train, test


def cross_validate(arch: ArchPair, variant: str, images: Sequence[RoiImage], folds: dict[str, int],
                   cfg: TrainConfig, counting: CountingConfig = CountingConfig(),
                   checkpoint_dir: str | Path | None = None) -> tuple[list[FoldOutcome], dict]:
    """Train from scratch on each fold's complement and test on the fold's originals."""
    check(arch.normal)
    check(arch.reduction)
    k = max(folds.values()) + 1
    in_channels = 1
    plan = make_stack_plan(variant, cfg.base_channels)
    net = build_network(arch, plan, in_channels)
    outcomes = []
    for fold in range(k):
        train, test = fold_split(images, folds, fold, cfg.augment)
        result = train_from_scratch(net, to_tensors(train), cfg, counting)
        metrics = evaluate(result.model, test)
        outcomes.append(FoldOutcome(fold, metrics, result, sorted({im.source_id for im in test})))
        log.info("fold %d: acc %.4f", fold, metrics.acc)
        if checkpoint_dir is not None:
            save_checkpoint(result.model, NetworkManifest.for_network(net, arch, counting),
                            Path(checkpoint_dir) / f"fold{fold}")
    return outcomes, mean_metrics([o.metrics for o in outcomes])


def save_checkpoint(model: nn.Module, manifest: NetworkManifest, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "model.pt")
    manifest.save(directory / "model.json")


def load_checkpoint(directory: str | Path) -> tuple[nn.Module, NetworkManifest]:
    directory = Path(directory)
    manifest = NetworkManifest.load(directory / "model.json")
    net, _, counting = manifest.rebuild()
    model = instantiate(net, counting)
    model.load_state_dict(torch.load(directory / "model.pt", weights_only=True))
    model.eval()
    return model, manifest


def config_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


