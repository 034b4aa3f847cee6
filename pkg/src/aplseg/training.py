"""Episodic training loop and held-out-class evaluation.

Training samples one-class/one-shot episodes from the train split,
optimizes adapter + prompt + decoder parameters with AdamW under a cosine
schedule, and double-checks the frozen-backbone contract by hashing the
backbone before and after. Evaluation streams deterministic episodes from
held-out classes and reports per-class and overall DSC/IoU percentages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .data import Dataset, Episode, SplitSpec, sample_episode
from .errors import NumericFault, SplitViolation, TrainingAborted
from .losses import episode_loss
from .metrics import as_percent, dsc, iou
from .model import AblationMode, SegModel
from .optim import OptimizerState, adamw_step, cosine_lr
from .rng import stream
from .tensor import backward, no_grad


@dataclass
class EvalReport:
    per_class_dsc: dict[str, float]   # percent, 2 decimals
    per_class_iou: dict[str, float]
    mean_dsc: float
    mean_iou: float
    episodes: int

    def table(self) -> str:
        """Aligned text table, one row per class plus the overall row."""
        names = sorted(self.per_class_dsc) + ["overall"]
        width = max(len(n) for n in names) + 2
        lines = [f"{'class':<{width}}{'DSC':>8}{'IoU':>8}"]
        for n in sorted(self.per_class_dsc):
            lines.append(f"{n:<{width}}{self.per_class_dsc[n]:>8.2f}"
                         f"{self.per_class_iou[n]:>8.2f}")
        lines.append(f"{'overall':<{width}}{self.mean_dsc:>8.2f}{self.mean_iou:>8.2f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["class,dsc,iou"]
        for n in sorted(self.per_class_dsc):
            lines.append(f"{n},{self.per_class_dsc[n]:.2f},{self.per_class_iou[n]:.2f}")
        lines.append(f"overall,{self.mean_dsc:.2f},{self.mean_iou:.2f}")
        return "\n".join(lines) + "\n"


def aggregate_report(dsc_scores: dict[str, list[float]],
                     iou_scores: dict[str, list[float]]) -> EvalReport:
    """Per-class means in percent; overall = plain mean of per-class means."""
    per_dsc = {n: as_percent(float(np.mean(v))) for n, v in dsc_scores.items()}
    per_iou = {n: as_percent(float(np.mean(v))) for n, v in iou_scores.items()}
    n_eps = sum(len(v) for v in dsc_scores.values())
    return EvalReport(per_class_dsc=per_dsc, per_class_iou=per_iou,
                      mean_dsc=round(float(np.mean(list(per_dsc.values()))), 2),
                      mean_iou=round(float(np.mean(list(per_iou.values()))), 2),
                      episodes=n_eps)


def set_ablation(cfg: RunConfig, mode: AblationMode) -> SegModel:
    """Build a model under the given prompt/decoder variant."""
    return SegModel(replace(cfg, prompt_strategy=mode.prompt_strategy,
                            decoder=mode.decoder))


def train(cfg: RunConfig, ds: Dataset, split: SplitSpec,
          out_path: str | Path | None = None,
          log_path: str | Path | None = None,
          inner_hook: Callable[[SegModel, Episode, int], None] | None = None,
          ) -> tuple[SegModel, list[tuple]]:
    """Run the episodic loop; returns the model and the per-step log rows.

    Log rows are (epoch, step, l_bce, l_iou, lr). ``inner_hook`` fires
    after each episode's update with (model, episode, step); meta-learning
    schemes can hang extra inner-loop work on it.
    """
    model = SegModel(cfg)
    hash_before = model.backbone_hash()
    params = model.trainable_params()
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = stream(cfg.seed, "train")
    total_steps = cfg.epochs * cfg.episodes_per_epoch
    rows: list[tuple] = []
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(cfg.episodes_per_epoch):
            episode = sample_episode(ds, split.train_classes, rng)
            try:
                logits = model.forward(episode.support_image, episode.support_mask,
                                       episode.query_image)
                total, terms = episode_loss(logits, episode.query_gt,
                                            cfg.alpha, cfg.beta)
                if math.isnan(terms.total):
                    raise NumericFault("loss is NaN")
                for p in params.values():
                    p.grad = None
                backward(total, params=params.values())
            except NumericFault as exc:
                raise TrainingAborted(
                    f"numeric fault at epoch {epoch} step {step} "
                    f"(class {episode.class_name}): {exc}") from exc
            grads = {name: p.grad for name, p in params.items()}
            lr = cosine_lr(step, total_steps, cfg.lr)
            adamw_step(params, grads, state, lr=lr)
            rows.append((epoch, step, terms.l_bce, terms.l_iou, lr))
            if inner_hook is not None:
                inner_hook(model, episode, step)
            step += 1
    hash_after = model.backbone_hash()
    if hash_after != hash_before:
        raise TrainingAborted("frozen backbone changed during training")
    if log_path is not None:
        lines = ["epoch,step,l_bce,l_iou,lr"]
        lines += [f"{e},{s},{b!r},{i!r},{lr!r}" for e, s, b, i, lr in rows]
        Path(log_path).write_text("\n".join(lines) + "\n")
    if out_path is not None:
        model.save(out_path, train_classes=tuple(split.train_classes))
    return model, rows


def evaluate_predictor(predict_fn: Callable[[Episode], np.ndarray], ds: Dataset,
                       test_classes: tuple[str, ...], n_episodes: int,
                       seed: int) -> EvalReport:
    """Score any episode -> mask function over a deterministic episode stream."""
    rng = stream(seed, "eval")
    dsc_scores: dict[str, list[float]] = {}
    iou_scores: dict[str, list[float]] = {}
    for _ in range(n_episodes):
        ep = sample_episode(ds, test_classes, rng)
        pred = predict_fn(ep)
        dsc_scores.setdefault(ep.class_name, []).append(dsc(pred, ep.query_gt))
        iou_scores.setdefault(ep.class_name, []).append(iou(pred, ep.query_gt))
    return aggregate_report(dsc_scores, iou_scores)


def evaluate_model(model: SegModel, ds: Dataset, test_classes: tuple[str, ...],
                   n_episodes: int, seed: int,
                   train_classes: tuple[str, ...] = ()) -> EvalReport:
    overlap = set(test_classes) & set(train_classes)
    if overlap:
        raise SplitViolation(
            f"evaluation classes seen during training: {sorted(overlap)}")

    def predict_fn(ep: Episode) -> np.ndarray:
        with no_grad():
            return model.predict(ep.support_image, ep.support_mask, ep.query_image)

    return evaluate_predictor(predict_fn, ds, test_classes, n_episodes, seed)


def evaluate(ckpt_path: str | Path, ds: Dataset, test_classes: tuple[str, ...],
             n_episodes: int, seed: int) -> EvalReport:
    """Load a checkpoint (carrying its training classes) and score it."""
    model, meta = SegModel.load(ckpt_path)
    trained_on = tuple(c for c in meta.get("train_classes", "").split(",") if c)
    return evaluate_model(model, ds, test_classes, n_episodes, seed,
                          train_classes=trained_on)
