"""Training and evaluation loops shared by the CLI and the experiments."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from patchattn import balancing as bal
from patchattn import cropping as crp
from patchattn import diffcore as dc
from patchattn import metrics as mt
from patchattn.config import ExperimentConfig
from patchattn.data import Dataset, augment
from patchattn.model import PatchModel

log = logging.getLogger(__name__)


def build_inputs(
    images: list[np.ndarray], cfg: ExperimentConfig, train: bool, rng: np.random.Generator | None
) -> tuple[torch.Tensor, np.ndarray, crp.CropGrid | None]:
    """Turn float images into a normalized ``N_B x N_C x h x w x C`` batch.

    Returns the batch, the patch keep-mask and the crop grid (``None`` when
    patches have no fixed positions).
    """
    size = (cfg.patch_size, cfg.patch_size)
    if train and cfg.augment:
        images = [augment(im, rng, cfg.jitter) for im in images]
    grid = None
    if cfg.strategy == "downsample":
        arr = np.stack([crp.strategy_downsample(im, size) for im in images])[:, None]
    elif cfg.strategy == "single_crop":
        if train:
            arr = np.stack([crp.strategy_single_crop_train(im, size, rng, cfg.single_crop_scale) for im in images])
        else:
            arr = np.stack([crp.strategy_single_crop_eval(im, size) for im in images])
        arr = arr[:, None]
    elif cfg.strategy == "multi_crop" and train:
        batch = crp.stack_batches([crp.strategy_random_crops_train(im, size, cfg.n_crops, rng) for im in images])
        arr = batch.data.numpy()
    else:
        h, w = images[0].shape[:2]
        grid = crp.make_grid((w, h), size, cfg.n_crops)
        arr = crp.extract_patches_batch(images, grid).data.numpy()
    pb = crp.PatchBatch(crp.normalize(torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))), grid,
                        np.ones(arr.shape[:2], bool))
    if train and cfg.strategy == "ordered" and cfg.p_d > 0:
        pb = crp.patch_dropout(pb, cfg.p_d, rng)
    return pb.data, pb.dropout_mask, grid


def batch_stream(cfg: ExperimentConfig, labels: np.ndarray, rng: np.random.Generator):
    n_classes = len(cfg.class_names)
    if cfg.balancing == "oversample":
        return bal.oversample_batches(labels, cfg.batch_size, rng, n_classes)
    if cfg.balancing == "balanced_batches":
        return bal.balanced_batches(labels, cfg.batch_size, rng, n_classes)
    return bal.shuffled_batches(len(labels), cfg.batch_size, rng)


def weight_table(cfg: ExperimentConfig, labels: np.ndarray) -> bal.WeightTable:
    counts = bal.ClassCounts.from_labels(labels, len(cfg.class_names))
    return bal.WeightTable.from_counts(
        counts,
        cfg.k,
        diagnosis_multipliers=dict(cfg.diagnosis_multipliers),
        benign_classes=cfg.benign_indices(),
        default_multiplier=1.0 if cfg.allow_unknown_diagnosis else None,
    )


@dataclass
class EvalResult:
    confusion: np.ndarray
    preds: np.ndarray
    probs: np.ndarray
    attention: dict[str, np.ndarray] = field(default_factory=dict)
    grid: crp.CropGrid | None = None

    def summary(self) -> dict[str, float]:
        return mt.summarize(self.confusion)


def evaluate(model: PatchModel, ds: Dataset, cfg: ExperimentConfig) -> EvalResult:
    """Deterministic forward passes: center crop or fixed grid, no augmentation or dropout."""
    model.eval()
    probs, attn, grid = [], {}, None
    with torch.no_grad():
        for start in range(0, len(ds), cfg.eval_batch_size):
            idx = range(start, min(start + cfg.eval_batch_size, len(ds)))
            x, _, grid = build_inputs([ds.image(i) for i in idx], cfg, train=False, rng=None)
            logp, diag = model(x)
            probs.append(torch.exp(logp).double().numpy())
            for place, a in diag["attention"].items():
                attn.setdefault(place, []).append(a.double().numpy())
    probs = np.concatenate(probs)
    preds = probs.argmax(axis=1)
    cm = mt.confusion(preds, ds.labels, len(cfg.class_names))
    return EvalResult(cm, preds, probs, {k: np.concatenate(v) for k, v in attn.items()}, grid)


@dataclass
class FitResult:
    model: PatchModel
    history: list[dict]
    best_epoch: int
    best_state: dict[str, torch.Tensor]

    def load_best(self) -> PatchModel:
        self.model.load_state_dict(self.best_state)
        return self.model


def fit(
    cfg: ExperimentConfig,
    train_ds: Dataset,
    val_ds: Dataset | None = None,
    on_epoch=None,
) -> FitResult:
    """Train with Adam; keep the parameters of the best validation MC-sensitivity epoch.

    Every random draw (sampling, augmentation, crop positions, patch dropout)
    comes from one generator seeded by ``cfg.seed``, so a run is a pure
    function of the config and the data.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = PatchModel(cfg.model_config(), seed=cfg.seed)
    params = list(model.parameters())
    state = dc.AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    labels = train_ds.labels
    methods = train_ds.methods
    table = weight_table(cfg, labels) if cfg.uses_loss_weights else None
    stream = batch_stream(cfg, labels, rng)
    steps = math.ceil(len(train_ds) / cfg.batch_size)
    n_classes = len(cfg.class_names)

    history, best_epoch, best_score, best_state = [], -1, -math.inf, None
    for epoch in range(cfg.epochs):
        model.train()
        total_loss, preds, seen = 0.0, [], []
        for _ in range(steps):
            idx = next(stream)
            x, _, _ = build_inputs([train_ds.image(i) for i in idx], cfg, train=True, rng=rng)
            y = labels[idx]
            if table is not None:
                w = bal.sample_weights(y, [methods[i] for i in idx], table, cfg.balancing == "diagnosis_weighting")
            else:
                w = None
            logp, _ = model(x)
            loss = dc.weighted_cross_entropy(logp, y, w)
            for p in params:
                p.grad = None
            loss.backward()
            dc.adam_step(params, [p.grad for p in params], state)
            total_loss += loss.item() * len(idx)
            preds.append(logp.detach().argmax(dim=1).numpy())
            seen.append(y)
        train_cm = mt.confusion(np.concatenate(preds), np.concatenate(seen), n_classes)
        row = {"epoch": epoch, "train_loss": total_loss / sum(len(s) for s in seen), "train_confusion": train_cm}
        if val_ds is not None and len(val_ds):
            res = evaluate(model, val_ds, cfg)
            row["val_confusion"] = res.confusion
            score = mt.mc_sensitivity(res.confusion)
        else:
            score = mt.mc_sensitivity(train_cm)
        if score > best_score:
            best_score, best_epoch = score, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        history.append(row)
        log.info("epoch %d loss %.4f score %.4f", epoch, row["train_loss"], score)
        if on_epoch is not None:
            on_epoch(row)
    return FitResult(model, history, best_epoch, best_state)
