"""Training loop, evaluation, feature ablation and run persistence."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import data as D
from . import metrics as MX
from . import model as M
from . import rlar as R
from .checkpoint import load_arrays, save_arrays
from .features import (FeatureVector, StandardizationStats, extract_features,
                       standardize, CANONICAL_FEATURES, N_FEATURES)

LOG_HEADER = ("epoch,L_total,L_seg,L_cls,L_clin,L_rlar,"
              "cos_seg_cls,cos_seg_clin,cos_cls_clin,val_dice,val_macro_f1")
PAIR_COLUMNS = (("seg", "cls"), ("seg", "clin"), ("cls", "clin"))


class TrainError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_seg: float = 1.0
    lambda_cls: float = 1.0
    lambda_clin: float = 0.1
    rlar: R.RlarConfig = field(default_factory=R.RlarConfig)
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    steps_per_epoch: int = 0  # 0 = one full pass over the training split
    seed: int = 0
    image_size: int = 32
    folds: int = 5
    fold_index: int = 0

    def __post_init__(self):
        for name in ("lambda_seg", "lambda_cls", "lambda_clin"):
            if getattr(self, name) < 0:
                raise TrainError(f"{name} must be non-negative")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.rlar.lambda_adv > 0 and len(self.rlar.tasks) < 2:
            raise TrainError("lambda_adv > 0 requires at least 2 tasks")


@dataclass
class RunArtifacts:
    config: TrainConfig
    best_params: dict[str, np.ndarray]
    stats: StandardizationStats
    class_weights: np.ndarray
    log_rows: list[dict]
    fold_of_case: dict[str, int]
    selection_history: list[float]
    best_epoch: int


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict[str, ad.Tensor], lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.wd * p.data)


def _batch_arrays(samples: list[D.Sample], idx: np.ndarray):
    imgs = np.stack([samples[i].image for i in idx])[:, None, :, :]
    masks = np.stack([samples[i].mask for i in idx]).astype(np.float64)
    labels = np.array([samples[i].label for i in idx], dtype=np.int64)
    return imgs, masks, labels


def _validate(state: M.ModelState, samples: list[D.Sample], batch: int = 16):
    """Mean hard Dice and macro-F1 over a validation split."""
    dices = []
    preds = []
    labels = []
    with ad.no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start:start + batch]
            imgs = np.stack([s.image for s in chunk])[:, None, :, :]
            out = M.forward(state, imgs)
            seg = out.seg.data > 0.5
            for i, s in enumerate(chunk):
                dices.append(MX.dice_binary(seg[i], s.mask))
            preds.extend(np.argmax(out.logits.data, axis=1).tolist())
            labels.extend(s.label for s in chunk)
    prf = MX.precision_recall_f1(np.array(labels), np.array(preds), M.NUM_CLASSES)
    return float(np.mean(dices)), prf["f1_macro"]


def train(cfg: TrainConfig, samples: list[D.Sample]) -> RunArtifacts:
    """Train one fold; deterministic given (cfg, samples)."""
    fold_of_case = D.kfold_split([s.case_id for s in samples], cfg.folds, cfg.seed)
    train_set = [s for s in samples if fold_of_case[s.case_id] != cfg.fold_index]
    val_set = [s for s in samples if fold_of_case[s.case_id] == cfg.fold_index]
    if not train_set or not val_set:
        raise TrainError("empty train or validation split")

    # clinical targets standardized with train-split statistics only
    train_features = [extract_features(s.image, s.mask) for s in train_set]
    stats = StandardizationStats.fit(train_features)
    targets = np.stack([standardize(fv, stats).values for fv in train_features])

    weights = D.class_weights(D.class_counts(train_set))
    state = M.init_params(cfg.seed)
    opt = AdamW(state.params, cfg.lr, cfg.weight_decay)
    param_names = state.param_names()

    hooks = R.hook_names(cfg.rlar)
    log_rows: list[dict] = []
    history: list[float] = []
    best_metric = -np.inf
    best_epoch = -1
    best_params = {k: p.data.copy() for k, p in state.params.items()}

    n_train = len(train_set)
    steps = cfg.steps_per_epoch or max(1, n_train // cfg.batch_size)

    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 1000 + epoch]).permutation(n_train)
        sums = {k: 0.0 for k in ("L_total", "L_seg", "L_cls", "L_clin", "L_rlar")}
        cos_sums = {pair: 0.0 for pair in PAIR_COLUMNS}
        for step in range(steps):
            lo = (step * cfg.batch_size) % n_train
            idx = order[lo:lo + cfg.batch_size]
            if idx.size == 0:
                idx = order[:cfg.batch_size]
            imgs, masks, labels = _batch_arrays(train_set, idx)
            batch_targets = targets[idx]

            out = M.forward(state, imgs)
            losses = {
                "seg": M.dice_loss(out.seg, masks),
                "cls": M.weighted_ce(out.logits, labels, weights),
                "clin": M.clin_loss(out.h_tirads, batch_targets),
            }
            reps = [out.hooks[h] for h in hooks]
            use_penalty = cfg.rlar.lambda_adv > 0
            penalty, report = R.rlar_penalty(losses, reps, cfg.rlar,
                                             create_graph=use_penalty)

            total = ad.add(
                ad.add(ad.mul(losses["seg"], cfg.lambda_seg),
                       ad.mul(losses["cls"], cfg.lambda_cls)),
                ad.mul(losses["clin"], cfg.lambda_clin))
            if use_penalty:
                total = ad.add(total, penalty)

            parts = {
                "L_seg": losses["seg"].item(),
                "L_cls": losses["cls"].item(),
                "L_clin": losses["clin"].item(),
                "L_rlar": penalty.item(),  # zero when lambda_adv == 0
            }
            for name, value in {**parts, "L_total": total.item()}.items():
                if not np.isfinite(value):
                    raise TrainError(f"non-finite loss component {name} "
                                     f"at epoch {epoch} step {step}")
                sums[name] += value
            for pair, value in report.batch_means().items():
                cos_sums[pair] += value

            grads = ad.grad(total, state.tensors())
            opt.step(dict(zip(param_names, (g.data for g in grads))))
            state.check_finite()

        val_dice, val_f1 = _validate(state, val_set)
        selection = (val_f1 + val_dice) / 2.0
        history.append(selection)
        if selection > best_metric:
            best_metric = selection
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in state.params.items()}

        row = {"epoch": epoch}
        for k in ("L_total", "L_seg", "L_cls", "L_clin", "L_rlar"):
            row[k] = sums[k] / steps
        for pair in PAIR_COLUMNS:
            row[f"cos_{pair[0]}_{pair[1]}"] = cos_sums[pair] / steps
        row["val_dice"] = val_dice
        row["val_macro_f1"] = val_f1
        log_rows.append(row)

    return RunArtifacts(config=cfg, best_params=best_params, stats=stats,
                        class_weights=weights, log_rows=log_rows,
                        fold_of_case=fold_of_case, selection_history=history,
                        best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# persistence


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["rlar"]["tasks"] = list(cfg.rlar.tasks)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    rd = dict(d["rlar"])
    rd["tasks"] = tuple(rd["tasks"])
    rest = {k: v for k, v in d.items() if k != "rlar"}
    return TrainConfig(rlar=R.RlarConfig(**rd), **rest)


def save_run(run: RunArtifacts, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    arrays = dict(run.best_params)
    arrays["__feat_mean"] = run.stats.mean
    arrays["__feat_std"] = run.stats.std
    arrays["__class_weights"] = run.class_weights
    save_arrays(os.path.join(out_dir, "checkpoint.ckpt"), arrays)

    sidecar = {
        "config": config_to_dict(run.config),
        "class_weights": run.class_weights.tolist(),
        "feat_mean": run.stats.mean.tolist(),
        "feat_std": run.stats.std.tolist(),
        "selection_history": run.selection_history,
        "best_epoch": run.best_epoch,
        "fold_of_case": run.fold_of_case,
    }
    with open(os.path.join(out_dir, "run.json"), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)

    with open(os.path.join(out_dir, "train_log.csv"), "w") as f:
        f.write(LOG_HEADER + "\n")
        for row in log_rows_ordered(run.log_rows):
            f.write(",".join(repr(v) if isinstance(v, float) else str(v)
                             for v in row) + "\n")


def log_rows_ordered(rows: list[dict]) -> list[list]:
    cols = LOG_HEADER.split(",")
    return [[row[c] for c in cols] for row in rows]


def load_run(run_dir: str) -> tuple[M.ModelState, dict]:
    """Rehydrate a model from a run directory; returns (state, sidecar dict)."""
    ckpt_path = os.path.join(run_dir, "checkpoint.ckpt")
    if not os.path.isfile(ckpt_path):
        raise TrainError(f"missing checkpoint: {ckpt_path}")
    arrays = load_arrays(ckpt_path)
    with open(os.path.join(run_dir, "run.json")) as f:
        sidecar = json.load(f)
    params = {k: ad.Tensor(v, requires_grad=True)
              for k, v in arrays.items() if not k.startswith("__")}
    state = M.ModelState(params=params, feat_mean=arrays["__feat_mean"],
                         feat_std=arrays["__feat_std"])
    return state, sidecar


# ---------------------------------------------------------------------------
# evaluation and ablation


def evaluate(run_dir: str, samples: list[D.Sample], batch: int = 16) -> dict:
    """Metrics report for a saved run; classification consumes images only."""
    state, _ = load_run(run_dir)
    if not samples:
        raise TrainError("evaluation dataset is empty")
    dice, iou, hd = [], [], []
    preds, labels = [], []
    with ad.no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start:start + batch]
            imgs = np.stack([s.image for s in chunk])[:, None, :, :]
            out = M.forward(state, imgs)
            seg = out.seg.data > 0.5
            for i, s in enumerate(chunk):
                dice.append(MX.dice_binary(seg[i], s.mask))
                iou.append(MX.iou_binary(seg[i], s.mask))
                hd.append(MX.hd95(seg[i], s.mask))
            preds.extend(np.argmax(out.logits.data, axis=1).tolist())
            labels.extend(s.label for s in chunk)
    prf = MX.precision_recall_f1(np.array(labels), np.array(preds), M.NUM_CLASSES)
    return {
        "dice": float(np.mean(dice)),
        "iou": float(np.mean(iou)),
        "hd95": float(np.mean(hd)),
        "precision_macro": prf["precision_macro"],
        "recall_macro": prf["recall_macro"],
        "f1_macro": prf["f1_macro"],
        "per_class": prf["per_class"],
    }


def _classification_embeddings(state: M.ModelState, samples: list[D.Sample],
                               batch: int = 16) -> np.ndarray:
    hs = []
    with ad.no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start:start + batch]
            imgs = np.stack([s.image for s in chunk])[:, None, :, :]
            hs.append(M.forward(state, imgs).h.data)
    return np.concatenate(hs, axis=0)


def ablate_features(run_dir: str, samples: list[D.Sample]) -> list[dict]:
    """Leave-one-feature-out at inference: zero classifier column k, re-score.

    Returns one row per clinical feature with metric deltas vs the full model.
    """
    state, _ = load_run(run_dir)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    h = _classification_embeddings(state, samples)
    W = state.params["cls_W"].data
    b = state.params["cls_b"].data

    def score(weight_matrix):
        logits = h @ weight_matrix.T + b
        preds = np.argmax(logits, axis=1)
        return MX.precision_recall_f1(labels, preds, M.NUM_CLASSES)

    base = score(W)
    rows = []
    for k, name in enumerate(CANONICAL_FEATURES):
        Wk = W.copy()
        Wk[:, k] = 0.0
        res = score(Wk)
        rows.append({
            "feature": name,
            "delta_precision": res["precision_macro"] - base["precision_macro"],
            "delta_recall": res["recall_macro"] - base["recall_macro"],
            "delta_f1": res["f1_macro"] - base["f1_macro"],
        })
    return rows
