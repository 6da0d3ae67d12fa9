"""Adam training with best-train-WAR / final checkpoints, k-fold cross-validation."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .errors import ConfigError, DataError, NumericError
from .metrics import MetricsReport
from .model import ModelConfig, ModelParams, build, forward, predict_proba

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-3
    beta1: float = 0.93
    beta2: float = 0.98
    eps: float = 1e-8
    batch_size: int = 64
    seed: int = 0
    shuffle_each_epoch: bool = True

    def validate(self) -> "TrainConfig":
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in (0, 1), got ({self.beta1}, {self.beta2})")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# data


@dataclass
class FeatureSet:
    """Fixed-size features for a corpus: ``X`` is [N, C, T], ``y`` class indices."""

    ids: list
    X: np.ndarray
    y: np.ndarray
    label_set: list
    genders: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if not self.genders:
            self.genders = ["?"] * len(self.ids)
        if not (len(self.ids) == len(self.X) == len(self.y) == len(self.genders)):
            raise DataError("ids, X, y and genders must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_classes(self) -> int:
        return len(self.label_set)

    @property
    def channels(self) -> int:
        return self.X.shape[1]

    @property
    def frames(self) -> int:
        return self.X.shape[2]

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet(
            [self.ids[i] for i in idx],
            self.X[idx],
            self.y[idx],
            self.label_set,
            [self.genders[i] for i in idx],
            self.name,
        )

    def gender_indices(self, gender: str) -> np.ndarray:
        return np.array([i for i, g in enumerate(self.genders) if g == gender], dtype=np.int64)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list, state: AdamState, cfg: TrainConfig, t: int, names=None) -> None:
    """One bias-corrected Adam update in place; ``t`` counts from 1."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise NumericError(f"non-finite gradient for parameter {label}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data -= step.astype(p.data.dtype, copy=False)
    state.t = t


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    ckpt_bt: ModelParams
    ckpt_final: ModelParams
    best_epoch: int
    history: list  # [{"epoch", "loss", "war"}]


def accuracy(params: ModelParams, config: ModelConfig, X: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
    preds = predict_proba(params, config, X, batch_size).argmax(axis=1)
    return 100.0 * float(np.mean(preds == y))


def train(
    train_set: FeatureSet,
    config: ModelConfig,
    train_cfg: TrainConfig,
    seed: Optional[int] = None,
    dtype=np.float32,
) -> TrainResult:
    """Run every epoch; keep the best-train-WAR parameters (earliest on ties) and the last ones.

    One generator drives everything: weight init first, then per epoch the
    shuffle permutation followed by dropout masks in forward order.
    """
    config.validate()
    train_cfg.validate()
    if len(train_set) == 0:
        raise DataError("training set is empty")
    if train_set.channels != config.input_channels:
        raise ConfigError(f"features have {train_set.channels} channels, model expects {config.input_channels}")

    rng = np.random.default_rng(train_cfg.seed if seed is None else seed)
    params = build(config, rng, dtype=dtype)
    named = params.named_parameters()
    names = [n for n, _ in named]
    plist = [t for _, t in named]
    state = AdamState.zeros_like(plist)

    X = train_set.X.astype(dtype, copy=False)
    y = train_set.y
    N = len(y)
    bs = train_cfg.batch_size

    best_war, best_epoch, ckpt_bt = -1.0, 0, None
    history = []
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(N) if train_cfg.shuffle_each_epoch else np.arange(N)
        total = 0.0
        for b, start in enumerate(range(0, N, bs)):
            idx = order[start : start + bs]
            params.zero_grad()
            with Tape() as tape:
                logits, _ = forward(Tensor(X[idx], dtype=dtype), params, config, "train", rng)
                loss, _ = ag.softmax_cross_entropy(logits, y[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            tape.backward(loss)
            step += 1
            adam_step(plist, [p.grad for p in plist], state, train_cfg, step, names)
            total += value * len(idx)

        war = accuracy(params, config, X, y, bs)
        history.append({"epoch": epoch, "loss": total / N, "war": war})
        if war > best_war:
            best_war, best_epoch, ckpt_bt = war, epoch, params.copy()
        logger.debug("epoch %d loss %.5f train WAR %.2f", epoch, total / N, war)

    return TrainResult(ckpt_bt, params, best_epoch, history)


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    n_folds: int
    assignment: dict  # utterance_id -> fold index
    seed: int

    def test_indices(self, ids: list, fold: int) -> np.ndarray:
        return np.array([i for i, u in enumerate(ids) if self.assignment[u] == fold], dtype=np.int64)

    def train_indices(self, ids: list, fold: int) -> np.ndarray:
        return np.array([i for i, u in enumerate(ids) if self.assignment[u] != fold], dtype=np.int64)

    def sizes(self) -> list[int]:
        counts = [0] * self.n_folds
        for f in self.assignment.values():
            counts[f] += 1
        return counts


def kfold_split(ids: list, n_folds: int = 10, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, then round-robin fold assignment; no stratification."""
    if n_folds < 2:
        raise ConfigError(f"need at least 2 folds, got {n_folds}")
    if len(ids) < n_folds:
        raise DataError(f"{len(ids)} utterances cannot fill {n_folds} folds")
    if len(set(ids)) != len(ids):
        raise DataError("utterance ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    assignment = {ids[j]: pos % n_folds for pos, j in enumerate(order)}
    return FoldPlan(n_folds, assignment, seed)


def _fold_job(args):
    fs, config, train_cfg, plan, fold = args
    tr = plan.train_indices(fs.ids, fold)
    te = plan.test_indices(fs.ids, fold)
    result = train(fs.subset(tr), config, train_cfg, seed=train_cfg.seed + fold)
    out = {}
    for kind, params in (("BT", result.ckpt_bt), ("FINAL", result.ckpt_final)):
        probs = predict_proba(params, config, fs.X[te], train_cfg.batch_size)
        out[kind] = probs.argmax(axis=1)
    return fold, te, out, result


def map_folds(fn, jobs_args: list, jobs: int = 1) -> list:
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, jobs_args))


def crossval(
    fs: FeatureSet,
    config: ModelConfig,
    train_cfg: TrainConfig,
    plan: FoldPlan,
    jobs: int = 1,
    tag: str = "",
    on_fold=None,
) -> tuple[MetricsReport, MetricsReport]:
    """Train once per fold and score both checkpoints on the held-out fold.

    Fold ``f`` initialises from seed ``train_cfg.seed + f``. ``on_fold(fold,
    result)`` is called with each :class:`TrainResult` in fold order.
    """
    digest = config_hash(config, train_cfg)
    reports = {k: MetricsReport(fs.name, digest, k, tag=tag) for k in ("BT", "FINAL")}
    args = [(fs, config, train_cfg, plan, f) for f in range(plan.n_folds)]
    for fold, te, preds, result in map_folds(_fold_job, args, jobs):
        for kind in ("BT", "FINAL"):
            reports[kind].add(fold, preds[kind], fs.y[te], fs.n_classes)
        if on_fold is not None:
            on_fold(fold, result)
    return reports["BT"], reports["FINAL"]
