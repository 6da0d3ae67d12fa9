"""Gender-informed systems and single-delta ablations on top of cross-validation."""

from __future__ import annotations

import dataclasses
import logging
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .features import GENDER_ROWS, N_MFCC, binary_gender, inject_gender
from .metrics import MetricsReport
from .model import ModelConfig, predict_proba
from .training import FeatureSet, FoldPlan, TrainConfig, config_hash, crossval, kfold_split, map_folds, train

logger = logging.getLogger(__name__)

GENDER_SYSTEMS = (
    "baseline_full",
    "baseline_M_eval",
    "baseline_F_eval",
    "split_M",
    "split_F",
    "posthoc_golden",
    "posthoc_binary",
    "posthoc_probabilities",
    "prehoc_golden",
    "prehoc_binary",
    "prehoc_probabilities",
)

ABLATIONS = ("relu", "no_bd", "no_ms", "tabs5")


# ---------------------------------------------------------------------------
# ablations


def ablation_config(variant: str, config: ModelConfig) -> ModelConfig:
    """Apply exactly one architectural change to ``config``."""
    if variant == "relu":
        return dataclasses.replace(config, activation="relu")
    if variant == "no_bd":
        return dataclasses.replace(config, bidirectional=False)
    if variant == "no_ms":
        return dataclasses.replace(config, multiscale=False)
    if variant == "tabs5":
        return dataclasses.replace(config, n_tabs=config.n_tabs - 1, dilations=list(config.dilations[:-1]))
    raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")


def run_ablation(
    variant: str,
    fs: FeatureSet,
    config: ModelConfig,
    train_cfg: TrainConfig,
    plan: Optional[FoldPlan] = None,
    n_folds: int = 10,
    jobs: int = 1,
) -> MetricsReport:
    """Cross-validate the ablated model; returns the final-epoch report."""
    cfg = ablation_config(variant, config)
    plan = plan or kfold_split(fs.ids, n_folds, train_cfg.seed)
    _, final = crossval(fs, cfg, train_cfg, plan, jobs=jobs, tag=variant)
    return final


# ---------------------------------------------------------------------------
# gender fusion


def mix_posthoc(probs_m: np.ndarray, probs_f: np.ndarray, p_male, p_female=None) -> np.ndarray:
    """Row-wise ``p_M * probs_M + p_F * probs_F``; ``p_female`` defaults to ``1 - p_male``."""
    p_male = np.asarray(p_male, dtype=np.float64)
    p_female = 1.0 - p_male if p_female is None else np.asarray(p_female, dtype=np.float64)
    return p_male[:, None] * probs_m + p_female[:, None] * probs_f


def with_gender_rows(fs: FeatureSet, mode: str, sidecar: Optional[dict] = None) -> FeatureSet:
    """Return a copy of ``fs`` with gender rows appended to every utterance."""
    if fs.channels != N_MFCC:
        raise ConfigError(f"gender rows go after {N_MFCC} MFCC rows; features have {fs.channels} channels")
    if mode == "golden":
        unknown = [u for u, g in zip(fs.ids, fs.genders) if g not in ("M", "F")]
        if unknown:
            raise DataError(f"no golden gender for utterances: {', '.join(unknown)}")
        infos = list(fs.genders)
    else:
        ps = _sidecar_lookup(sidecar, fs.ids)
        infos = [binary_gender(p) for p in ps] if mode == "binary" else ps
    rows = [inject_gender(x, mode, info) for x, info in zip(fs.X, infos)]
    return dataclasses.replace(fs, X=np.stack(rows))


def _sidecar_lookup(sidecar: Optional[dict], ids: list) -> list:
    if sidecar is None:
        raise ConfigError("this gender system needs a gender sidecar file")
    missing = [u for u in ids if u not in sidecar]
    if missing:
        raise DataError(f"gender sidecar is missing {len(missing)} utterances: {', '.join(missing)}")
    return [sidecar[u] for u in ids]


def _posthoc_job(args):
    fs, config, train_cfg, plan, fold, kind, checkpoint = args
    tr = plan.train_indices(fs.ids, fold)
    te = plan.test_indices(fs.ids, fold)
    probs = {}
    for g in ("M", "F"):
        idx = np.array([i for i in tr if fs.genders[i] == g], dtype=np.int64)
        if idx.size == 0:
            raise DataError(f"fold {fold}: no {g} utterances to train the gender-dependent model")
        result = train(fs.subset(idx), config, train_cfg, seed=train_cfg.seed + fold)
        params = result.ckpt_final if checkpoint == "FINAL" else result.ckpt_bt
        probs[g] = predict_proba(params, config, fs.X[te], train_cfg.batch_size)
    return fold, te, probs


def _route_weights(kind: str, fs: FeatureSet, te: np.ndarray, sidecar) -> tuple[np.ndarray, np.ndarray]:
    """Weights on the male and female models for each test utterance."""
    ids = [fs.ids[i] for i in te]
    if kind == "posthoc_golden":
        unknown = [fs.ids[i] for i in te if fs.genders[i] not in ("M", "F")]
        if unknown:
            raise DataError(f"no golden gender for utterances: {', '.join(unknown)}")
        male = np.array([1.0 if fs.genders[i] == "M" else 0.0 for i in te])
        return male, 1.0 - male
    ps = _sidecar_lookup(sidecar, ids)
    if kind == "posthoc_binary":
        male = np.array([1.0 if binary_gender(p) == "M" else 0.0 for p in ps])
        return male, 1.0 - male
    return np.array([p[0] for p in ps]), np.array([p[1] for p in ps])


def run_gender_system(
    kind: str,
    fs: FeatureSet,
    sidecar: Optional[dict],
    config: ModelConfig,
    train_cfg: TrainConfig,
    n_folds: int = 10,
    plan: Optional[FoldPlan] = None,
    checkpoint: str = "FINAL",
    jobs: int = 1,
) -> MetricsReport:
    """Cross-validate one of the eleven gender-informed systems.

    ``baseline_*`` and ``posthoc_*`` use a fold plan over the whole set;
    ``split_*`` builds its own plan over one gender. ``prehoc_*`` expects the
    gender rows to be in ``fs`` already (see :func:`with_gender_rows`).
    """
    if kind not in GENDER_SYSTEMS:
        raise ConfigError(f"unknown gender system {kind!r}; expected one of {GENDER_SYSTEMS}")
    if checkpoint not in ("BT", "FINAL"):
        raise ConfigError(f"checkpoint must be BT or FINAL, got {checkpoint!r}")

    if kind.startswith("prehoc_"):
        mode = kind.split("_", 1)[1]
        want = N_MFCC + GENDER_ROWS[mode]
        if fs.channels != want:
            raise ConfigError(f"{kind} needs {want}-channel features with gender rows; features have {fs.channels} channels")
        if config.input_channels != want:
            raise ConfigError(f"{kind}: model input_channels is {config.input_channels}, features have {want}")
    elif config.input_channels != fs.channels:
        raise ConfigError(f"model expects {config.input_channels} channels, features have {fs.channels}")

    if kind.startswith("split_"):
        g = kind[-1]
        sub = fs.subset(fs.gender_indices(g))
        sub_plan = kfold_split(sub.ids, n_folds, train_cfg.seed)
        bt, final = crossval(sub, config, train_cfg, sub_plan, jobs=jobs, tag=kind)
        return final if checkpoint == "FINAL" else bt

    plan = plan or kfold_split(fs.ids, n_folds, train_cfg.seed)
    report = MetricsReport(fs.name, config_hash(config, train_cfg), checkpoint, tag=kind)

    if kind.startswith("posthoc_"):
        # validate routing information before spending time on training
        all_idx = np.arange(len(fs))
        _route_weights(kind, fs, all_idx, sidecar)
        args = [(fs, config, train_cfg, plan, f, kind, checkpoint) for f in range(plan.n_folds)]
        for fold, te, probs in map_folds(_posthoc_job, args, jobs):
            w_m, w_f = _route_weights(kind, fs, te, sidecar)
            mixed = mix_posthoc(probs["M"], probs["F"], w_m, w_f)
            report.add(fold, mixed.argmax(axis=1), fs.y[te], fs.n_classes)
        return report

    bt, final = crossval_eval_subsets(fs, config, train_cfg, plan, kind, jobs)
    return final if checkpoint == "FINAL" else bt


def crossval_eval_subsets(fs, config, train_cfg, plan, kind, jobs=1):
    """Cross-validation where scoring may be restricted to one gender of each test fold."""
    if kind in ("baseline_full",) or kind.startswith("prehoc_"):
        return crossval(fs, config, train_cfg, plan, jobs=jobs, tag=kind)
    gender = "M" if kind == "baseline_M_eval" else "F"
    digest = config_hash(config, train_cfg)
    reports = {k: MetricsReport(fs.name, digest, k, tag=kind) for k in ("BT", "FINAL")}

    def collect(fold, result):
        te = plan.test_indices(fs.ids, fold)
        te = np.array([i for i in te if fs.genders[i] == gender], dtype=np.int64)
        if te.size == 0:
            logger.warning("fold %d has no %s test utterances; skipped", fold, gender)
            return
        for k, params in (("BT", result.ckpt_bt), ("FINAL", result.ckpt_final)):
            preds = predict_proba(params, config, fs.X[te], train_cfg.batch_size).argmax(axis=1)
            reports[k].add(fold, preds, fs.y[te], fs.n_classes)

    crossval(fs, config, train_cfg, plan, jobs=jobs, on_fold=collect)
    return reports["BT"], reports["FINAL"]
