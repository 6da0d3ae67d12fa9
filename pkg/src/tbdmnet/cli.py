"""``tbdm`` command line: extract, train, crossval, evaluate, ablate, gender, predict."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, reference
from .config import KEY_SECTION, RunConfig, load_run_config
from .errors import ConfigError, DataError, TBDMError
from .experiments import ABLATIONS, GENDER_SYSTEMS, run_ablation, run_gender_system
from .features import (
    GENDER_MODES,
    N_MFCC,
    feature_path,
    load_audio,
    read_features,
    read_manifest,
    read_sidecar,
    utterance_features,
    extract_manifest,
)
from .metrics import CSV_HEADER, MetricsReport, format_table
from .model import predict_proba
from .training import FeatureSet, crossval, kfold_split, train

log = logging.getLogger("tbdmnet")


# ---------------------------------------------------------------------------
# helpers


def load_feature_set(manifest_path: Path, features_dir: Path, name: str = "") -> FeatureSet:
    manifest = read_manifest(manifest_path)
    if not manifest.rows:
        raise DataError(f"{manifest_path}: manifest is empty")
    missing = [s.utterance_id for s in manifest.rows if not feature_path(features_dir, s.utterance_id).exists()]
    if missing:
        raise DataError(f"no feature files in {features_dir} for: {', '.join(missing)}")
    grids = [read_features(feature_path(features_dir, s.utterance_id)).values for s in manifest.rows]
    shapes = {g.shape for g in grids}
    if len(shapes) != 1:
        raise DataError(f"feature files in {features_dir} have differing shapes {sorted(shapes)}")
    index = {lab: i for i, lab in enumerate(manifest.label_set)}
    return FeatureSet(
        ids=[s.utterance_id for s in manifest.rows],
        X=np.stack(grids),
        y=[index[s.emotion_label] for s in manifest.rows],
        label_set=manifest.label_set,
        genders=[s.gender for s in manifest.rows],
        name=name or manifest_path.stem,
    )


def _dataset(rc: RunConfig) -> FeatureSet:
    manifest = rc.path("manifest")
    features = rc.path("features")
    return load_feature_set(manifest, features, rc.get("dataset") or "")


def _output(rc: RunConfig) -> Path:
    out = rc.path("output", must_exist=False)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_reports(out: Path, stem: str, reports: list[MetricsReport]) -> None:
    for r in reports:
        (out / f"{stem}_{r.checkpoint_kind}.json").write_text(r.to_json(), encoding="utf-8")
    lines = [CSV_HEADER] + [r.csv_line() for r in reports]
    (out / f"{stem}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _print_table(reports: list[MetricsReport]) -> None:
    print(format_table(reports))
    for r in reports:
        ref = reference.lookup(r.dataset, r.checkpoint_kind, r.tag)
        if ref is not None:
            print(f"  published {r.tag or 'TBDM-Net'} ({r.checkpoint_kind}): UAR {ref[0]:.2f}  WAR {ref[1]:.2f}  F1 {ref[2]:.2f}")


def _save_ckpt(path: Path, params, config, fs: FeatureSet, meta: dict) -> None:
    meta = {"frames": fs.frames, "dataset": fs.name, **meta}
    checkpoint.save(path, params, config, fs.label_set, meta)


# ---------------------------------------------------------------------------
# commands


def cmd_extract(rc: RunConfig, args) -> int:
    mode = rc.get("gender_mode", "none")
    if mode not in GENDER_MODES:
        raise ConfigError(f"unknown gender mode {mode!r}")
    sidecar = None
    if mode in ("binary", "probabilities"):
        sidecar = read_sidecar(rc.path("sidecar"))
    manifest = read_manifest(rc.path("manifest"))
    out = rc.path("features", must_exist=False)
    if not manifest.rows:
        log.warning("manifest is empty; nothing to extract")
        out.mkdir(parents=True, exist_ok=True)
        return 0
    result = extract_manifest(manifest, out, rc.get("frames"), mode, sidecar, rc.get("dataset") or "")
    (out / "extract_log.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {result['written']} feature files ({result['channels']} x {result['frames']}) to {out}")
    for uid, msg in result["failed"].items():
        print(f"failed {uid}: {msg}", file=sys.stderr)
    return DataError.exit_code if result["failed"] else 0


def cmd_train(rc: RunConfig, args) -> int:
    fs = _dataset(rc)
    cfg = rc.model_config(fs.channels, fs.n_classes)
    tcfg = rc.train_config()
    out = _output(rc)
    result = train(fs, cfg, tcfg)
    _save_ckpt(out / "model_BT.ckpt", result.ckpt_bt, cfg, fs, {"kind": "BT", "epoch": result.best_epoch})
    _save_ckpt(out / "model_FINAL.ckpt", result.ckpt_final, cfg, fs, {"kind": "FINAL", "epoch": tcfg.epochs})
    (out / "history.json").write_text(json.dumps(result.history, indent=1) + "\n", encoding="utf-8")
    last = result.history[-1]
    print(f"trained {tcfg.epochs} epochs: final loss {last['loss']:.4f}, train WAR {last['war']:.2f}; best epoch {result.best_epoch}")
    return 0


def cmd_crossval(rc: RunConfig, args) -> int:
    fs = _dataset(rc)
    cfg = rc.model_config(fs.channels, fs.n_classes)
    tcfg = rc.train_config()
    out = _output(rc)
    plan = kfold_split(fs.ids, rc.get("folds", 10), tcfg.seed)

    def save(fold, result):
        _save_ckpt(out / f"fold{fold}_BT.ckpt", result.ckpt_bt, cfg, fs, {"kind": "BT", "fold": fold, "epoch": result.best_epoch})
        _save_ckpt(out / f"fold{fold}_FINAL.ckpt", result.ckpt_final, cfg, fs, {"kind": "FINAL", "fold": fold, "epoch": tcfg.epochs})

    bt, final = crossval(fs, cfg, tcfg, plan, jobs=rc.get("jobs", 1), on_fold=save)
    _write_reports(out, "crossval", [bt, final])
    _print_table([bt, final])
    return 0


def cmd_evaluate(rc: RunConfig, args) -> int:
    if not args.checkpoint:
        raise ConfigError("evaluate needs --checkpoint")
    params, cfg, label_set, meta = checkpoint.load(args.checkpoint)
    fs = _dataset(rc)
    if fs.channels != cfg.input_channels:
        raise ConfigError(f"checkpoint expects {cfg.input_channels} channels, features have {fs.channels}")
    if list(fs.label_set) != list(label_set):
        unknown = sorted(set(fs.label_set) - set(label_set))
        if unknown:
            raise DataError(f"labels {unknown} are not in the checkpoint label set {label_set}")
        remap = {lab: i for i, lab in enumerate(label_set)}
        fs.y = np.array([remap[fs.label_set[i]] for i in fs.y])
        fs.label_set = list(label_set)
    preds = predict_proba(params, cfg, fs.X).argmax(axis=1)
    report = MetricsReport(fs.name, cfg.digest(), meta.get("kind", "FINAL"), tag="evaluate")
    report.add(0, preds, fs.y, len(label_set))
    out = _output(rc)
    _write_reports(out, "evaluate", [report])
    _print_table([report])
    return 0


def cmd_ablate(rc: RunConfig, args) -> int:
    fs = _dataset(rc)
    cfg = rc.model_config(fs.channels, fs.n_classes)
    tcfg = rc.train_config()
    out = _output(rc)
    report = run_ablation(args.variant, fs, cfg, tcfg, n_folds=rc.get("folds", 10), jobs=rc.get("jobs", 1))
    _write_reports(out, f"ablate_{args.variant}", [report])
    _print_table([report])
    return 0


def cmd_gender(rc: RunConfig, args) -> int:
    fs = _dataset(rc)
    kind = args.system
    if kind.startswith("prehoc_"):
        want = N_MFCC + (2 if kind.endswith("probabilities") else 1)
        if fs.channels != want:
            raise ConfigError(
                f"{kind} needs features extracted with gender rows ({want} channels); "
                f"features in {rc.get('features')} have {fs.channels} channels"
            )
    sidecar = None
    if kind in ("posthoc_binary", "posthoc_probabilities"):
        sidecar = read_sidecar(rc.path("sidecar"))
    cfg = rc.model_config(fs.channels, fs.n_classes)
    tcfg = rc.train_config()
    out = _output(rc)
    report = run_gender_system(kind, fs, sidecar, cfg, tcfg, n_folds=rc.get("folds", 10), jobs=rc.get("jobs", 1))
    _write_reports(out, f"gender_{kind}", [report])
    _print_table([report])
    return 0


def predict_file(ckpt_path, input_path) -> dict:
    params, cfg, label_set, meta = checkpoint.load(ckpt_path)
    input_path = Path(input_path)
    if input_path.suffix.lower() == ".wav":
        frames = meta.get("frames")
        if not frames:
            raise DataError(f"{ckpt_path}: checkpoint does not record its frame count; predict on a feature file instead")
        if cfg.input_channels != N_MFCC:
            raise ConfigError(
                f"checkpoint expects {cfg.input_channels} channels (gender rows); predict on a feature file that carries them"
            )
        samples, _ = load_audio(input_path)
        grid = utterance_features(samples, int(frames))
    else:
        grid = read_features(input_path).values
    if grid.shape[0] != cfg.input_channels:
        raise ConfigError(f"input has {grid.shape[0]} channels, checkpoint expects {cfg.input_channels}")
    probs = predict_proba(params, cfg, grid[None])[0]
    order = np.argsort(-probs, kind="stable")
    return {"label": label_set[order[0]], "probs": {label_set[i]: float(probs[i]) for i in order}}


def cmd_predict(rc: RunConfig, args) -> int:
    if not args.checkpoint:
        raise ConfigError("predict needs --checkpoint")
    print(json.dumps(predict_file(args.checkpoint, args.input), indent=2))
    return 0


COMMANDS = {
    "extract": cmd_extract,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gender": cmd_gender,
    "predict": cmd_predict,
}


# ---------------------------------------------------------------------------
# argument parsing


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="run configuration file")
    parser.add_argument("-v", "--verbose", action="store_true")
    for key in KEY_SECTION:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=f"opt_{key}", metavar=key.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tbdm", description="TBDM-Net speech emotion recognition")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="audio -> fixed-size MFCC feature files")
    _common(p)
    p.add_argument("--gender-file", dest="opt_sidecar", metavar="CSV", help="gender sidecar (alias of --sidecar)")

    for name, text in (("train", "train on the whole dataset"), ("crossval", "k-fold cross-validation")):
        _common(sub.add_parser(name, help=text))

    p = sub.add_parser("evaluate", help="score a checkpoint on a feature set")
    _common(p)
    p.add_argument("--checkpoint")

    p = sub.add_parser("ablate", help="cross-validate one ablation variant")
    _common(p)
    p.add_argument("--variant", required=True, choices=ABLATIONS)

    p = sub.add_parser("gender", help="cross-validate a gender-informed system")
    _common(p)
    p.add_argument("--system", required=True, choices=GENDER_SYSTEMS)
    p.add_argument("--gender-file", dest="opt_sidecar", metavar="CSV", help="gender sidecar (alias of --sidecar)")

    p = sub.add_parser("predict", help="classify one WAV or feature file")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("input")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")

    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("opt_")}
    try:
        rc = load_run_config(args.config, overrides)
        if args.command == "extract":
            mode = rc.get("gender_mode", "none")
            if mode in ("binary", "probabilities") and rc.get("sidecar") is None:
                parser.error(f"--gender-mode {mode} requires --gender-file")
        return COMMANDS[args.command](rc, args)
    except TBDMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
