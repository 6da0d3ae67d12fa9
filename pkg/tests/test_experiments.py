import numpy as np
import pytest

from tbdmnet.errors import ConfigError, DataError
from tbdmnet.experiments import (
    ABLATIONS,
    GENDER_SYSTEMS,
    ablation_config,
    mix_posthoc,
    run_ablation,
    run_gender_system,
    with_gender_rows,
)
from tbdmnet.model import ModelConfig, build, param_count
from tbdmnet.training import TrainConfig, kfold_split

from conftest import synthetic_set


def random_probs(rng, n, k):
    p = rng.uniform(size=(n, k))
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# post-hoc mixing


def test_degenerate_mixture_equals_hard_routing():
    rng = np.random.default_rng(0)
    pm, pf = random_probs(rng, 50, 7), random_probs(rng, 50, 7)
    male = rng.integers(0, 2, 50).astype(float)
    mixed = mix_posthoc(pm, pf, male, 1.0 - male)
    routed = np.where(male[:, None] == 1.0, pm, pf)
    assert mixed.tobytes() == routed.tobytes()
    np.testing.assert_array_equal(mix_posthoc(pm, pf, np.ones(50), np.zeros(50)).argmax(1), pm.argmax(1))
    np.testing.assert_array_equal(mix_posthoc(pm, pf, np.zeros(50), np.ones(50)).argmax(1), pf.argmax(1))


def test_mixture_rows_sum_to_one_and_commute_with_batching():
    rng = np.random.default_rng(1)
    pm, pf = random_probs(rng, 40, 5), random_probs(rng, 40, 5)
    w = rng.uniform(size=40)
    batched = mix_posthoc(pm, pf, w)
    np.testing.assert_allclose(batched.sum(axis=1), 1.0, atol=1e-6)
    single = np.concatenate([mix_posthoc(pm[i : i + 1], pf[i : i + 1], w[i : i + 1]) for i in range(40)])
    assert single.tobytes() == batched.tobytes()


# ---------------------------------------------------------------------------
# pre-hoc injection


@pytest.mark.parametrize("mode,channels", [("golden", 40), ("binary", 40), ("probabilities", 41)])
def test_prehoc_channel_counts(mode, channels):
    fs = synthetic_set(n=8, frames=10)
    side = {u: (0.8, 0.2) if g == "M" else (0.1, 0.9) for u, g in zip(fs.ids, fs.genders)}
    out = with_gender_rows(fs, mode, side)
    assert out.channels == channels
    assert out.X[:, :39].tobytes() == fs.X.tobytes()
    female = np.array([g == "F" for g in fs.genders])
    if mode == "probabilities":
        np.testing.assert_array_equal(out.X[female, 40], np.float32(0.9))
    else:
        np.testing.assert_array_equal(out.X[female, 39], 1.0)
        np.testing.assert_array_equal(out.X[~female, 39], 0.0)


def test_prehoc_missing_sidecar_entries_listed():
    fs = synthetic_set(n=4, frames=8)
    with pytest.raises(DataError, match="utt002, utt003"):
        with_gender_rows(fs, "probabilities", {"utt000": (1, 0), "utt001": (0, 1)})


def test_prehoc_needs_injected_features():
    fs = synthetic_set(n=20, frames=8)
    with pytest.raises(ConfigError, match="39 channels"):
        run_gender_system("prehoc_probabilities", fs, None, ModelConfig(n_classes=4), TrainConfig(epochs=1))


# ---------------------------------------------------------------------------
# system runs (tiny models, one epoch)


def tiny(channels=39):
    return ModelConfig(n_tabs=2, dilations=[1, 2], input_channels=channels, n_classes=4)


def test_every_gender_system_runs():
    fs = synthetic_set(n=40, frames=8)
    side = {u: (0.7, 0.3) if g == "M" else (0.2, 0.8) for u, g in zip(fs.ids, fs.genders)}
    tc = TrainConfig(epochs=1, batch_size=16)
    for kind in GENDER_SYSTEMS:
        data, cfg = fs, tiny()
        if kind.startswith("prehoc_"):
            data = with_gender_rows(fs, kind.split("_", 1)[1], side)
            cfg = tiny(data.channels)
        report = run_gender_system(kind, data, side, cfg, tc, n_folds=4)
        assert report.tag == kind
        assert report.checkpoint_kind == "FINAL"
        assert len(report.folds) == 4
        assert 0.0 <= report.mean["uar"] <= 100.0


def test_posthoc_degenerate_probabilities_match_golden_routing():
    fs = synthetic_set(n=24, frames=8)
    hard = {u: (1.0, 0.0) if g == "M" else (0.0, 1.0) for u, g in zip(fs.ids, fs.genders)}
    tc = TrainConfig(epochs=1, batch_size=16)
    plan = kfold_split(fs.ids, 4, 0)
    a = run_gender_system("posthoc_probabilities", fs, hard, tiny(), tc, plan=plan)
    b = run_gender_system("posthoc_golden", fs, None, tiny(), tc, plan=plan)
    for fa, fb in zip(a.folds, b.folds):
        np.testing.assert_array_equal(fa.confusion, fb.confusion)


def test_gender_system_errors():
    fs = synthetic_set(n=20, frames=8)
    with pytest.raises(ConfigError, match="unknown gender system"):
        run_gender_system("posthoc_magic", fs, None, tiny(), TrainConfig(epochs=1))
    with pytest.raises(DataError, match="missing"):
        run_gender_system("posthoc_binary", fs, {"utt000": (1.0, 0.0)}, tiny(), TrainConfig(epochs=1))


# ---------------------------------------------------------------------------
# ablations


def test_ablation_configs_change_one_thing():
    base = ModelConfig()
    expected = {
        "relu": {"activation": "relu"},
        "no_bd": {"bidirectional": False},
        "no_ms": {"multiscale": False},
        "tabs5": {"n_tabs": 5, "dilations": [1, 2, 4, 8, 16]},
    }
    for variant in ABLATIONS:
        cfg = ablation_config(variant, base).to_dict()
        diff = {k: v for k, v in cfg.items() if v != base.to_dict()[k]}
        assert diff == expected[variant]
    with pytest.raises(ConfigError, match="unknown ablation"):
        ablation_config("no_dense", base)


def test_ablation_param_counts():
    base = ModelConfig()
    full = param_count(base)
    assert param_count(ablation_config("tabs5", base)) < full
    assert param_count(ablation_config("relu", base)) == full

    p = build(base, np.random.default_rng(0))
    rev = sum(t.data.size for n, t in p.named_parameters() if n.startswith("rev."))
    reduce_full = sum(t.data.size for n, t in p.named_parameters() if n.startswith("reduce."))
    q = build(ablation_config("no_bd", base), np.random.default_rng(0))
    reduce_uni = sum(t.data.size for n, t in q.named_parameters() if n.startswith("reduce."))
    assert full - param_count(ablation_config("no_bd", base)) == rev + reduce_full - reduce_uni


def test_run_ablation_tags_report():
    fs = synthetic_set(n=20, frames=8)
    report = run_ablation("no_bd", fs, tiny(), TrainConfig(epochs=1), n_folds=4)
    assert report.tag == "no_bd" and report.checkpoint_kind == "FINAL"
    assert len(report.folds) == 4
