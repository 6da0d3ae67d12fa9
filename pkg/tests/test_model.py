import numpy as np
import pytest

from tbdmnet import autograd as ag
from tbdmnet import checkpoint
from tbdmnet.autograd import Tape, Tensor
from tbdmnet.errors import ConfigError, DataError
from tbdmnet.model import (
    Conv,
    ModelConfig,
    TabParams,
    build,
    directional_stack,
    forward,
    param_count,
    predict_proba,
    swap_directions,
    tab_forward,
    tab_param_count,
)

from conftest import assert_grad_close, central_difference


def small_config(**kw):
    base = dict(n_tabs=3, dilations=[1, 2, 4], filters=5, input_channels=6, n_classes=4)
    base.update(kw)
    return ModelConfig(**base)


def randomize_bn(params, rng):
    for tabs in (params.fwd, params.rev or []):
        for tab in tabs:
            for _, _, _, norm in tab.sublayers():
                if norm is not None:
                    norm.state.running_mean[...] = rng.normal(size=norm.state.running_mean.shape)
                    norm.state.running_var[...] = rng.uniform(0.5, 2.0, size=norm.state.running_var.shape)
                    norm.gamma.data[...] = rng.uniform(0.5, 1.5, size=norm.gamma.shape)
                    norm.beta.data[...] = rng.normal(size=norm.beta.shape)


# ---------------------------------------------------------------------------
# config and construction


def test_default_dense_widths():
    cfg = ModelConfig()
    assert cfg.tab_input_widths() == [39, 78, 117, 156, 195, 234]
    p = build(cfg, np.random.default_rng(0))
    assert [t.conv1.weight.shape[1] for t in p.fwd] == [39, 78, 117, 156, 195, 234]
    assert [t.conv1.weight.shape[1] for t in p.rev] == [39, 78, 117, 156, 195, 234]
    assert all(t.conv2.weight.shape == (39, 39, 2) for t in p.fwd)
    assert all(r.weight.shape == (39, 78, 1) for r in p.reduce)
    np.testing.assert_array_equal(p.fusion.data, np.full(6, 1 / 6, dtype=np.float32))
    assert p.fc_w.shape == (39, 7)


def test_unidirectional_has_no_reverse_path():
    cfg = ModelConfig(bidirectional=False)
    p = build(cfg, np.random.default_rng(0))
    assert p.rev is None
    assert all(r.weight.shape == (39, 39, 1) for r in p.reduce)
    assert not any(name.startswith("rev.") for name, _ in p.named_parameters())


def test_build_is_deterministic():
    a = build(ModelConfig(), np.random.default_rng(4))
    b = build(ModelConfig(), np.random.default_rng(4))
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()


def test_init_bounds():
    p = build(ModelConfig(), np.random.default_rng(1))
    w = p.fwd[2].conv1.weight.data
    assert np.abs(w).max() <= 1 / np.sqrt(117 * 2)


@pytest.mark.parametrize(
    "kw,match",
    [
        (dict(dilations=[1, 2, 4]), "length"),
        (dict(dilations=[1, 2, 2, 8, 16, 32]), "increasing"),
        (dict(filters=32), "39"),
        (dict(dropout_rate=1.0), "dropout"),
        (dict(activation="tanh"), "activation"),
        (dict(merge="avg"), "merge"),
    ],
)
def test_invalid_configs_rejected(kw, match):
    with pytest.raises(ConfigError, match=match):
        build(ModelConfig(**kw), np.random.default_rng(0))


def test_param_count_monotone_in_tabs():
    six = param_count(ModelConfig())
    five = param_count(ModelConfig(n_tabs=5, dilations=[1, 2, 4, 8, 16]))
    assert five < six


def test_bidirectional_doubles_tab_params():
    uni = ModelConfig(bidirectional=False)
    bi = ModelConfig()
    tabs = sum(tab_param_count(w, uni) for w in uni.tab_input_widths())

    def tab_total(cfg):
        p = build(cfg, np.random.default_rng(0))
        return sum(t.data.size for n, t in p.named_parameters() if n.startswith(("fwd.", "rev.")))

    assert tab_total(uni) == tabs
    assert tab_total(bi) == 2 * tabs


def test_param_count_matches_enumeration():
    rng = np.random.default_rng(99)
    for _ in range(20):
        K = int(rng.integers(1, 5))
        dil = sorted(rng.choice(np.arange(1, 20), size=K, replace=False).tolist())
        cfg = ModelConfig(
            n_tabs=K,
            dilations=dil,
            filters=int(rng.integers(1, 6)),
            kernel=int(rng.integers(1, 4)),
            activation=str(rng.choice(["gelu", "relu"])),
            bidirectional=bool(rng.integers(2)),
            multiscale=bool(rng.integers(2)),
            use_batch_norm=bool(rng.integers(2)),
            input_channels=int(rng.integers(1, 9)),
            n_classes=int(rng.integers(2, 8)),
            merge=str(rng.choice(["concat", "sum"])),
        )
        p = build(cfg, rng)
        assert param_count(cfg) == sum(t.data.size for t in p.parameters())


# ---------------------------------------------------------------------------
# TAB and stack


def test_zero_input_gives_zero_output():
    cfg = small_config(input_channels=5)
    p = build(cfg, np.random.default_rng(0), np.float64)
    tab = p.fwd[0]
    for _, conv, _, _ in tab.sublayers():
        conv.bias.data[:] = 0.0
    out = tab_forward(Tensor(np.zeros((2, 5, 9))), tab, 1, cfg)
    assert out.shape == (2, 5, 9)
    assert not out.data.any()


def test_tab_causality_and_determinism(rng):
    cfg = small_config()
    p = build(cfg, rng, np.float64)
    randomize_bn(p, rng)
    x = rng.normal(size=(1, 6, 20))
    base = tab_forward(Tensor(x), p.fwd[0], 4, cfg).data
    again = tab_forward(Tensor(x), p.fwd[0], 4, cfg).data
    assert base.tobytes() == again.tobytes()
    x2 = x.copy()
    x2[:, :, -1] += 10.0
    out = tab_forward(Tensor(x2), p.fwd[0], 4, cfg).data
    np.testing.assert_array_equal(out[:, :, :-1], base[:, :, :-1])
    assert not np.array_equal(out[:, :, -1], base[:, :, -1])


def test_stack_widths_and_single_tab(rng):
    cfg = small_config()
    p = build(cfg, rng, np.float64)
    ys = directional_stack(Tensor(rng.normal(size=(2, 6, 7))), p.fwd, cfg)
    assert [y.shape for y in ys] == [(2, 5, 7)] * 3

    one = small_config(n_tabs=1, dilations=[3])
    p1 = build(one, rng, np.float64)
    x = Tensor(rng.normal(size=(2, 6, 7)))
    (y,) = directional_stack(x, p1.fwd, one)
    np.testing.assert_array_equal(y.data, tab_forward(x, p1.fwd[0], 3, one).data)


def test_dense_stack_reduces_to_plain_stack(rng):
    cfg = small_config(n_tabs=2, dilations=[1, 2])
    p = build(cfg, rng, np.float64)
    randomize_bn(p, rng)
    C0 = cfg.input_channels
    # second TAB ignores the raw-input slice of its dense input
    p.fwd[1].conv1.weight.data[:, :C0, :] = 0.0
    x = Tensor(rng.normal(size=(3, C0, 12)))
    y1, y2 = directional_stack(x, p.fwd, cfg)

    narrow = TabParams(
        Conv(Tensor(p.fwd[1].conv1.weight.data[:, C0:, :].copy()), p.fwd[1].conv1.bias),
        p.fwd[1].conv2,
        p.fwd[1].bn1,
        p.fwd[1].bn2,
    )
    plain = tab_forward(tab_forward(x, p.fwd[0], 1, cfg), narrow, 2, cfg)
    np.testing.assert_allclose(y2.data, plain.data, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# full forward


def test_probs_sum_to_one(rng):
    cfg = ModelConfig()
    p = build(cfg, rng)
    logits, probs = forward(Tensor(rng.normal(size=(4, 39, 30)).astype(np.float32)), p, cfg)
    assert logits.shape == (4, 7)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_input_shape_checked(rng):
    cfg = small_config()
    p = build(cfg, rng)
    with pytest.raises(ConfigError, match="expects"):
        forward(Tensor(np.zeros((1, 7, 5), dtype=np.float32)), p, cfg)


def test_fusion_degeneracy(rng):
    cfg = small_config()
    p = build(cfg, rng, np.float64)
    randomize_bn(p, rng)
    p.fusion.data[:] = [0.0, 0.0, 1.0]
    x = Tensor(rng.normal(size=(3, 6, 11)))
    multi, _ = forward(x, p, cfg)
    last, _ = forward(x, p, small_config(multiscale=False))
    assert multi.data.tobytes() == last.data.tobytes()


def test_fusion_linearity(rng):
    cfg = small_config()
    p = build(cfg, rng, np.float64)
    randomize_bn(p, rng)
    x = Tensor(rng.normal(size=(3, 6, 11)))

    probe = p.copy()
    probe.fc_w.data = np.eye(cfg.filters)
    probe.fc_b.data = np.zeros(cfg.filters)
    g_df, _ = forward(x, probe, small_config(n_classes=cfg.filters))

    doubled = p.copy()
    doubled.fusion.data = 2 * p.fusion.data
    got, _ = forward(x, doubled, cfg)
    expected = ag.linear(Tensor(2 * g_df.data), p.fc_w, p.fc_b)
    assert got.data.tobytes() == expected.data.tobytes()


@pytest.mark.parametrize("seed", range(10))
def test_reversal_symmetry(seed):
    rng = np.random.default_rng(seed)
    cfg = small_config(activation=["gelu", "relu"][seed % 2], multiscale=seed % 3 != 0)
    p = build(cfg, rng, np.float64)
    randomize_bn(p, rng)
    x = rng.normal(size=(2, 6, 13))
    a, _ = forward(Tensor(x), p, cfg)
    b, _ = forward(Tensor(x[:, :, ::-1].copy()), swap_directions(p, cfg), cfg)
    np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-6)


def test_sum_merge_skips_reduction(rng):
    cfg = small_config(merge="sum")
    p = build(cfg, rng)
    assert p.reduce == []
    _, probs = forward(Tensor(rng.normal(size=(2, 6, 9)).astype(np.float32)), p, cfg)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_eval_forward_is_bitwise_deterministic(rng):
    cfg = ModelConfig()
    p = build(cfg, rng)
    X = rng.normal(size=(5, 39, 40)).astype(np.float32)
    assert predict_proba(p, cfg, X).tobytes() == predict_proba(p, cfg, X).tobytes()


def test_end_to_end_gradient():
    rng = np.random.default_rng(7)
    cfg = ModelConfig(n_tabs=2, dilations=[1, 2], filters=4, input_channels=4, n_classes=3, dropout_rate=0.0)
    with ag.precision(np.float64):
        p = build(cfg, rng, np.float64)
        x = Tensor(rng.normal(size=(3, 4, 16)))
        labels = np.array([0, 2, 1])

        def loss_value():
            logits, _ = forward(x, p, cfg, "train")
            return float(ag.softmax_cross_entropy(logits, labels)[0].data)

        with Tape() as tape:
            logits, _ = forward(x, p, cfg, "train")
            loss, _ = ag.softmax_cross_entropy(logits, labels)
        tape.backward(loss)
        named = p.named_parameters()
        analytic = [t.grad for _, t in named]
        numeric = central_difference(loss_value, [t.data for _, t in named])
    for (name, _), a, n in zip(named, analytic, numeric):
        assert a is not None, name
        assert_grad_close(a, n, rtol=1e-4, atol=1e-9)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(rng):
    cfg = ModelConfig(n_classes=4)
    p = build(cfg, rng)
    randomize_bn(p, rng)
    p = p.as_dtype(np.float32)
    blob = checkpoint.dumps(p, cfg, ["a", "b", "c", "d"], {"epoch": 3})
    q, cfg2, labels, meta = checkpoint.loads(blob)
    assert cfg2 == cfg and labels == ["a", "b", "c", "d"] and meta == {"epoch": 3}
    for (n1, a1), (n2, a2) in zip(p.state_arrays(), q.state_arrays()):
        assert n1 == n2 and a1.tobytes() == a2.tobytes()
    X = rng.normal(size=(100, 39, 24)).astype(np.float32)
    assert predict_proba(p, cfg, X).tobytes() == predict_proba(q, cfg2, X).tobytes()
    assert checkpoint.dumps(q, cfg2, labels, meta) == blob


def test_checkpoint_file_round_trip(tmp_path, rng):
    cfg = small_config()
    p = build(cfg, rng)
    path = checkpoint.save(tmp_path / "m.ckpt", p, cfg, list("wxyz"))
    q, _, _, _ = checkpoint.load(path)
    assert q.fc_w.data.tobytes() == p.fc_w.data.tobytes()


def test_checkpoint_corruption_rejected(rng):
    cfg = small_config()
    blob = checkpoint.dumps(build(cfg, rng), cfg, list("wxyz"))
    with pytest.raises(DataError, match="NUL"):
        checkpoint.loads(blob[: blob.index(b"\x00")])
    with pytest.raises(DataError, match="past the end"):
        checkpoint.loads(blob[:-8])
    with pytest.raises(DataError, match="version"):
        checkpoint.loads(blob.replace(b'"format_version":1', b'"format_version":9'))
    with pytest.raises(DataError, match="label set"):
        checkpoint.loads(checkpoint.dumps(build(cfg, rng), cfg, ["only"]))
