import numpy as np
import pytest

from tbdmnet.training import FeatureSet


def central_difference(f, arrays, h_scale=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. each array in ``arrays`` (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = h_scale * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def assert_grad_close(analytic, numeric, rtol, atol=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape
    err = np.abs(analytic - numeric)
    bound = np.maximum(rtol * np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    worst = np.max(err / bound) if err.size else 0.0
    assert np.all(err <= bound), f"max scaled error {worst:.3g} (rtol={rtol}, atol={atol})"


def synthetic_set(n=32, n_classes=4, channels=39, frames=64, seed=123, genders=None, name="synthetic"):
    """Class-dependent sinusoid on top of Gaussian noise; separable by design."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % n_classes
    t = np.arange(frames)
    X = rng.normal(0.0, 1.0, size=(n, channels, frames))
    X += 0.5 * np.sin(2 * np.pi * (y[:, None, None] + 1) * t[None, None, :] / frames)
    if genders is None:
        genders = ["M" if i % 4 < 2 else "F" for i in range(n)]
    labels = [f"emo{k}" for k in range(n_classes)]
    return FeatureSet([f"utt{i:03d}" for i in range(n)], X.astype(np.float32), y, labels, list(genders), name)


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion


_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    mark = getattr(report, "criterion", None)
    if mark is None:
        return
    number, text = mark
    failed = report.failed or (report.when == "call" and report.skipped)
    prev = _CRITERIA.get(number, (text, True))
    if report.when == "call" or failed:
        _CRITERIA[number] = (text, prev[1] and not failed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        text, ok = _CRITERIA[number]
        terminalreporter.write_line(f"AC{number:02d} {'PASS' if ok else 'FAIL'}  {text}")
