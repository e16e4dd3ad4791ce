import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.datasets import make_moons

from crashkit.annotation import CrashType, ObjectLabel
from crashkit.conditioning import ConditionSet, MaskPlan, apply_mask
from crashkit.diffusion import (
    GaussianMixtureDenoiser, GuidanceSchedule, MLPDenoiser, SamplerConfig, cfg_multi, cfg_single,
    ddim_step, ddim_timesteps, diffusion_loss, forward_noise, guidance_at_step, make_schedule, sample,
    train_toy_denoiser,
)
from crashkit.diffusion.mlp import condition_arrays, loss_and_grad
from crashkit.diffusion.sampler import run_manifest, trajectory_csv
from crashkit.diffusion.schedule import DiffusionSchedule, noise_with


def cond_for(ct=CrashType.EGO_VEHICLE, boxes=None):
    return ConditionSet.full("img", boxes or [()] * 25, ct)


def moons(n=4000, seed=0):
    X, y = make_moons(n, noise=0.05, random_state=seed)
    return (X - X.mean(0)) / X.std(0), y


# --- oracle ------------------------------------------------------------------

def gaussian_posterior_trace(a, cov):
    """tr Cov(eps | x_t) for Gaussian data: eps and x_t are jointly Gaussian."""
    d = cov.shape[0]
    A = a * cov + (1 - a) * np.eye(d)  # Cov(x_t)
    c = np.sqrt(1 - a) * np.eye(d)     # Cov(eps, x_t)
    return float(np.trace(np.eye(d) - c @ np.linalg.solve(A, c.T)))


# --- schedules -------------------------------------------------------------------

def test_schedule_single_step():
    assert make_schedule("linear", 1, 0.5, 0.5).alpha_bar.tolist() == [0.5]


def test_schedule_default():
    s = make_schedule()
    ab = s.alpha_bar
    assert np.all(np.diff(ab) < 0)
    direct = np.prod(1 - np.linspace(1e-4, 0.02, 1000))
    assert ab[-1] == pytest.approx(direct, rel=1e-12)
    assert ab[-1] < 1e-4 and ab[0] == pytest.approx(1 - 1e-4)


def test_schedule_constant_beta():
    s = make_schedule("linear", 50, 0.03, 0.03)
    assert np.allclose(s.alpha_bar, 0.97 ** np.arange(1, 51), rtol=1e-12)


def test_schedule_cosine():
    s = make_schedule("cosine", 1000)
    assert np.all(np.diff(s.alpha_bar) < 0) and s.alpha_bar[-1] < 1e-4


@pytest.mark.parametrize("kw", [dict(beta_lo=0), dict(beta_lo=0.5, beta_hi=0.1), dict(T=0), dict(kind="sigmoid")])
def test_schedule_errors(kw):
    with pytest.raises(ValueError):
        make_schedule(**kw)


def test_schedule_at():
    s = make_schedule("linear", 10)
    assert s.at(0) == 1.0 and s.at(10) == s.alpha_bar[-1]
    with pytest.raises(IndexError):
        s.at(11)
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.5, 0.6]))


# --- forward process and loss ----------------------------------------------------

def test_noise_extremes():
    x0, eps = np.array([1.0, -2.0]), np.array([0.3, 0.4])
    assert np.array_equal(noise_with(x0, eps, 1.0), x0)
    assert np.array_equal(noise_with(x0, eps, 0.0), eps)


def test_forward_errors():
    s = make_schedule("linear", 10)
    with pytest.raises(ValueError):
        forward_noise(np.zeros(3), 1, np.zeros(2), s)
    with pytest.raises(ValueError):
        forward_noise(np.zeros(3), 0, np.zeros(3), s)
    with pytest.raises(ValueError):
        forward_noise(np.zeros(3), 11, np.zeros(3), s)


def test_forward_variance_preserved():
    s = make_schedule()
    rng = np.random.default_rng(0)
    n = 100_000
    x0 = rng.standard_normal(n)
    se = np.sqrt(2.0 / n)  # std of a sample variance of unit-variance data
    for t in (1, 10, 100, 500, 1000):
        xt = forward_noise(x0, t, rng.standard_normal(n), s).x_t
        assert abs(xt.var() - 1.0) < 3 * se * 1.5


def test_forward_per_row_t():
    s = make_schedule("linear", 10)
    x0 = np.ones((3, 2))
    out = forward_noise(x0, np.array([1, 5, 10]), np.zeros((3, 2)), s).x_t
    assert np.allclose(out[:, 0], np.sqrt(s.alpha_bar[[0, 4, 9]]))


class Oracle:
    def __init__(self, eps):
        self.eps = eps

    def predict(self, x, t, cond):
        return self.eps


class Zero:
    def predict(self, x, t, cond):
        return np.zeros_like(x)


def test_loss_exact_and_zero():
    s = make_schedule()
    rng = np.random.default_rng(1)
    x0, eps = rng.standard_normal((500, 3)), rng.standard_normal((500, 3))
    assert diffusion_loss(Oracle(eps), x0, 100, eps, None, s) == 0.0
    assert diffusion_loss(Zero(), x0, 100, eps, None, s) == pytest.approx(3.0, abs=0.15)
    with pytest.raises(ValueError):
        diffusion_loss(Zero(), np.zeros((0, 3)), 1, np.zeros((0, 3)), None, s)


@pytest.mark.parametrize("t", [20, 200, 600])
def test_loss_equals_posterior_trace(t):
    s = make_schedule()
    cov = np.array([[0.5, 0.2], [0.2, 0.3]])
    den = GaussianMixtureDenoiser([1.0], [[1.0, -1.0]], cov[None], s)
    rng = np.random.default_rng(t)
    n = 100_000
    x0 = rng.multivariate_normal([1.0, -1.0], cov, size=n)
    eps = rng.standard_normal((n, 2))
    loss = diffusion_loss(den, x0, t, eps, None, s)
    assert loss == pytest.approx(gaussian_posterior_trace(s.at(t), cov), rel=0.02)


# --- guidance ------------------------------------------------------------------

def test_cfg_single_examples():
    u, c = np.array([0.0]), np.array([1.0])
    assert cfg_single(u, c, 7.5).tolist() == [7.5]
    assert cfg_single(u, c, 1).tolist() == [1.0]
    assert cfg_single(u, c, 0).tolist() == [0.0]


def test_cfg_multi_arithmetic():
    assert cfg_multi(np.array([0.0]), np.array([1.0]), np.array([2.0]), 2, 3).tolist() == [5.0]


def test_cfg_dim_mismatch():
    with pytest.raises(ValueError):
        cfg_multi(np.zeros(2), np.zeros(3), np.zeros(2), 1, 1)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_cfg_telescoping(v):
    a, b, c = v[0], v[1], v[2]
    assert np.array_equal(cfg_multi(a, b, c, 1, 1), c)
    assert np.array_equal(cfg_multi(a, b, c, 0, 0), a)


@settings(max_examples=200)
@given(arrays(np.float64, (2, 3), elements=finite), st.floats(-20, 20), st.floats(-20, 20))
def test_cfg_multi_reduces_to_single(v, gb, gt):
    a, c = v[0], v[1]
    assert np.allclose(cfg_multi(a, a, c, gb, gt), cfg_single(a, c, gt), rtol=1e-12, atol=1e-9)


def test_guidance_endpoints():
    g = GuidanceSchedule()
    assert guidance_at_step(g, 0, 30) == (1.0, 6.0)
    assert guidance_at_step(g, 29, 30) == (3.0, 12.0)
    assert guidance_at_step(g, 14, 30)[0] == pytest.approx(1 + 2 * 14 / 29)
    assert guidance_at_step(g, 15, 30)[0] == pytest.approx(1 + 2 * 15 / 29)


def test_guidance_short_and_errors():
    g = GuidanceSchedule()
    assert guidance_at_step(g, 0, 1) == (1.0, 6.0)
    with pytest.raises(ValueError):
        guidance_at_step(g, 30, 30)
    with pytest.raises(ValueError):
        GuidanceSchedule((3, 1))


@settings(max_examples=100)
@given(st.integers(2, 200), st.data())
def test_guidance_monotone_in_step(total, data):
    g = GuidanceSchedule()
    i = data.draw(st.integers(0, total - 2))
    a, b = guidance_at_step(g, i, total), guidance_at_step(g, i + 1, total)
    assert a[0] <= b[0] and a[1] <= b[1]


# --- DDIM ------------------------------------------------------------------------

def test_ddim_inverts_true_noise():
    s = make_schedule()
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal(5), rng.standard_normal(5)
    for t in (1, 300, 900):
        xt = forward_noise(x0, t, eps, s).x_t
        assert np.allclose(ddim_step(xt, eps, t, 0, s), x0, rtol=0, atol=1e-9 / np.sqrt(s.at(t)))


def test_ddim_deterministic():
    s = make_schedule()
    x, e = np.array([0.3, -1.0]), np.array([0.1, 0.2])
    assert np.array_equal(ddim_step(x, e, 500, 400, s), ddim_step(x, e, 500, 400, s))


def test_ddim_single_step_posterior():
    # data N(0, 1): E[x0 | x_t] = sqrt(a) x_t, so the one-step output has variance a
    s = make_schedule()
    den = GaussianMixtureDenoiser([1.0], [[0.0]], [1.0], s)
    x = np.random.default_rng(3).standard_normal((50_000, 1))
    for t in (100, 700):
        out = ddim_step(x, den.predict(x, t), t, 0, s)
        a = s.at(t)
        assert np.allclose(out, np.sqrt(a) * x, atol=1e-12)
        assert out.var() == pytest.approx(a, rel=0.03)


def test_ddim_eta_uses_rng():
    s = make_schedule()
    x, e = np.zeros(3), np.zeros(3)
    a = ddim_step(x, e, 500, 400, s, eta=1.0, rng=np.random.default_rng(0))
    b = ddim_step(x, e, 500, 400, s, eta=1.0, rng=np.random.default_rng(0))
    assert np.array_equal(a, b) and np.any(a != 0)


def test_ddim_errors():
    s = make_schedule("linear", 10)
    with pytest.raises(ValueError):
        ddim_step(np.zeros(1), np.zeros(1), 3, 3, s)
    with pytest.raises(IndexError):
        ddim_step(np.zeros(1), np.zeros(1), 11, 3, s)


@pytest.mark.parametrize("spacing", ["uniform", "angle"])
@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_timesteps(spacing, kind):
    s = make_schedule(kind)
    ts = ddim_timesteps(s, 30, spacing)
    assert len(ts) == 31 and ts[0] == 1000 and ts[-1] == 0
    assert np.all(np.diff(ts) < 0)


def test_timesteps_dense():
    s = make_schedule("linear", 20)
    assert ddim_timesteps(s, 20, "angle").tolist() == list(range(20, -1, -1))


# --- sampler ---------------------------------------------------------------------

def test_identical_models_equal_plain_ddim():
    s = make_schedule()
    den = GaussianMixtureDenoiser([0.5, 0.5], [[1.0], [-1.0]], [0.1, 0.1], s)
    cfg = SamplerConfig(20, schedule=s, guidance=GuidanceSchedule.constant(1, 1))
    res = sample(den, den, cond_for(), cfg, np.random.default_rng(5), 50)
    x = np.random.default_rng(5).standard_normal((50, 1))
    ts = cfg.timesteps()
    for i in range(20):
        x = ddim_step(x, den.predict(x, ts[i], None), ts[i], ts[i + 1], s)
    assert np.allclose(res.samples, x, atol=1e-12)


def test_sampler_moments_gaussian():
    s = make_schedule("cosine")
    den = GaussianMixtureDenoiser([1.0], [[3.0]], [0.25], s)
    cfg = SamplerConfig(30, schedule=s, guidance=GuidanceSchedule.constant(1, 1), spacing="angle")
    x = sample(den, den, cond_for(), cfg, np.random.default_rng(0), 10_000).samples[:, 0]
    assert abs(x.mean() - 3.0) <= 3 * 0.5 / 100
    assert abs(x.std(ddof=1) / 0.5 - 1) <= 0.05


def two_mode_models(s):
    w = {int(c): [0.7, 0.3] for c in CrashType}
    means, covs = [[2.0], [-2.0]], [0.25, 0.25]
    return (GaussianMixtureDenoiser([.5, .5], means, covs, s, crash_weights=w),
            GaussianMixtureDenoiser([.5, .5], means, covs, s))


def test_guidance_monotone_mode_fraction():
    s = make_schedule()
    cm, um = two_mode_models(s)
    fracs = []
    for gt in (1, 4, 8):
        cfg = SamplerConfig(30, schedule=s, guidance=GuidanceSchedule.constant(1, gt))
        fracs.append(float((sample(cm, um, cond_for(), cfg, np.random.default_rng(0), 1000).samples > 0).mean()))
    assert fracs == sorted(fracs) and fracs[-1] > fracs[0]


def test_sampler_queries():
    calls = []

    class Spy:
        dim = 1

        def __init__(self, tag):
            self.tag = tag

        def predict(self, x, t, cond):
            calls.append((self.tag, cond.box_mask.count(True), cond.crash_masked))
            return np.zeros_like(x)

    cond = apply_mask(cond_for(), MaskPlan(9))
    sample(Spy("c"), Spy("u"), cond, SamplerConfig(3), np.random.default_rng(0), 2)
    assert calls[:3] == [("u", 25, True), ("c", 16, True), ("c", 16, False)]
    assert len(calls) == 9


def test_sampler_same_seed_same_xT():
    s = make_schedule()
    cm, um = two_mode_models(s)
    cfg = SamplerConfig(10, schedule=s)
    a = sample(cm, um, cond_for(CrashType.NONE), cfg, np.random.default_rng(4), 8)
    b = sample(cm, um, cond_for(CrashType.EGO_VEHICLE), cfg, np.random.default_rng(4), 8)
    assert np.array_equal(a.x_T, b.x_T)
    a2 = sample(cm, um, cond_for(CrashType.NONE), cfg, np.random.default_rng(4), 8)
    assert np.array_equal(a.trajectory, a2.trajectory)


def test_manifest_and_csv():
    s = make_schedule()
    den = GaussianMixtureDenoiser([1.0], [[0.0, 0.0]], [1.0], s)
    cfg = SamplerConfig(4, schedule=s)
    res = sample(den, den, cond_for(), cfg, np.random.default_rng(0), 2)
    man = json.loads(json.dumps(run_manifest(cfg, 17, res)))
    assert man["seed"] == 17 and len(man["gammas"]) == 4
    assert man["gammas"][0] == {"step": 0, "gamma_b": 1.0, "gamma_t": 6.0}
    rows = trajectory_csv(res).splitlines()
    assert rows[0] == "step,sample,x0,x1" and len(rows) == 1 + 5 * 2


def test_sampler_config_errors():
    with pytest.raises(ValueError):
        SamplerConfig(0)
    with pytest.raises(ValueError):
        SamplerConfig(30, spacing="log")


def test_box_conditioning_shifts_means():
    s = make_schedule()
    den = GaussianMixtureDenoiser([1.0], [[0.0, 0.0]], [0.01], s, box_gain=2.0)
    boxes = [(ObjectLabel.of(1, "car", [0.8, 0.8, 1.0, 1.0]),)] * 25
    _, means = den.mixture_for(cond_for(boxes=boxes))
    assert np.allclose(means, [[0.8, 0.8]])


# --- trainable MLP --------------------------------------------------------------

def test_condition_arrays():
    boxes = [(ObjectLabel.of(1, "car", [0.2, 0.4, 0.4, 0.6]),)] + [()] * 24
    cond = apply_mask(cond_for(CrashType.VEHICLE_ONLY, boxes), MaskPlan(3))
    crash, feat, masked = condition_arrays(cond, 2)
    assert crash.tolist() == [3, 3]
    assert feat[0, 0].tolist() == pytest.approx([1.0, 0.3, 0.5])
    assert masked[0].tolist() == [False] * 3 + [True] * 22
    crash, _, masked = condition_arrays(None, 1)
    assert crash.tolist() == [-1] and masked.all()


def test_gradient_check():
    X, y = moons(500)
    model = MLPDenoiser(n_steps=0, hidden=32, random_state=0).fit(X, y)
    rng = np.random.default_rng(7)
    batch = model._draw_batch(X, y, 16, rng, 1.0)
    _, grad = loss_and_grad(model.params_, *batch)
    h = 1e-5
    worst = 0.0
    for _ in range(10):
        direction = {k: rng.standard_normal(v.shape) for k, v in model.params_.items()}
        plus = {k: v + h * direction[k] for k, v in model.params_.items()}
        minus = {k: v - h * direction[k] for k, v in model.params_.items()}
        fd = (loss_and_grad(plus, *batch)[0] - loss_and_grad(minus, *batch)[0]) / (2 * h)
        an = sum(float((grad[k] * direction[k]).sum()) for k in grad)
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    assert worst <= 1e-4


def test_gradient_check_coordinates():
    X, y = moons(300)
    model = MLPDenoiser(n_steps=0, hidden=16, random_state=1).fit(X, y)
    rng = np.random.default_rng(2)
    batch = model._draw_batch(X, y, 8, rng, 1.0)
    _, grad = loss_and_grad(model.params_, *batch)
    h = 1e-6
    for name in ("W1", "b2", "W3", "null_crash", "null_box"):
        p = model.params_[name]
        idx = tuple(int(rng.integers(0, n)) for n in p.shape)
        old = p[idx]
        p[idx] = old + h
        lp = loss_and_grad(model.params_, *batch)[0]
        p[idx] = old - h
        lm = loss_and_grad(model.params_, *batch)[0]
        p[idx] = old
        fd = (lp - lm) / (2 * h)
        assert fd == pytest.approx(grad[name][idx], rel=1e-4, abs=1e-9)


def test_lr_zero_constant_trace():
    X, y = moons(500)
    _, trace = train_toy_denoiser(X, steps=200, lr=0.0, rng=0, labels=y, log_every=20)
    assert len(trace) == 11 and len(set(trace)) == 1


def test_short_training_reduces_loss():
    X, y = moons(2000)
    _, trace = train_toy_denoiser(X, steps=600, lr=2e-3, rng=0, labels=y)
    assert trace[-1] < 0.8 * trace[0]


def test_divergence_raises():
    X, y = moons(500)
    with np.errstate(all="ignore"), pytest.raises(FloatingPointError, match="non-finite loss .* step 0"):
        train_toy_denoiser(X * 1e200, steps=50, lr=1e-3, rng=0, labels=y, log_every=10)


def test_fit_validation():
    with pytest.raises(ValueError):
        MLPDenoiser(n_steps=0).fit(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        MLPDenoiser(n_steps=0).fit(np.zeros((4, 2)), [0, 1, 2, 9])


def test_weights_round_trip(tmp_path):
    X, y = moons(300)
    model = MLPDenoiser(n_steps=5, hidden=8, random_state=0).fit(X, y)
    path = tmp_path / "w.bin"
    model.save_weights(path)
    raw = path.read_bytes()
    n = int.from_bytes(raw[:4], "little")
    header = json.loads(raw[4:4 + n])
    assert [p["name"] for p in header["params"]][:2] == ["W1", "b1"]
    loaded = MLPDenoiser.load_weights(path)
    x = np.random.default_rng(0).standard_normal((5, 2))
    c = cond_for()
    assert np.allclose(loaded.predict(x, 300, c), model.predict(x, 300, c), atol=1e-4)
    assert loaded.hidden == 8


def test_mlp_in_sampler():
    X, y = moons(300)
    model = MLPDenoiser(n_steps=5, hidden=8, random_state=0).fit(X, y)
    res = sample(model, model, cond_for(), SamplerConfig(5), np.random.default_rng(0), 4)
    assert res.samples.shape == (4, 2) and np.all(np.isfinite(res.samples))
