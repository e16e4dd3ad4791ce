"""A small trainable noise predictor for low-dimensional toy data.

Two hidden SiLU layers read the noisy point, a sinusoidal embedding of the
timestep, and a condition vector:

* crash type: one-hot over the five classes, or a learned 5-vector when the
  crash type is withheld;
* boxes: for each of the 25 frames ``[has_boxes, centre_x, centre_y]``, or a
  learned 3-vector when that frame is withheld.

Training minimizes the epsilon-prediction loss with Adam. Gradients are
written out by hand so they can be checked against finite differences.
"""
from __future__ import annotations

import json
import logging
import struct

import numpy as np
from sklearn.base import BaseEstimator

from .._validation import check_rng
from ..conditioning import NULL, NUM_FRAMES, ConditionSet, CurriculumState, sample_mask_plan
from .schedule import make_schedule, noise_with

logger = logging.getLogger(__name__)

N_CRASH = 5
BOX_FEATS = 3
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "null_crash", "null_box")


# --- condition encoding ---------------------------------------------------------

def condition_arrays(conds, n=None, num_frames=NUM_FRAMES):
    """Encode one or many :class:`ConditionSet` into raw arrays.

    Returns ``crash`` (``(B,)`` ints, -1 where masked), ``box_feat``
    (``(B, F, 3)``) and ``box_masked`` (``(B, F)`` bools). ``None`` means no
    condition: crash and every box frame withheld.
    """
    if conds is None or isinstance(conds, ConditionSet):
        conds = [conds] * (1 if n is None else n)
    B = len(conds)
    crash = np.full(B, -1, dtype=np.int64)
    box_feat = np.zeros((B, num_frames, BOX_FEATS))
    box_masked = np.ones((B, num_frames), dtype=bool)
    for i, c in enumerate(conds):
        if c is None:
            continue
        if len(c.boxes) != num_frames:
            raise ValueError(f"condition has {len(c.boxes)} box frames, expected {num_frames}")
        if not c.crash_masked:
            crash[i] = int(c.crash_type)
        for j, slot in enumerate(c.boxes):
            if slot is NULL:
                continue
            box_masked[i, j] = False
            labels = list(slot or ())
            if labels:
                cx = np.mean([(lab.box.x_min + lab.box.x_max) / 2 for lab in labels])
                cy = np.mean([(lab.box.y_min + lab.box.y_max) / 2 for lab in labels])
                box_feat[i, j] = (1.0, cx, cy)
    return crash, box_feat, box_masked


def time_embedding(t, T, n_freqs):
    s = np.asarray(t, dtype=np.float64).reshape(-1, 1) / T
    freqs = np.pi * 2.0 ** np.arange(n_freqs)
    return np.concatenate([np.sin(s * freqs), np.cos(s * freqs)], axis=1)


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def init_params(in_dim, hidden, out_dim, rng):
    rng = check_rng(rng)
    p = {
        "W1": rng.standard_normal((in_dim, hidden)) * np.sqrt(2.0 / in_dim),
        "b1": np.zeros(hidden),
        "W2": rng.standard_normal((hidden, hidden)) * np.sqrt(2.0 / hidden),
        "b2": np.zeros(hidden),
        "W3": rng.standard_normal((hidden, out_dim)) * np.sqrt(1.0 / hidden) * 0.1,
        "b3": np.zeros(out_dim),
        "null_crash": rng.standard_normal(N_CRASH) * 0.1,
        "null_box": rng.standard_normal(BOX_FEATS) * 0.1,
    }
    return p


def _inputs(params, x, temb, crash, box_feat, box_masked):
    B = x.shape[0]
    crash_vec = np.zeros((B, N_CRASH))
    present = crash >= 0
    crash_vec[present, crash[present]] = 1.0
    crash_vec[~present] = params["null_crash"]
    boxes = box_feat.copy()
    boxes[box_masked] = params["null_box"]
    return np.concatenate([x, temb, crash_vec, boxes.reshape(B, -1)], axis=1)


def forward(params, x, temb, crash, box_feat, box_masked):
    X = _inputs(params, x, temb, crash, box_feat, box_masked)
    z1 = X @ params["W1"] + params["b1"]
    h1, s1 = _silu(z1)
    z2 = h1 @ params["W2"] + params["b2"]
    h2, s2 = _silu(z2)
    out = h2 @ params["W3"] + params["b3"]
    return out, (X, z1, s1, h1, z2, s2, h2)


def loss_and_grad(params, x, temb, crash, box_feat, box_masked, eps):
    """Mean squared epsilon error over the batch and its gradient per parameter."""
    out, (X, z1, s1, h1, z2, s2, h2) = forward(params, x, temb, crash, box_feat, box_masked)
    B, d = x.shape
    r = out - eps
    loss = float(np.mean(np.sum(r * r, axis=1)))
    dout = 2.0 * r / B
    g = {"W3": h2.T @ dout, "b3": dout.sum(axis=0)}
    dh2 = dout @ params["W3"].T
    dz2 = dh2 * (s2 + z2 * s2 * (1.0 - s2))
    g["W2"] = h1.T @ dz2
    g["b2"] = dz2.sum(axis=0)
    dh1 = dz2 @ params["W2"].T
    dz1 = dh1 * (s1 + z1 * s1 * (1.0 - s1))
    g["W1"] = X.T @ dz1
    g["b1"] = dz1.sum(axis=0)
    dX = dz1 @ params["W1"].T
    off = d + temb.shape[1]
    dcrash = dX[:, off:off + N_CRASH]
    g["null_crash"] = dcrash[crash < 0].sum(axis=0)
    dbox = dX[:, off + N_CRASH:].reshape(B, -1, BOX_FEATS)
    g["null_box"] = dbox[box_masked].sum(axis=0)
    return loss, g


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class MLPDenoiser(BaseEstimator):
    """Trainable epsilon predictor for 2-D (or other low-dimensional) data.

    Parameters
    ----------
    hidden : int
        Width of both hidden layers.
    n_steps : int
        Optimizer steps.
    learning_rate : float
    batch_size : int
    n_freqs : int
        Sinusoidal frequencies in the timestep embedding.
    T, beta_lo, beta_hi : diffusion schedule (linear betas).
    log_every : int
        Interval between loss-trace entries, measured on a fixed evaluation batch.
    random_state : int, Generator or None
    """

    def __init__(self, hidden=128, n_steps=5000, learning_rate=1e-3, batch_size=256,
                 n_freqs=8, T=1000, beta_lo=1e-4, beta_hi=0.02, log_every=50,
                 eval_size=2048, num_frames=NUM_FRAMES, random_state=None):
        self.hidden = hidden
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_freqs = n_freqs
        self.T = T
        self.beta_lo = beta_lo
        self.beta_hi = beta_hi
        self.log_every = log_every
        self.eval_size = eval_size
        self.num_frames = num_frames
        self.random_state = random_state

    def _draw_batch(self, X, y, n, rng, progress):
        idx = rng.integers(0, len(X), size=n)
        x0 = X[idx]
        t = rng.integers(1, self.T + 1, size=n)
        eps = rng.standard_normal(x0.shape)
        crash = np.full(n, -1, dtype=np.int64) if y is None else y[idx].copy()
        box_masked = np.zeros((n, self.num_frames), dtype=bool)
        curr = CurriculumState(progress)
        for i in range(n):
            plan = sample_mask_plan(rng, self.num_frames, curr)
            box_masked[i, plan.k:] = True
            if plan.crash_masked:
                crash[i] = -1
        box_feat = np.zeros((n, self.num_frames, BOX_FEATS))
        x_t = noise_with(x0, eps, self.schedule_.at(t)[:, None])
        temb = time_embedding(t, self.T, self.n_freqs)
        return x_t, temb, crash, box_feat, box_masked, eps

    def fit(self, X, y=None):
        """Train on points ``X`` (``(n, d)``), optionally labelled with crash types ``y``."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or len(X) == 0:
            raise ValueError("X must be a non-empty (n_samples, n_features) array")
        if y is not None:
            y = np.asarray(y, dtype=np.int64)
            if y.shape != (len(X),) or y.min() < 0 or y.max() >= N_CRASH:
                raise ValueError("y must hold one crash type in [0, 4] per sample")
        rng = check_rng(self.random_state)
        self.schedule_ = make_schedule("linear", self.T, self.beta_lo, self.beta_hi)
        self.dim_ = X.shape[1]
        in_dim = self.dim_ + 2 * self.n_freqs + N_CRASH + BOX_FEATS * self.num_frames
        self.params_ = init_params(in_dim, self.hidden, self.dim_, rng)
        eval_batch = self._draw_batch(X, y, self.eval_size, rng, 1.0)
        opt = _Adam(self.params_, self.learning_rate)
        trace = []
        for step in range(self.n_steps + 1):
            if step % self.log_every == 0 or step == self.n_steps:
                ev = self.loss(*eval_batch)
                if not np.isfinite(ev):
                    raise FloatingPointError(self._diagnose(step, ev))
                trace.append((step, ev))
                logger.debug("step %d eval loss %.5f", step, ev)
            if step == self.n_steps:
                break
            batch = self._draw_batch(X, y, self.batch_size, rng, step / max(self.n_steps, 1))
            loss, grads = loss_and_grad(self.params_, *batch)
            if not np.isfinite(loss):
                raise FloatingPointError(self._diagnose(step, loss))
            opt.step(self.params_, grads)
        self.loss_curve_ = [v for _, v in trace]
        self.loss_steps_ = [s for s, _ in trace]
        return self

    def _diagnose(self, step, value):
        biggest = max(float(np.abs(v).max()) for v in self.params_.values())
        return (f"non-finite loss {value} at step {step} (lr={self.learning_rate}, "
                f"max |param|={biggest:.3g}); try a smaller learning rate")

    def loss(self, x_t, temb, crash, box_feat, box_masked, eps):
        out, _ = forward(self.params_, x_t, temb, crash, box_feat, box_masked)
        return float(np.mean(np.sum((out - eps) ** 2, axis=1)))

    @property
    def dim(self):
        return self.dim_

    def predict(self, x_t, t, cond=None):
        """Noise prediction for noisy points ``x_t`` at step(s) ``t``.

        ``cond`` is one :class:`ConditionSet` shared by the batch, a list with
        one per row, or ``None`` for fully withheld conditions.
        """
        x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        crash, box_feat, box_masked = condition_arrays(cond, B, self.num_frames)
        out, _ = forward(self.params_, x, time_embedding(t, self.T, self.n_freqs),
                         crash, box_feat, box_masked)
        return out

    # weights file: 4-byte LE header length, JSON header, little-endian float32 body
    def save_weights(self, path):
        header = {
            "params": [{"name": k, "shape": list(self.params_[k].shape)} for k in PARAM_NAMES],
            "estimator": {k: v for k, v in self.get_params().items() if k != "random_state"},
            "dim": self.dim_,
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        body = b"".join(self.params_[k].astype("<f4").tobytes() for k in PARAM_NAMES)
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(head)) + head + body)

    @classmethod
    def load_weights(cls, path):
        with open(path, "rb") as fh:
            data = fh.read()
        (n,) = struct.unpack_from("<I", data)
        header = json.loads(data[4:4 + n].decode("utf-8"))
        model = cls(**header["estimator"])
        model.dim_ = header["dim"]
        model.schedule_ = make_schedule("linear", model.T, model.beta_lo, model.beta_hi)
        offset = 4 + n
        params = {}
        for entry in header["params"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
            params[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
            offset += 4 * count
        model.params_ = params
        return model


def train_toy_denoiser(dataset2d, steps=5000, lr=1e-3, rng=None, labels=None, **kwargs):
    """Fit an :class:`MLPDenoiser` and return ``(model, loss_trace)``."""
    model = MLPDenoiser(n_steps=steps, learning_rate=lr, random_state=rng, **kwargs)
    model.fit(dataset2d, labels)
    return model, model.loss_curve_
