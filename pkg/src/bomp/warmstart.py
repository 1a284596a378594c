"""Warm-start prediction network, trained from scratch in numpy.

The height map passes through two strided 3x3 convolutions; the embedding
is concatenated with a context vector (start and goal configurations plus
the grasped capsule radius and endpoints) and run through two dense layers
feeding two heads: the waypoint positions of the optimal trajectory and
the log of the optimal segment duration. Everything (forward, backprop,
adaptive-moment updates) is explicit so gradients can be checked against
finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .robot import NDOF
from .sqp import project_consistent
from .trajectory import Trajectory, check_limits, from_arrays

GRID_SHAPE = (30, 40)
CONTEXT_DIM = 19  # q0 (6) + qH (6) + radius (1) + capsule endpoints (6)


@dataclass
class SceneRecord:
    heightmap: np.ndarray      # (30, 40) heights in meters
    q0: np.ndarray
    qH: np.ndarray
    radius: float
    p0_ee: np.ndarray          # grasped capsule endpoints, end-effector frame
    p1_ee: np.ndarray
    tau: np.ndarray            # (H+1, 6) label waypoint positions
    t_step: float

    def __post_init__(self):
        self.heightmap = np.asarray(self.heightmap, dtype=float)
        self.q0 = np.asarray(self.q0, dtype=float)
        self.qH = np.asarray(self.qH, dtype=float)
        self.p0_ee = np.asarray(self.p0_ee, dtype=float)
        self.p1_ee = np.asarray(self.p1_ee, dtype=float)
        self.tau = np.asarray(self.tau, dtype=float)
        if self.heightmap.shape != GRID_SHAPE:
            raise ValueError("height map must be 30x40")
        if self.t_step <= 0:
            raise ValueError("segment duration must be positive")

    def context(self):
        return np.concatenate([self.q0, self.qH, [self.radius],
                               self.p0_ee, self.p1_ee])

    def label_trajectory(self, limits=None) -> Trajectory:
        """The label as a consistent trajectory; optionally limit-checked."""
        traj = project_consistent(self.tau, None, None, self.t_step,
                                  self.tau[0], self.tau[-1])
        if limits is not None and not check_limits(traj, limits).ok(tol=1e-6):
            raise ValueError("label trajectory violates limits")
        return traj


def save_dataset(records, path):
    if not records:
        raise ValueError("empty dataset")
    np.savez_compressed(
        path,
        heightmaps=np.stack([r.heightmap for r in records]),
        q0=np.stack([r.q0 for r in records]),
        qH=np.stack([r.qH for r in records]),
        radius=np.array([r.radius for r in records]),
        p0=np.stack([r.p0_ee for r in records]),
        p1=np.stack([r.p1_ee for r in records]),
        tau=np.stack([r.tau for r in records]),
        t_step=np.array([r.t_step for r in records]),
    )


def load_dataset(path):
    with np.load(path) as z:
        return [
            SceneRecord(z["heightmaps"][i], z["q0"][i], z["qH"][i],
                        float(z["radius"][i]), z["p0"][i], z["p1"][i],
                        z["tau"][i], float(z["t_step"][i]))
            for i in range(z["radius"].shape[0])
        ]


# ---------------------------------------------------------------------------
# model


@dataclass
class Normalization:
    grid_mean: float
    grid_std: float
    ctx_mean: np.ndarray       # (19,)
    ctx_std: np.ndarray
    tau_mean: np.ndarray       # (6 * (H+1),)
    tau_std: np.ndarray
    logt_mean: float
    logt_std: float


class WarmStartModel:
    """Two strided convolutions, two dense layers, two output heads."""

    def __init__(self, horizon=16, conv_channels=(8, 16), hidden=(256, 128),
                 seed=0, norm=None):
        self.horizon = int(horizon)
        self.conv_channels = tuple(conv_channels)
        self.hidden = tuple(hidden)
        c1, c2 = self.conv_channels
        h1, h2 = self.hidden
        gh, gw = GRID_SHAPE
        oh1, ow1 = _conv_out(gh), _conv_out(gw)
        oh2, ow2 = _conv_out(oh1), _conv_out(ow1)
        self.embed_dim = oh2 * ow2 * c2
        n_tau = NDOF * (self.horizon + 1)
        rng = np.random.default_rng(seed)

        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

        self.params = {
            "conv1_w": he((9, c1), 9), "conv1_b": np.zeros(c1),
            "conv2_w": he((9 * c1, c2), 9 * c1), "conv2_b": np.zeros(c2),
            "fc1_w": he((self.embed_dim + CONTEXT_DIM, h1),
                        self.embed_dim + CONTEXT_DIM),
            "fc1_b": np.zeros(h1),
            "fc2_w": he((h1, h2), h1), "fc2_b": np.zeros(h2),
            "tau_w": he((h2, n_tau), h2), "tau_b": np.zeros(n_tau),
            "t_w": he((h2, 1), h2), "t_b": np.zeros(1),
        }
        if norm is None:
            norm = Normalization(0.0, 1.0, np.zeros(CONTEXT_DIM),
                                 np.ones(CONTEXT_DIM), np.zeros(n_tau),
                                 np.ones(n_tau), 0.0, 1.0)
        self.norm = norm

    def save(self, path):
        meta = {"horizon": self.horizon,
                "conv_channels": list(self.conv_channels),
                "hidden": list(self.hidden)}
        arrays = dict(self.params)
        n = self.norm
        arrays.update(norm_grid=np.array([n.grid_mean, n.grid_std]),
                      norm_ctx=np.stack([n.ctx_mean, n.ctx_std]),
                      norm_tau=np.stack([n.tau_mean, n.tau_std]),
                      norm_logt=np.array([n.logt_mean, n.logt_std]),
                      meta=np.frombuffer(json.dumps(meta).encode(),
                                         dtype=np.uint8))
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            norm = Normalization(
                float(z["norm_grid"][0]), float(z["norm_grid"][1]),
                z["norm_ctx"][0], z["norm_ctx"][1],
                z["norm_tau"][0], z["norm_tau"][1],
                float(z["norm_logt"][0]), float(z["norm_logt"][1]))
            m = cls(meta["horizon"], tuple(meta["conv_channels"]),
                    tuple(meta["hidden"]), norm=norm)
            for k in m.params:
                m.params[k] = z[k].copy()
        return m


def _conv_out(n, k=3, stride=2, pad=1):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, cin, k=3, stride=2, pad=1):
    """(N, H, W, C) -> (N, oh, ow, k*k*C) patch matrix."""
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # N,h',w',C,k,k
    win = win[:, ::stride, ::stride]
    win = np.moveaxis(win, 3, 5)                        # N,oh,ow,k,k,C
    n, oh, ow = win.shape[:3]
    return np.ascontiguousarray(win).reshape(n, oh, ow, k * k * cin), oh, ow


def _col2im(dcol, x_shape, cin, oh, ow, k=3, stride=2, pad=1):
    n, h, w, _ = x_shape
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin))
    dcol = dcol.reshape(n, oh, ow, k, k, cin)
    for ki in range(k):
        for kj in range(k):
            dxp[:, ki:ki + stride * oh:stride,
                kj:kj + stride * ow:stride, :] += dcol[:, :, :, ki, kj, :]
    return dxp[:, pad:h + pad, pad:w + pad, :]


def featurize(model: WarmStartModel, rec: SceneRecord):
    """Normalized grid tensor and flat context vector for one record."""
    n = model.norm
    grid = (rec.heightmap - n.grid_mean) / n.grid_std
    ctx = (rec.context() - n.ctx_mean) / n.ctx_std
    return grid, ctx


def _forward_pass(model, grids, ctxs):
    """Batched forward with cached intermediates for backprop.

    grids: (N, 30, 40) normalized; ctxs: (N, 19) normalized.
    """
    p = model.params
    c1 = model.conv_channels[0]
    x0 = grids[..., None]
    col1, oh1, ow1 = _im2col(x0, 1)
    z1 = col1 @ p["conv1_w"] + p["conv1_b"]
    a1 = np.maximum(z1, 0.0)
    col2, oh2, ow2 = _im2col(a1, c1)
    z2 = col2 @ p["conv2_w"] + p["conv2_b"]
    a2 = np.maximum(z2, 0.0)
    flat = a2.reshape(a2.shape[0], -1)
    h0 = np.concatenate([flat, ctxs], axis=1)
    z3 = h0 @ p["fc1_w"] + p["fc1_b"]
    a3 = np.maximum(z3, 0.0)
    z4 = a3 @ p["fc2_w"] + p["fc2_b"]
    a4 = np.maximum(z4, 0.0)
    tau = a4 @ p["tau_w"] + p["tau_b"]
    t_raw = a4 @ p["t_w"] + p["t_b"]
    cache = dict(x0=x0, col1=col1, z1=z1, a1=a1, col2=col2, z2=z2, a2=a2,
                 h0=h0, z3=z3, a3=a3, z4=z4, a4=a4,
                 dims=(oh1, ow1, oh2, ow2))
    return tau, t_raw, cache


def forward(model: WarmStartModel, features):
    """Deterministic forward pass for one featurized input.

    Returns the predicted waypoint positions in normalized label space,
    shaped (H+1, 6), and the raw duration head output (normalized log
    duration; the positivity transform exp happens at denormalization).
    """
    grid, ctx = features
    grid = np.asarray(grid, dtype=float)
    ctx = np.asarray(ctx, dtype=float)
    if grid.shape != GRID_SHAPE or ctx.shape != (CONTEXT_DIM,):
        raise ValueError("featurized input has wrong shape")
    tau, t_raw, _ = _forward_pass(model, grid[None], ctx[None])
    return tau[0].reshape(model.horizon + 1, NDOF), float(t_raw[0, 0])


def loss_and_grads(model, grids, ctxs, tau_labels, t_labels, t_weight=10.0):
    """Mean squared error in normalized label space and all parameter
    gradients via backpropagation."""
    p = model.params
    n = grids.shape[0]
    tau, t_raw, c = _forward_pass(model, grids, ctxs)
    n_tau = tau.shape[1]
    r_tau = tau - tau_labels
    r_t = t_raw[:, 0] - t_labels
    loss = float(np.mean(r_tau ** 2) + t_weight * np.mean(r_t ** 2))

    d_tau = 2.0 * r_tau / (n * n_tau)
    d_t = (2.0 * t_weight * r_t / n)[:, None]
    grads = {}
    grads["tau_w"] = c["a4"].T @ d_tau
    grads["tau_b"] = d_tau.sum(axis=0)
    grads["t_w"] = c["a4"].T @ d_t
    grads["t_b"] = d_t.sum(axis=0)
    da4 = d_tau @ p["tau_w"].T + d_t @ p["t_w"].T
    dz4 = da4 * (c["z4"] > 0)
    grads["fc2_w"] = c["a3"].T @ dz4
    grads["fc2_b"] = dz4.sum(axis=0)
    da3 = dz4 @ p["fc2_w"].T
    dz3 = da3 * (c["z3"] > 0)
    grads["fc1_w"] = c["h0"].T @ dz3
    grads["fc1_b"] = dz3.sum(axis=0)
    dh0 = dz3 @ p["fc1_w"].T
    dflat = dh0[:, :model.embed_dim]
    oh1, ow1, oh2, ow2 = c["dims"]
    da2 = dflat.reshape(c["a2"].shape)
    dz2 = da2 * (c["z2"] > 0)
    col2_flat = c["col2"].reshape(-1, c["col2"].shape[-1])
    grads["conv2_w"] = col2_flat.T @ dz2.reshape(-1, dz2.shape[-1])
    grads["conv2_b"] = dz2.sum(axis=(0, 1, 2))
    dcol2 = dz2 @ p["conv2_w"].T
    da1 = _col2im(dcol2, c["a1"].shape, model.conv_channels[0], oh2, ow2)
    dz1 = da1 * (c["z1"] > 0)
    col1_flat = c["col1"].reshape(-1, c["col1"].shape[-1])
    grads["conv1_w"] = col1_flat.T @ dz1.reshape(-1, dz1.shape[-1])
    grads["conv1_b"] = dz1.sum(axis=(0, 1, 2))
    return loss, grads


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    t_weight: float = 10.0

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.__dict__, f, indent=1)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls(**json.load(f))


def fit_normalization(records):
    grids = np.stack([r.heightmap for r in records])
    ctx = np.stack([r.context() for r in records])
    tau = np.stack([r.tau.ravel() for r in records])
    logt = np.log([r.t_step for r in records])
    eps = 1e-8
    return Normalization(
        float(grids.mean()), float(grids.std() + eps),
        ctx.mean(axis=0), ctx.std(axis=0) + eps,
        tau.mean(axis=0), tau.std(axis=0) + eps,
        float(np.mean(logt)), float(np.std(logt) + eps))


def _batch_features(model, records):
    n = model.norm
    grids = (np.stack([r.heightmap for r in records]) - n.grid_mean) / n.grid_std
    ctxs = (np.stack([r.context() for r in records]) - n.ctx_mean) / n.ctx_std
    tau = (np.stack([r.tau.ravel() for r in records]) - n.tau_mean) / n.tau_std
    t = (np.log([r.t_step for r in records]) - n.logt_mean) / n.logt_std
    return grids, ctxs, tau, t


def train(records, config=None, model=None):
    """Adaptive-moment training; returns the best-validation model and the
    per-epoch (train, validation) loss curve."""
    if not records:
        raise ValueError("empty dataset")
    config = config or TrainConfig()
    horizon = records[0].tau.shape[0] - 1
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(records))
    n_val = max(1, int(round(config.val_fraction * len(records)))) \
        if len(records) > 1 else 0
    val = [records[i] for i in order[:n_val]]
    tr = [records[i] for i in order[n_val:]] or list(records)

    if model is None:
        model = WarmStartModel(horizon=horizon, seed=config.seed,
                               norm=fit_normalization(tr))
    data = _batch_features(model, tr)
    val_data = _batch_features(model, val) if val else None

    m_t = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_t = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    curve = []
    best = (np.inf, {k: v.copy() for k, v in model.params.items()})
    n = len(tr)
    for _epoch in range(config.epochs):
        perm = rng.permutation(n)
        ep_loss = 0.0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            loss, grads = loss_and_grads(
                model, data[0][idx], data[1][idx], data[2][idx], data[3][idx],
                t_weight=config.t_weight)
            ep_loss += loss * len(idx)
            step += 1
            for k, g in grads.items():
                m_t[k] = b1 * m_t[k] + (1 - b1) * g
                v_t[k] = b2 * v_t[k] + (1 - b2) * g * g
                mh = m_t[k] / (1 - b1 ** step)
                vh = v_t[k] / (1 - b2 ** step)
                model.params[k] -= config.learning_rate * mh / (np.sqrt(vh) + eps)
        train_loss = ep_loss / n
        if val_data is not None:
            val_loss, _ = loss_and_grads(model, *val_data,
                                         t_weight=config.t_weight)
        else:
            val_loss = train_loss
        curve.append((train_loss, val_loss))
        if val_loss < best[0]:
            best = (val_loss, {k: v.copy() for k, v in model.params.items()})
    model.params = best[1]
    return model, curve


def predict_warmstart(model: WarmStartModel, heightmap, q0, qH, radius=0.0,
                      p0_ee=None, p1_ee=None, t_inflation=1.05):
    """Network prediction post-processed into a valid SQP initializer.

    Endpoints are clamped to the requested configurations, velocities and
    accelerations are reconstructed by projecting onto the constant-jerk
    dynamics, and the predicted duration is inflated (default 5%) to
    counter under-prediction.

    heightmap=None runs the no-heightmap ablation: the grid input is the
    training-mean map, which normalizes to all zeros.
    """
    if heightmap is None:
        heightmap = np.full(GRID_SHAPE, model.norm.grid_mean)
    heights = getattr(heightmap, "heights", heightmap)
    zero = np.zeros(3)
    rec = SceneRecord(heights, q0, qH, radius,
                      zero if p0_ee is None else p0_ee,
                      zero if p1_ee is None else p1_ee,
                      np.tile(np.asarray(q0, dtype=float),
                              (model.horizon + 1, 1)), 1.0)
    tau_norm, t_raw = forward(model, featurize(model, rec))
    n = model.norm
    tau = tau_norm.ravel() * n.tau_std + n.tau_mean
    tau = tau.reshape(model.horizon + 1, NDOF)
    tau[0] = q0
    tau[-1] = qH
    t_step = float(np.exp(t_raw * n.logt_std + n.logt_mean)) * t_inflation
    traj = project_consistent(tau, None, None, t_step, q0, qH)
    return traj, t_step
