"""Planar pose regression on top of a frozen encoder.

A two-layer head reads the flattened concatenated latent and predicts
``(x, y, cos(theta), sin(theta))``. Training uses a homoscedastic loss with
learned log-variances for the position and heading terms. The encoder and its
codebooks are never touched: features are computed once, without a graph.
"""
import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import (CAR, WORLD_H, WORLD_W, Population, Pose, SceneSpec, render,
                   drive_pose, to_chw)
from .optim import Adam, step_lr
from .tensor import Tensor

WORLD_DIAMETER = math.hypot(WORLD_W, WORLD_H)
_CENTER = np.array([WORLD_W / 2, WORLD_H / 2])
_SCALE = 10.0


@dataclass(frozen=True)
class CarparkWorld:
    """Fixed structure plus one draw of parked vehicles."""

    structure: SceneSpec = SceneSpec(0)
    population: Population = Population(1, 0.6)

    def render_view(self, pose, size=48):
        rgb, lab, _ = render(self.structure, self.population, pose, size)
        return rgb, lab == CAR

    def resample(self, seed, occupancy=None):
        occ = self.population.occupancy if occupancy is None else occupancy
        return CarparkWorld(self.structure, Population(seed, occ))

    def trajectory(self, count, seed, size=48):
        """``count`` aisle-following poses with their rendered views."""
        rng = np.random.default_rng([seed, 0x7A])
        poses = [drive_pose(rng) for _ in range(count)]
        images = [self.render_view(p, size)[0] for p in poses]
        return images, poses


def standard_worlds(seed=0, train_occupancy=0.6):
    """Day-1 training world, day-2 resample of the same floor, and a second floor."""
    base = SceneSpec(seed)
    day1 = CarparkWorld(base, Population(1000 + seed, train_occupancy))
    day2 = CarparkWorld(base, Population(2000 + seed, train_occupancy))
    floor2 = CarparkWorld(SceneSpec(seed, brightness=0.97), Population(3000 + seed, 0.75))
    return day1, day2, floor2


# ----------------------------------------------------------------------------
# head


class PoseHead:
    def __init__(self, in_dim, hidden=128, seed=0, dtype=np.float32):
        rng = np.random.default_rng([seed, 0x9E4D])
        self.dtype = dtype
        self.params = {
            "fc1.w": Tensor(rng.normal(0, math.sqrt(2.0 / in_dim), (hidden, in_dim)).astype(dtype), True),
            "fc1.b": Tensor(np.zeros(hidden, dtype), True),
            "fc2.w": Tensor(rng.normal(0, math.sqrt(1.0 / hidden), (4, hidden)).astype(dtype), True),
            # heading pair starts at (cos, sin) = (1, 0), away from atan2's undefined origin
            "fc2.b": Tensor(np.array([0.0, 0.0, 1.0, 0.0], dtype), True),
            "s_t": Tensor(np.zeros((), dtype), True),
            "s_r": Tensor(np.zeros((), dtype), True),
        }
        self.feat_mean = np.zeros(in_dim, dtype)
        self.feat_std = np.ones(in_dim, dtype)

    @property
    def in_dim(self):
        return self.params["fc1.w"].shape[1]

    def fit_normalizer(self, feats):
        self.feat_mean = feats.mean(axis=0).astype(self.dtype)
        self.feat_std = (feats.std(axis=0) + 1e-3).astype(self.dtype)

    def forward(self, feats):
        """Raw outputs (N, 4): normalised x, y and an unnormalised heading pair."""
        x = Tensor(((feats - self.feat_mean) / self.feat_std).astype(self.dtype))
        p = self.params
        h = T.relu(T.linear(x, p["fc1.w"], p["fc1.b"]))
        return T.linear(h, p["fc2.w"], p["fc2.b"])


def split_outputs(raw):
    """(xy in meters, angle) tensors from raw head output."""
    xy = T.take(raw, slice(0, 2), 1) * _SCALE + _CENTER
    cos, sin = T.take(raw, slice(2, 3), 1), T.take(raw, slice(3, 4), 1)
    return xy, T.reshape(T.atan2(sin, cos), (raw.shape[0],))


def homoscedastic_loss(pred_xy, pred_angle, gt_xy, gt_angle, s_t, s_r):
    """Batch-mean L1 position and wrapped-angle residuals, each weighted by a learned log-variance."""
    gt_xy = np.asarray(gt_xy, dtype=pred_xy.dtype)
    gt_angle = np.asarray(gt_angle, dtype=pred_angle.dtype)
    n = gt_xy.shape[0]
    pos = T.mul(T.abs_sum(pred_xy - gt_xy), 1.0 / n)
    ang = T.mul(T.abs_sum(T.wrap_angle(pred_angle - gt_angle)), 1.0 / n)
    return pos * T.exp(-s_t) + s_t + ang * T.exp(-s_r) + s_r


def wrap(a):
    return np.pi - np.mod(np.pi - np.asarray(a, np.float64), 2 * np.pi)


def encoder_features(model, images, batch=64):
    """Flattened concatenated latents of uint8 HWC images; no graph, no codebook updates."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            x = to_chw(images[i:i + batch]).astype(model.dtype)
            e = model.encode(x).e_concat.data
            out.append(e.reshape(e.shape[0], -1).astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, 0))


def poses_to_arrays(poses):
    return np.array([[p.x, p.y] for p in poses]), np.array([p.theta for p in poses])


def train_head(feats, poses, epochs=100, lr=1e-4, step_size=30, gamma=0.5, batch=32,
               hidden=128, seed=0, log=None, dtype=np.float32):
    """Fit a :class:`PoseHead` on precomputed features; returns (head, per-epoch losses)."""
    head = PoseHead(feats.shape[1], hidden, seed, dtype)
    head.fit_normalizer(feats)
    gt_xy, gt_th = poses_to_arrays(poses)
    opt = Adam(head.params, lr=lr)
    history = []
    n = len(feats)
    for epoch in range(epochs):
        opt.set_lr(step_lr(epoch, lr, step_size, gamma))
        order = np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)
        total = 0.0
        for i in range(0, n, batch):
            idx = order[i:i + batch]
            xy, ang = split_outputs(head.forward(feats[idx]))
            loss = homoscedastic_loss(xy, ang, gt_xy[idx], gt_th[idx], head.params["s_t"], head.params["s_r"])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / n)
        if log:
            log(epoch, history[-1])
    return head, history


def predict(head, feats):
    with T.no_grad():
        raw = head.forward(feats).data
    xy = raw[:, :2] * _SCALE + _CENTER
    pair = raw[:, 2:]
    norm = np.linalg.norm(pair, axis=1, keepdims=True)
    pair = np.where(norm > 0, pair / np.where(norm > 0, norm, 1), np.array([1.0, 0.0]))
    theta = wrap(np.arctan2(pair[:, 1], pair[:, 0]))
    return [Pose(float(x), float(y), float(t)) for (x, y), t in zip(xy, theta)]


def regress_pose(image, model, head):
    """Pose of a single uint8 HWC view through the frozen encoder."""
    return predict(head, encoder_features(model, [image]))[0]


def lower_median(values):
    """Median; for an even count, the lower of the two middle elements."""
    s = sorted(values)
    if not s:
        raise ValueError("median of an empty sequence")
    return s[(len(s) - 1) // 2]


def pose_errors(preds, truths):
    pos = [math.hypot(p.x - t.x, p.y - t.y) for p, t in zip(preds, truths)]
    ang = [abs(float(wrap(p.theta - t.theta))) for p, t in zip(preds, truths)]
    return pos, ang


def evaluate_median_error(head, model, images, poses):
    """(median position error in meters, median absolute heading error in radians, per-sample)."""
    if len(images) == 0:
        raise ValueError("empty trajectory")
    preds = predict(head, encoder_features(model, images))
    pos, ang = pose_errors(preds, poses)
    return lower_median(pos), lower_median(ang), (preds, pos, ang)


def write_eval_csv(path, names, poses, preds, pos_err, ang_err):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image", "x", "y", "theta", "pred_x", "pred_y", "pred_theta", "pos_err_m", "ang_err_rad"])
        for n, t, p, e, a in zip(names, poses, preds, pos_err, ang_err):
            w.writerow([n] + [f"{v:.6f}" for v in (t.x, t.y, t.theta, p.x, p.y, p.theta, e, a)])
        w.writerow(["median", "", "", "", "", "", "", f"{lower_median(pos_err):.6f}", f"{lower_median(ang_err):.6f}"])


def write_trajectory(path, names, poses):
    with open(path, "w") as f:
        for n, p in zip(names, poses):
            f.write(f"{n} {p.x!r} {p.y!r} {p.theta!r}\n")


def read_trajectory(path):
    names, poses = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'image_filename x y theta'")
            names.append(parts[0])
            poses.append(Pose(float(parts[1]), float(parts[2]), float(parts[3])))
    return names, poses


# ----------------------------------------------------------------------------
# protocol: train on day 1, test on day 2 and on the second floor


TEST_SETS = ("seen", "day2", "floor2")


def pose_views(cfg, seed):
    """Rendered views per split: ``train`` and ``seen`` (held out) on day 1, then ``day2`` and ``floor2``."""
    day1, day2, floor2 = standard_worlds(cfg.pose_world_seed + seed)
    n_tr, n_te, size = cfg.pose_train_views, cfg.pose_test_views, cfg.image_size
    base = 4 * (cfg.pose_world_seed + seed)
    return {
        "train": day1.trajectory(n_tr, base, size),
        "seen": day1.trajectory(n_te, base + 1, size),
        "day2": day2.trajectory(n_te, base + 2, size),
        "floor2": floor2.trajectory(n_te, base + 3, size),
    }


def fit_pose_head(model, cfg, images, poses, seed=0, log=None):
    feats = encoder_features(model, images)
    return train_head(feats, poses, cfg.pose_epochs, cfg.pose_lr, cfg.pose_step_size, cfg.pose_gamma,
                      cfg.pose_batch, cfg.pose_hidden, seed, log)


def head_checkpoint(head, config_text="", meta=None):
    from .checkpoint import Checkpoint

    ck = Checkpoint(config_text, {"kind": "posehead", **(meta or {})})
    for k, p in head.params.items():
        ck.add(f"head/{k}", p.data)
    ck.add("head/feat_mean", head.feat_mean)
    ck.add("head/feat_std", head.feat_std)
    return ck


def head_from_checkpoint(ck):
    from .checkpoint import CheckpointError

    if ck.meta.get("kind") != "posehead":
        raise CheckpointError("not a pose-head checkpoint")
    w1 = ck["head/fc1.w"]
    head = PoseHead(w1.shape[1], w1.shape[0], dtype=w1.dtype.type)
    for k, p in head.params.items():
        p.data = ck[f"head/{k}"].copy()
    head.feat_mean = ck["head/feat_mean"].copy()
    head.feat_std = ck["head/feat_std"].copy()
    return head
