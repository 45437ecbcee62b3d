import math

import numpy as np
import pytest

import blindnet.tensor as T
from blindnet.data import BAYS, CAR, Pose, Population, SceneSpec, render
from blindnet.model import BlindNet, BlindNetConfig
from blindnet.pose import (CarparkWorld, PoseHead, encoder_features, evaluate_median_error,
                           homoscedastic_loss, lower_median, pose_errors, predict, read_trajectory,
                           regress_pose, standard_worlds, train_head, wrap, write_eval_csv,
                           write_trajectory)
from blindnet.tensor import Tensor


def _loss(pxy, pth, gxy, gth, st=0.0, sr=0.0):
    return homoscedastic_loss(Tensor(np.array(pxy, float)), Tensor(np.array(pth, float)),
                              gxy, gth, Tensor(np.array(st)), Tensor(np.array(sr)))


def test_loss_examples():
    assert _loss([[3.0, 4.0]], [0.2], [[3.0, 4.0]], [0.2]).item() == 0.0
    assert _loss([[4.0, 4.0]], [0.2], [[3.0, 4.0]], [0.2]).item() == pytest.approx(1.0)


def test_angle_residual_is_wrapped():
    a = _loss([[0.0, 0.0]], [math.pi - 0.1], [[0.0, 0.0]], [-math.pi + 0.1]).item()
    assert a == pytest.approx(0.2, abs=1e-12)


def test_log_variance_stationarity():
    pxy, gxy = np.array([[1.0, 2.0], [0.5, -1.0]]), np.zeros((2, 2))
    resid = np.abs(pxy).sum() / 2  # batch-mean L1
    s_t = math.log(resid)

    def f(s):
        return _loss(pxy, [0.0, 0.0], gxy, [0.0, 0.0], st=s).item()

    h = 1e-6
    assert abs((f(s_t + h) - f(s_t - h)) / (2 * h)) < 1e-6
    st = Tensor(np.array(s_t), True)
    homoscedastic_loss(Tensor(pxy), Tensor(np.zeros(2)), gxy, np.zeros(2), st, Tensor(np.array(0.0))).backward()
    assert abs(st.grad) < 1e-12


def test_wrap_range():
    a = np.linspace(-20, 20, 4001)
    w = wrap(a)
    assert (w > -math.pi).all() and (w <= math.pi).all()
    assert np.allclose(np.cos(w), np.cos(a)) and np.allclose(np.sin(w), np.sin(a))
    assert wrap(-math.pi) == math.pi


def test_lower_median():
    assert lower_median([9, 1, 2]) == 2
    assert lower_median([4, 1, 3, 2]) == 2
    with pytest.raises(ValueError):
        lower_median([])


def test_pose_errors_perfect():
    ps = [Pose(1.0, 2.0, 0.5), Pose(3.0, 4.0, -3.0)]
    pos, ang = pose_errors(ps, ps)
    assert lower_median(pos) == 0 and lower_median(ang) == 0


def test_world_render_determinism_and_structure():
    w = CarparkWorld(SceneSpec(2), Population(5, 0.7))
    p = Pose(20.0, 8.7, 0.0)
    a, b = w.render_view(p)[0], w.render_view(p)[0]
    assert a.tobytes() == b.tobytes()
    # a pose looking down the empty side aisle sees no bays
    far = Pose(3.5, 24.0, math.pi / 2)
    assert not w.render_view(far)[1].any()
    assert w.render_view(far)[0].tobytes() == w.resample(77).render_view(far)[0].tobytes()


def test_occupied_bay_differs_exactly_in_vehicle_region():
    spec = SceneSpec(1)
    full = Population(3, 1.0)
    x0, y0, y1, _ = BAYS[5]
    pose = Pose(x0 + 1.25, 8.7, -math.pi / 2)  # in the aisle, facing the bay row
    rgb_occ, lab_occ, _ = render(spec, full, pose)
    rgb_emp, _, _ = render(spec, None, pose)
    car = lab_occ == CAR
    assert car.any()
    diff = np.any(rgb_occ != rgb_emp, axis=-1)
    assert not (diff & ~car).any()
    assert diff[car].mean() > 0.95


def test_standard_worlds_share_structure():
    d1, d2, f2 = standard_worlds(0)
    assert d1.structure == d2.structure and d1.population != d2.population
    assert f2.population != d1.population


def _tiny():
    cfg = BlindNetConfig(base_channels=4, bottom_codes=16, bottom_dim=3, top_codes=8, top_dim=2,
                         res_blocks=1, image_size=48)
    return BlindNet(cfg, seed=0)


def test_untrained_head_is_finite_and_deterministic():
    model = _tiny()
    world = CarparkWorld()
    imgs, _ = world.trajectory(3, seed=1)
    feats = encoder_features(model, imgs)
    head = PoseHead(feats.shape[1], hidden=8)
    p = regress_pose(imgs[0], model, head)
    assert all(math.isfinite(v) for v in (p.x, p.y, p.theta)) and -math.pi < p.theta <= math.pi
    assert regress_pose(imgs[0].copy(), model, head) == p


def test_head_training_freezes_encoder_and_learns():
    model = _tiny()
    before = model.checksum()
    cb_before = {k: (c.embeddings.copy(), c.ema_cluster_size.copy()) for k, c in model.codebooks.items()}
    world = CarparkWorld()
    imgs, poses = world.trajectory(64, seed=2)
    feats = encoder_features(model, imgs)
    head, hist = train_head(feats, poses, epochs=30, lr=3e-3, step_size=10, batch=16, hidden=32)
    assert hist[-1] < hist[0]
    assert model.checksum() == before
    for k, c in model.codebooks.items():
        assert c.embeddings.tobytes() == cb_before[k][0].tobytes()
        assert c.ema_cluster_size.tobytes() == cb_before[k][1].tobytes()
    med_pos, med_ang, (preds, pos, ang) = evaluate_median_error(head, model, imgs, poses)
    assert med_pos == lower_median(pos) and len(preds) == 64
    with pytest.raises(ValueError, match="empty"):
        evaluate_median_error(head, model, [], [])


def test_trajectory_and_csv_io(tmp_path):
    names = ["a.ppm", "b.ppm"]
    poses = [Pose(1.5, 2.25, 0.1), Pose(30.0, 9.0, -2.0)]
    write_trajectory(tmp_path / "t.txt", names, poses)
    assert read_trajectory(tmp_path / "t.txt") == (names, poses)
    (tmp_path / "bad.txt").write_text("a.ppm 1 2\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        read_trajectory(tmp_path / "bad.txt")
    write_eval_csv(tmp_path / "e.csv", names, poses, poses, [0.0, 1.0], [0.0, 0.5])
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[-1].startswith("median") and len(rows) == 4


def test_predict_renormalises_heading():
    head = PoseHead(5, hidden=4)
    head.params["fc2.w"].data[:] = 0
    head.params["fc2.b"].data[:] = [0.0, 0.0, 0.0, 0.0]
    p = predict(head, np.zeros((1, 5)))[0]
    assert p.theta == 0.0 and (p.x, p.y) == (20.0, 14.0)
