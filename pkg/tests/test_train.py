import numpy as np
import pytest

from contact_forecast import autodiff as ad
from contact_forecast.errors import InvalidInputError, InvalidParameterError, ParseError, ShapeError
from contact_forecast.geom import MotionSequence, split_root_local
from contact_forecast.synth import SynthSpec, generate_synthetic
from contact_forecast.train import (EvalReport, TrainConfig, config_from_kv, evaluate,
                                    horizon_frames, is_finite_report, load_config, loss_contact,
                                    loss_local, loss_map, loss_motion, loss_root, make_windows,
                                    mpjpe_path, mpjpe_pose, parse_kv, per_frame_error,
                                    prepare_samples, save_config, train_contact_stage,
                                    train_motion_stage)


def val(t):
    return float(t.data)


# losses --------------------------------------------------------------------

def test_map_loss_examples():
    gt = np.random.default_rng(0).uniform(size=(3, 2, 5))
    assert val(loss_map(gt, gt)) == 0.0
    assert val(loss_map(gt, gt + 0.1)) == pytest.approx(0.01, abs=1e-15)
    pred = gt.copy()
    pred[1, 0, 3] += 0.5
    assert val(loss_map(gt, pred)) == pytest.approx(0.25 / 30, abs=1e-15)


def test_root_loss_examples():
    gt = np.random.default_rng(1).normal(size=(4, 3))
    assert val(loss_root(gt, gt)) == 0.0
    assert val(loss_root(gt, gt + [3.0, 4.0, 0.0])) == pytest.approx(25.0, abs=1e-12)
    assert val(loss_root(np.zeros((1, 3)), np.array([[1.0, 2.0, 2.0]]))) == 9.0


def test_local_loss_examples():
    gt = np.random.default_rng(2).normal(size=(4, 5, 3))
    assert val(loss_local(gt, gt)) == 0.0
    assert val(loss_local(gt, gt + [3.0, 4.0, 0.0])) == pytest.approx(25.0, abs=1e-12)
    one = np.zeros((1, 1, 3))
    assert val(loss_local(one, one + [0.0, 0.0, 2.0])) == 4.0


def test_contact_loss_examples():
    pred = np.random.default_rng(3).normal(size=(2, 3, 3))
    Q = np.zeros((2, 3, 4))
    assert val(loss_contact(pred, Q)) == 0.0
    Q[1, 2, :3] = pred[1, 2] - [0.0, 0.0, 2.0]
    Q[1, 2, 3] = 1
    assert val(loss_contact(pred, Q)) == pytest.approx(4 / 6, abs=1e-15)
    Q[1, 2, :3] = pred[1, 2]
    assert val(loss_contact(pred, Q)) == 0.0


def test_contact_loss_ignores_unflagged_offsets():
    pred = np.zeros((1, 2, 3))
    Q = np.array([[[5.0, 5.0, 5.0, 0.0], [0.0, 0.0, 0.0, 1.0]]])
    assert val(loss_contact(pred, Q)) == 0.0


def test_motion_loss_weights():
    assert val(loss_motion(0.0, 0.0, 0.0)) == 0.0
    assert val(loss_motion(2.0, 3.0, 10.0)) == 6.0
    assert val(loss_motion(2.0, 3.0, 10.0, (1.0, 1.0, 0.0))) == 5.0


def test_motion_loss_is_linear_combination():
    rng = np.random.default_rng(4)
    gt, pred = rng.normal(size=(3, 4, 3)), rng.normal(size=(3, 4, 3))
    Q = np.concatenate([rng.normal(size=(3, 4, 3)), rng.integers(0, 2, (3, 4, 1))], axis=-1)
    gr, gl = split_root_local(gt)
    pr, pl = split_root_local(pred)
    lr = np.sum((gr - pr) ** 2) / 3
    ll = np.sum((gl - pl) ** 2) / 9
    lc = np.sum(Q[..., 3] * np.sum((pred - Q[..., :3]) ** 2, axis=-1)) / 12
    total = loss_motion(loss_root(gr, pr), loss_local(gl, pl), loss_contact(pred, Q), (1.0, 1.0, 0.1))
    assert val(total) == pytest.approx(lr + ll + 0.1 * lc, rel=1e-13)


@pytest.mark.parametrize("fn,shape", [(loss_map, (2, 2, 2)), (loss_root, (2, 3)), (loss_local, (2, 2, 3))])
def test_loss_shape_mismatch(fn, shape):
    with pytest.raises(ShapeError):
        fn(np.zeros(shape), np.zeros((1,) + shape[1:]))


def test_losses_non_negative():
    rng = np.random.default_rng(5)
    for _ in range(10):
        a, b = rng.normal(size=(3, 4, 3)), rng.normal(size=(3, 4, 3))
        assert val(loss_local(a, b)) >= 0 and val(loss_map(a, b)) >= 0


# metrics -------------------------------------------------------------------

def test_horizon_frames():
    assert horizon_frames(60) == [14, 29, 44, 59]
    with pytest.raises(InvalidParameterError):
        horizon_frames(40)


def test_mpjpe_identical_is_zero():
    x = np.random.default_rng(6).normal(size=(60, 3))
    assert all(v == 0 for v in mpjpe_path(x, x).values())


def test_mpjpe_345_offset():
    x = np.random.default_rng(7).normal(size=(60, 16, 3))
    rep = mpjpe_pose(x, x + [3.0, 4.0, 0.0])
    assert set(rep) == {"0.5s", "1.0s", "1.5s", "2.0s", "mean"}
    for v in rep.values():
        assert v == pytest.approx(5000.0, rel=1e-12)


def test_mpjpe_mean_is_frame_average():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(60, 5, 3)), rng.normal(size=(60, 5, 3))
    frames = [np.mean([np.linalg.norm(a[t, j] - b[t, j]) for j in range(5)]) for t in range(60)]
    rep = mpjpe_pose(a, b)
    assert rep["mean"] == pytest.approx(1000 * np.mean(frames), rel=1e-12)
    assert rep["1.0s"] == pytest.approx(1000 * frames[29], rel=1e-12)


def test_per_frame_error_shape_mismatch():
    with pytest.raises(ShapeError):
        per_frame_error(np.zeros((3, 3)), np.zeros((4, 3)))


# config --------------------------------------------------------------------

def test_config_defaults():
    c = TrainConfig()
    assert (c.epochs, c.lr_contact, c.lr_motion) == (50, 0.0005, 0.001)
    assert c.lambdas == (1.0, 1.0, 0.1)
    assert (c.sigma, c.dct_l, c.epsilon, c.past, c.future) == (0.2, 20, 0.32, 30, 60)
    assert (c.sample_radius, c.sample_count) == (2.5, 5000)


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"lr_motion": -1.0}, {"lambda3": -0.1},
                                {"epsilon": 1.0}, {"dct_l": 100}])
def test_config_validation(kw):
    with pytest.raises(InvalidParameterError):
        TrainConfig(**kw)


def test_config_file_roundtrip(tmp_path):
    c = TrainConfig(epochs=3, sigma=0.25, seed=11)
    save_config(tmp_path / "c.cfg", c)
    assert load_config(tmp_path / "c.cfg") == c


def test_config_parse_comments_and_errors():
    kv = parse_kv("# header\nepochs = 4  # fewer\n\nsigma=0.3\n")
    assert config_from_kv(kv).epochs == 4
    with pytest.raises(ParseError):
        parse_kv("epochs 4\n")
    with pytest.raises(ParseError):
        config_from_kv({"nope": "1"})
    with pytest.raises(ParseError):
        config_from_kv({"epochs": "many"})


# data and training ---------------------------------------------------------

SMALL = TrainConfig(past=5, future=4, dct_l=6, sample_count=48, voxel_res=4, hidden=8,
                    mlp_layers=3, window_stride=6, epochs=2, seed=3)


@pytest.fixture(scope="module")
def samples():
    pairs = [generate_synthetic(SynthSpec(scene="corridor", motion="straight-walk", frames=20, seed=s))
             for s in range(2)]
    return prepare_samples(pairs, SMALL)


def test_windows():
    m = MotionSequence(np.zeros((20, 3, 3)))
    assert len(make_windows(m, 9, 6)) == 2


def test_prepare_samples(samples):
    assert len(samples) == 4
    s = samples[0]
    assert s.motion.shape == (9, 17, 3)
    assert s.maps.shape == (9, 17, len(s.scene))
    anchor = s.motion[4, 0]
    assert np.all(np.linalg.norm(s.scene - anchor, axis=1) <= SMALL.sample_radius)


def test_prepare_empty():
    with pytest.raises(InvalidInputError):
        prepare_samples([generate_synthetic(SynthSpec(frames=5))], SMALL)


def test_training_is_deterministic(samples, tmp_path):
    a = train_contact_stage(samples, SMALL, log_path=tmp_path / "a.log")
    b = train_contact_stage(samples, SMALL)
    assert ad.checkpoint_bytes(a.net.state_dict()) == ad.checkpoint_bytes(b.net.state_dict())
    assert len(a.epoch_losses) == 2 and a.steps == 8
    lines = (tmp_path / "a.log").read_text().splitlines()
    assert lines[0].startswith("epoch 0 loss ")


def test_motion_training_is_deterministic(samples):
    a = train_motion_stage(samples, SMALL)
    b = train_motion_stage(samples, SMALL)
    assert ad.checkpoint_bytes(a.net.state_dict()) == ad.checkpoint_bytes(b.net.state_dict())
    assert a.net.arch.future == 4


def test_motion_training_reduces_loss(samples):
    res = train_motion_stage(samples, TrainConfig(**{**SMALL.__dict__, "epochs": 8}))
    assert res.epoch_losses[-1] < res.epoch_losses[0]


def test_max_steps_and_accumulation(samples):
    cfg = TrainConfig(**{**SMALL.__dict__, "epochs": 5, "grad_accum": 2, "max_steps": 3})
    res = train_contact_stage(samples, cfg)
    assert res.steps == 3


def test_empty_dataset():
    with pytest.raises(InvalidInputError):
        train_contact_stage([], SMALL)
    with pytest.raises(InvalidInputError):
        train_motion_stage([], SMALL)


# evaluation ----------------------------------------------------------------

def test_evaluate_ground_truth_is_zero(samples):
    preds = [split_root_local(s.motion[SMALL.past:]) for s in samples]
    rep = evaluate(samples, None, None, SMALL, predictions=preds)
    assert all(v == 0 for v in rep.path.values()) and all(v == 0 for v in rep.pose.values())


def test_report_layout():
    rep = EvalReport({"0.5s": 1.0, "1.0s": 2.0, "1.5s": 3.0, "2.0s": 4.0, "mean": 2.5},
                     {"0.5s": 5.0, "1.0s": 6.0, "1.5s": 7.0, "2.0s": 8.0, "mean": 6.5}, 3)
    header, row = rep.to_csv().splitlines()
    assert header == ("method,path_0.5s,path_1.0s,path_1.5s,path_2.0s,path_mean,"
                      "pose_0.5s,pose_1.0s,pose_1.5s,pose_2.0s,pose_mean")
    assert row.split(",")[0] == "predicted" and float(row.split(",")[5]) == 2.5
    table = rep.to_table()
    assert "Path Error (mm)" in table and "Pose Error (mm)" in table


def test_evaluate_networks(samples):
    cn = train_contact_stage(samples, SMALL).net
    mn = train_motion_stage(samples, SMALL).net
    reps = [evaluate(samples, cn, mn, SMALL, mode=m) for m in ("predicted", "gt", "none")]
    for r in reps:
        assert is_finite_report(r)
        assert set(r.path) == {"mean"}  # 4 frames at 30 Hz reach no horizon
    threaded = evaluate(samples, cn, mn, TrainConfig(**{**SMALL.__dict__, "eval_workers": 2}))
    assert threaded.path == reps[0].path
