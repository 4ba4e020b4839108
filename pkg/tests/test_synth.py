import numpy as np
import pytest

from contact_forecast.errors import InvalidParameterError
from contact_forecast.geom import contact_sequence
from contact_forecast.synth import (BOX_TOP, JOINT_NAMES, MOTIONS, PARENTS, SCENES, SynthSpec,
                                    box_center, generate_synthetic, make_motion, make_scene,
                                    stance_frames)

L_ANKLE, R_ANKLE = JOINT_NAMES.index("l_ankle"), JOINT_NAMES.index("r_ankle")


def test_skeleton_tables():
    assert len(JOINT_NAMES) == len(PARENTS) == 17
    assert PARENTS[0] == -1 and all(p < j for j, p in enumerate(PARENTS) if j)


@pytest.mark.parametrize("scene", SCENES)
@pytest.mark.parametrize("motion", MOTIONS)
def test_generation_is_deterministic(scene, motion):
    spec = SynthSpec(scene=scene, motion=motion, frames=40, seed=5, density=50.0)
    (s1, m1), (s2, m2) = generate_synthetic(spec), generate_synthetic(spec)
    assert s1.points.tobytes() == s2.points.tobytes()
    assert m1.frames.tobytes() == m2.frames.tobytes()
    assert m1.frames.shape == (40, 17, 3) and np.all(np.isfinite(m1.frames))


def test_seeds_differ():
    a = make_motion("turn", 30, seed=1).frames
    b = make_motion("turn", 30, seed=2).frames
    assert not np.array_equal(a, b)


def test_straight_walk_root_monotone():
    for seed in range(5):
        r = make_motion("straight-walk", 120, seed=seed).roots
        assert np.all(np.diff(r[:, 0]) > 0)
        assert np.ptp(r[:, 1]) < 0.3 * np.ptp(r[:, 0])


@pytest.mark.parametrize("motion", MOTIONS)
def test_stance_feet_on_floor(motion):
    m = make_motion(motion, 150, seed=3)
    for j in (L_ANKLE, R_ANKLE):
        idx = stance_frames(m, j)
        assert idx.size > 10
        assert np.all(np.abs(m.frames[idx, j, 2]) < 0.02)


def test_stance_feet_are_in_contact():
    scene, m = generate_synthetic(SynthSpec(frames=90, seed=4))
    c = contact_sequence(m, scene)
    for j in (L_ANKLE, R_ANKLE):
        idx = stance_frames(m, j)
        assert np.all(c[idx, j].max(axis=1) > 0.32)


def test_sit_on_box_ends_seated():
    m = make_motion("sit-on-box", 240, seed=0)
    end = m.roots[-1]
    np.testing.assert_allclose(end[:2], box_center(), atol=1e-9)
    assert end[2] == pytest.approx(BOX_TOP + 0.1)


def test_scene_density_scales_points():
    a, b = len(make_scene("corridor", 25.0)), len(make_scene("corridor", 100.0))
    assert 3.0 < b / a < 5.0


@pytest.mark.parametrize("kw", [{"scene": "beach"}, {"motion": "dance"}, {"frames": 0},
                                {"density": -1.0}, {"noise": -0.1}])
def test_invalid_spec(kw):
    with pytest.raises(InvalidParameterError):
        SynthSpec(**kw)


def test_invalid_template_functions():
    with pytest.raises(InvalidParameterError):
        make_scene("beach")
    with pytest.raises(InvalidParameterError):
        make_motion("dance")


def test_noise_added():
    clean = make_motion("straight-walk", 20, seed=0).frames
    noisy = make_motion("straight-walk", 20, seed=0, noise=0.01).frames
    assert 0.005 < np.std(noisy - clean) < 0.02
