import math

import numpy as np
import pytest

from trajcurate import sim
from trajcurate.sim import Instruction, SceneObject, SceneSpec, WorldState


def make_scene(objects, table=8, bg=10, gain=1.0):
    return SceneSpec(table_color=table, background_id=f"bg{bg}",
                     background_color=bg, lighting_gain=gain,
                     objects=tuple(objects), target_index=0,
                     distractor_count=max(len(objects) - 1, 0))


def two_object_scene():
    return make_scene([
        SceneObject("circle", 1, 0.055, (0.40, 0.35)),
        SceneObject("square", 3, 0.055, (0.62, 0.40)),
    ])


# -- forward kinematics -----------------------------------------------------------


def test_fk_straight_arm():
    assert np.allclose(sim.forward_kinematics((0.0, 0.0), (1.0, 1.0), (0.0, 0.0)),
                       [2.0, 0.0])


def test_fk_rotated():
    out = sim.forward_kinematics((math.pi / 2, 0.0), (1.0, 1.0), (0.0, 0.0))
    assert np.allclose(out, [0.0, 2.0], atol=1e-12)


def test_fk_bent_elbow():
    out = sim.forward_kinematics((math.pi / 4, math.pi / 4), (1.0, 1.0), (0.0, 0.0))
    expected = np.array([math.sqrt(2) / 2, math.sqrt(2) / 2 + 1.0])
    assert np.max(np.abs(out - expected)) < 1e-12


def test_fk_rejects_nonpositive_lengths():
    with pytest.raises(ValueError):
        sim.forward_kinematics((0.0, 0.0), (0.0, 1.0))


def test_ik_fk_roundtrip():
    rng = np.random.default_rng(0)
    for arm in (0, 1):
        base = np.array(sim.ARM_BASES[arm])
        for _ in range(50):
            target = base + rng.uniform(-0.9, 0.9, size=2)
            r = np.hypot(*(target - base))
            if not 0.05 < r < sum(sim.LINK_LENGTHS) - 0.02:
                continue
            joints = sim.inverse_kinematics(target, arm)
            eff = sim.forward_kinematics(joints, sim.LINK_LENGTHS, base)
            assert np.allclose(eff, target, atol=1e-9)


# -- stepping and grasping --------------------------------------------------------


def test_zero_action_is_identity():
    scene = two_object_scene()
    state = sim.initial_state(scene)
    nxt = sim.step(state, np.zeros(6))
    assert np.array_equal(nxt.joints, state.joints)
    assert np.array_equal(nxt.gripper, state.gripper)
    assert np.array_equal(nxt.object_poses, state.object_poses)
    assert nxt.attachment == state.attachment


def test_grasp_on_close_within_radius():
    scene = two_object_scene()
    state = sim.initial_state(scene)
    joints = np.array([sim.inverse_kinematics((0.40 + 0.01, 0.35), 0),
                       state.joints[1]])
    state = WorldState(joints, np.zeros(2), state.object_poses.copy(), (None, None))
    nxt = sim.step(state, np.array([0, 0, 1.0, 0, 0, 0]))
    assert nxt.attachment[0] == 0
    assert np.allclose(nxt.object_poses[0], sim.effector_position(nxt, 0))


def test_no_grasp_beyond_radius():
    scene = two_object_scene()
    state = sim.initial_state(scene)
    joints = np.array([sim.inverse_kinematics((0.40 + sim.R_GRASP + 0.02, 0.35), 0),
                       state.joints[1]])
    state = WorldState(joints, np.zeros(2), state.object_poses.copy(), (None, None))
    nxt = sim.step(state, np.array([0, 0, 1.0, 0, 0, 0]))
    assert nxt.attachment[0] is None


def test_simultaneous_grasp_lower_arm_wins():
    scene = make_scene([SceneObject("circle", 1, 0.055, (0.50, 0.40))])
    state = sim.initial_state(scene)
    joints = np.array([sim.inverse_kinematics((0.50, 0.40), 0),
                       sim.inverse_kinematics((0.50, 0.40), 1)])
    state = WorldState(joints, np.zeros(2), state.object_poses.copy(), (None, None))
    nxt = sim.step(state, np.array([0, 0, 1.0, 0, 0, 1.0]))
    assert nxt.attachment == (0, None)


def test_release_leaves_object_in_place():
    scene = two_object_scene()
    state = sim.initial_state(scene)
    joints = np.array([sim.inverse_kinematics((0.40, 0.35), 0), state.joints[1]])
    state = WorldState(joints, np.zeros(2), state.object_poses.copy(), (None, None))
    state = sim.step(state, np.array([0, 0, 1.0, 0, 0, 0]))
    state = sim.step(state, np.array([0.1, 0.05, 1.0, 0, 0, 0]))
    carried = state.object_poses[0].copy()
    released = sim.step(state, np.array([0.1, 0.0, 0.0, 0, 0, 0]))
    assert released.attachment[0] is None
    assert np.array_equal(released.object_poses[0], carried)


def test_attached_object_tracks_effector_exactly():
    scene = two_object_scene()
    state = sim.initial_state(scene)
    joints = np.array([sim.inverse_kinematics((0.40, 0.35), 0), state.joints[1]])
    state = WorldState(joints, np.zeros(2), state.object_poses.copy(), (None, None))
    state = sim.step(state, np.array([0, 0, 1.0, 0, 0, 0]))
    rng = np.random.default_rng(1)
    for _ in range(20):
        act = np.concatenate([rng.uniform(-0.1, 0.1, 2), [1.0],
                              rng.uniform(-0.1, 0.1, 2), [0.0]])
        state = sim.step(state, act)
        assert np.array_equal(state.object_poses[0], sim.effector_position(state, 0))


def test_action_clipping():
    scene = two_object_scene()
    state = sim.initial_state(scene)
    nxt = sim.step(state, np.array([10.0, -10.0, 0.0, 0.0, 0.0, 0.0]))
    assert np.allclose(nxt.joints[0] - state.joints[0], [sim.A_MAX, -sim.A_MAX])


# -- rendering ---------------------------------------------------------------------


def test_render_deterministic():
    scene = two_object_scene()
    state = sim.initial_state(scene)
    a = sim.render(scene, state, 64)
    b = sim.render(scene, state, 64)
    assert np.array_equal(a, b)


def test_render_empty_scene_colors():
    scene = make_scene([])
    state = sim.initial_state(scene)
    frame = sim.render(scene, state, 64)
    allowed = {tuple(sim.background_value(scene.background_color, 1.0)),
               tuple(sim.PALETTE[scene.table_color]),
               tuple(sim.PALETTE[sim.ROBOT_COLOR_INDEX])}
    allowed |= {tuple(sim.PALETTE[i]) for i in sim.ZONE_COLOR_INDEX.values()}
    seen = {tuple(px) for px in frame.reshape(-1, 3)}
    assert seen <= allowed


def test_lighting_gain_halves_background():
    objects = [SceneObject("circle", 1, 0.055, (0.40, 0.35))]
    bright = make_scene(objects, gain=1.0)
    state = sim.initial_state(bright)
    dim = make_scene(objects, gain=0.5)
    f1 = sim.render(bright, state, 64)
    f05 = sim.render(dim, state, 64)
    bg1 = sim.background_value(bright.background_color, 1.0)
    bg05 = sim.background_value(dim.background_color, 0.5)
    mask = np.all(f1 == bg1, axis=-1)
    assert mask.any()
    assert np.all(f05[mask] == bg05)
    assert np.array_equal(bg05, np.clip(np.round(bg1 * 0.5), 0, 255).astype(np.uint8))


def test_render_minimum_resolution():
    scene = two_object_scene()
    with pytest.raises(ValueError):
        sim.render(scene, sim.initial_state(scene), 8)


# -- replay ------------------------------------------------------------------------


def test_replay_empty_actions_single_frame():
    scene = two_object_scene()
    video = sim.replay(scene, sim.initial_state(scene), [])
    assert video.shape[0] == 1


def test_replay_deterministic_and_length_law():
    scene = two_object_scene()
    rng = np.random.default_rng(2)
    actions = rng.uniform(-0.1, 0.1, size=(17, 6))
    v1 = sim.replay(scene, sim.initial_state(scene), actions)
    v2 = sim.replay(scene, sim.initial_state(scene), actions)
    assert np.array_equal(v1, v2)
    assert len(v1) == len(actions) + 1


# -- task oracles ------------------------------------------------------------------


def test_task_success_requires_release():
    scene = two_object_scene()
    state = sim.initial_state(scene)
    instruction = Instruction("pick_place", "circle", 1, "plate", "left")
    joints = np.array([sim.inverse_kinematics((0.40, 0.35), 0), state.joints[1]])
    state = WorldState(joints, np.zeros(2), state.object_poses.copy(), (None, None))
    states = [state, sim.step(state, np.array([0, 0, 1.0, 0, 0, 0]))]
    target = sim.zone_center("plate")
    for _ in range(60):
        cur = sim.effector_position(states[-1], 0)
        tgt = np.array(sim.inverse_kinematics(target, 0))
        diff = (tgt - states[-1].joints[0] + np.pi) % (2 * np.pi) - np.pi
        act = np.zeros(6)
        act[:2] = np.clip(diff, -sim.A_MAX, sim.A_MAX)
        act[2] = 1.0
        states.append(sim.step(states[-1], act))
        if np.hypot(*(sim.effector_position(states[-1], 0) - target)) < 0.02:
            break
    # object now inside the plate zone but still attached -> no success
    assert sim.in_zone(states[-1].object_poses[0], "plate")
    assert not sim.task_success(scene, states, instruction)
    released = sim.step(states[-1], np.zeros(6))
    assert sim.task_success(scene, states + [released], instruction)


def test_task_success_nothing_moved():
    scene = two_object_scene()
    instruction = Instruction("pick_place", "circle", 1, "plate", "left")
    assert not sim.task_success(scene, [sim.initial_state(scene)], instruction)


def test_task_success_unknown_target():
    scene = two_object_scene()
    instruction = Instruction("pick_place", "triangle", 7, "plate", "left")
    with pytest.raises(ValueError):
        sim.task_success(scene, [sim.initial_state(scene)], instruction)


def test_canonical_scene_preserves_geometry():
    scene = two_object_scene()
    canon = sim.canonical_scene(scene)
    assert canon.lighting_gain == 1.0
    for a, b in zip(scene.objects, canon.objects):
        assert a.position == b.position and a.radius == b.radius and a.shape == b.shape


def test_scene_rejects_robot_color():
    with pytest.raises(ValueError):
        make_scene([SceneObject("circle", sim.ROBOT_COLOR_INDEX, 0.05, (0.4, 0.4))])
