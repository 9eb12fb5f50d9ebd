from collections import Counter

import numpy as np
import pytest

from trajcurate import dataset, sim, synthgen
from trajcurate.sim import Instruction, SceneObject, SceneSpec
from trajcurate.synthgen import CorruptionMixture, CorruptionSpec


def make_scene():
    return SceneSpec(table_color=8, background_id="bg10", background_color=10,
                     lighting_gain=1.0,
                     objects=(SceneObject("circle", 1, 0.055, (0.40, 0.35)),
                              SceneObject("square", 3, 0.055, (0.62, 0.40)),
                              SceneObject("triangle", 4, 0.052, (0.24, 0.42))),
                     target_index=0, distractor_count=2)


def instr():
    return Instruction("pick_place", "circle", 1, "plate", "left")


# -- scene editing -------------------------------------------------------------


def test_edit_lighting_only():
    scene = make_scene()
    out = synthgen.edit_initial_scene(scene, {"lighting"}, np.random.default_rng(0))
    assert out.lighting_gain != scene.lighting_gain
    assert out.table_color == scene.table_color
    assert out.background_color == scene.background_color
    assert out.objects == scene.objects


def test_edit_target_object_preserves_footprint():
    scene = make_scene()
    out = synthgen.edit_initial_scene(scene, {"target_object"},
                                      np.random.default_rng(1))
    tgt_old, tgt_new = scene.objects[0], out.objects[0]
    assert tgt_new.position == tgt_old.position
    assert tgt_new.radius == tgt_old.radius
    assert out.objects[1:] == scene.objects[1:]


def test_edit_all_axes_preserves_structure():
    scene = make_scene()
    out = synthgen.edit_initial_scene(scene, synthgen.EDIT_AXES,
                                      np.random.default_rng(2))
    for a, b in zip(scene.objects, out.objects):
        assert a.position == b.position and a.radius == b.radius


def test_edit_empty_axes_rejected():
    with pytest.raises(ValueError):
        synthgen.edit_initial_scene(make_scene(), (), np.random.default_rng(0))


# -- restyle -------------------------------------------------------------------


def demo_episode(seed=0):
    return dataset.collect_demos(1, seed=seed)[0]


def test_restyle_identity_map_is_noop():
    ep = demo_episode()
    out = synthgen.restyle_video(ep, {})
    assert np.array_equal(out.frames, ep.frames)


def test_restyle_reuses_actions_and_instruction():
    ep = demo_episode()
    pal = synthgen.random_palette_map(ep.scene, np.random.default_rng(3))
    out = synthgen.restyle_video(ep, pal)
    assert np.array_equal(out.actions, ep.actions)
    assert np.array_equal(out.states, ep.states)
    assert out.instruction == ep.instruction


def test_restyle_keeps_robot_pixels():
    ep = demo_episode()
    pal = synthgen.random_palette_map(ep.scene, np.random.default_rng(4))
    out = synthgen.restyle_video(ep, pal)
    robot = sim.PALETTE[sim.ROBOT_COLOR_INDEX]
    before = np.all(ep.frames == robot, axis=-1)
    after = np.all(out.frames == robot, axis=-1)
    assert np.array_equal(before, after)
    assert np.array_equal(ep.frames[before], out.frames[after])


def test_restyle_rejects_robot_remap():
    ep = demo_episode()
    with pytest.raises(ValueError):
        synthgen.restyle_video(ep, {sim.ROBOT_COLOR_INDEX: 3})
    with pytest.raises(ValueError):
        synthgen.restyle_video(ep, {3: sim.ROBOT_COLOR_INDEX})


def test_restyled_actions_still_pass_oracle():
    ep = demo_episode(seed=6)
    pal = synthgen.random_palette_map(ep.scene, np.random.default_rng(5))
    out = synthgen.restyle_video(ep, pal)
    states = sim.rollout(out.scene, sim.initial_state(out.scene), out.actions)
    assert sim.task_success(out.scene, states, out.instruction)


# -- instruction proposal ---------------------------------------------------------


def test_propose_five_balances_hands():
    out = synthgen.propose_instructions(make_scene(), 5, np.random.default_rng(0))
    counts = Counter(i.hand for i in out)
    assert sorted(counts.values()) == [2, 3]
    assert len({(i.behavior, i.target_shape, i.target_color, i.placement, i.hand)
                for i in out}) == 5


def test_propose_two_one_per_hand():
    out = synthgen.propose_instructions(make_scene(), 2, np.random.default_rng(1))
    assert {i.hand for i in out} == {"left", "right"}


def test_propose_single_object_scene_targets_it():
    scene = SceneSpec(table_color=8, background_id="bg10", background_color=10,
                      lighting_gain=1.0,
                      objects=(SceneObject("circle", 1, 0.055, (0.40, 0.35)),),
                      target_index=0, distractor_count=0)
    out = synthgen.propose_instructions(scene, 4, np.random.default_rng(2))
    assert all(i.target_shape == "circle" and i.target_color == 1 for i in out)
    assert all(i.behavior != "stack" for i in out)


def test_propose_feasibility_and_errors():
    scene = make_scene()
    for i in synthgen.propose_instructions(scene, 8, np.random.default_rng(3)):
        assert dataset.instruction_feasible(scene, i)
    empty = SceneSpec(table_color=8, background_id="bg10", background_color=10,
                      lighting_gain=1.0, objects=(), target_index=0,
                      distractor_count=0)
    with pytest.raises(ValueError):
        synthgen.propose_instructions(empty, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        synthgen.propose_instructions(scene, 10_000, np.random.default_rng(0))


# -- corrupted generation ------------------------------------------------------------


def test_clean_generation_matches_expert_replay():
    scene = make_scene()
    spec = CorruptionSpec("none", 0.0, seed=1)
    sample = synthgen.generate_neural_video(scene, instr(), spec, seed=10)
    video = sim.replay(scene, sim.initial_state(scene), sample.hidden_actions)
    assert np.array_equal(sample.video, video)
    assert sample.exec_log["follows_requested"]


def test_generation_deterministic():
    scene = make_scene()
    spec = CorruptionSpec("tele_grab", 0.8, seed=2)
    a = synthgen.generate_neural_video(scene, instr(), spec, seed=11)
    b = synthgen.generate_neural_video(scene, instr(), spec, seed=11)
    assert np.array_equal(a.video, b.video)
    assert a.exec_log == b.exec_log


def test_tele_grab_shortens_and_creates_jump():
    scene = make_scene()
    clean = synthgen.generate_neural_video(scene, instr(),
                                           CorruptionSpec("none", 0.0, 3), seed=12)
    cut = synthgen.generate_neural_video(scene, instr(),
                                         CorruptionSpec("tele_grab", 1.0, 3), seed=12)
    assert len(cut.video) < len(clean.video)
    assert cut.exec_log["approach_jump"] > clean.exec_log["approach_jump"] * 2


def test_offset_grasp_records_gap():
    scene = make_scene()
    sample = synthgen.generate_neural_video(
        scene, instr(), CorruptionSpec("offset_grasp", 1.0, 4), seed=13)
    assert sample.exec_log["grasp_gap"] > sim.R_GRASP
    assert sample.exec_log["follows_requested"]


def test_object_drift_moves_free_object():
    scene = make_scene()
    sample = synthgen.generate_neural_video(
        scene, instr(), CorruptionSpec("object_drift", 1.0, 5), seed=14)
    assert sample.exec_log["free_drift"] > 0.005
    assert sample.exec_log["follows_requested"]


def test_temporal_jitter_zero_magnitude_is_clean():
    scene = make_scene()
    clean = synthgen.generate_neural_video(scene, instr(),
                                           CorruptionSpec("none", 0.0, 6), seed=15)
    jit0 = synthgen.generate_neural_video(
        scene, instr(), CorruptionSpec("temporal_jitter", 0.0, 6), seed=15)
    assert np.array_equal(clean.video, jit0.video)


def test_wrong_task_double_oracle():
    scene = make_scene()
    sample = synthgen.generate_neural_video(
        scene, instr(), CorruptionSpec("wrong_task", 0.5, 7), seed=16)
    assert not sample.exec_log["follows_requested"]
    assert sample.exec_log["follows_executed"]
    executed = Instruction.from_dict(sample.exec_log["executed_instruction"])
    assert (executed.behavior, executed.target_shape, executed.target_color,
            executed.placement) != (sample.instruction.behavior,
                                    sample.instruction.target_shape,
                                    sample.instruction.target_color,
                                    sample.instruction.placement)


# -- candidate sampling ----------------------------------------------------------------


def test_sample_candidates_n1_equals_generate():
    scene = make_scene()
    mixture = CorruptionMixture(weights={"none": 1.0})
    out = synthgen.sample_candidates(scene, instr(), 1, mixture, base_seed=20)
    direct = synthgen.generate_neural_video(
        scene, instr(), out[0].gt_corruption, seed=20)
    assert np.array_equal(out[0].video, direct.video)


def test_sample_candidates_clean_mixture_distinct_seeds():
    scene = make_scene()
    mixture = CorruptionMixture(weights={"none": 1.0})
    out = synthgen.sample_candidates(scene, instr(), 4, mixture, base_seed=30)
    assert [s.gt_corruption.kind for s in out] == ["none"] * 4
    assert len({s.seed for s in out}) == 4


def test_sample_candidates_deterministic():
    scene = make_scene()
    mixture = CorruptionMixture()
    a = synthgen.sample_candidates(scene, instr(), 4, mixture, base_seed=40)
    b = synthgen.sample_candidates(scene, instr(), 4, mixture, base_seed=40)
    for x, y in zip(a, b):
        assert np.array_equal(x.video, y.video)
        assert x.gt_corruption == y.gt_corruption


def test_mixture_frequencies():
    mixture = CorruptionMixture()
    rng = np.random.default_rng(0)
    kinds = Counter(mixture.draw(rng).kind for _ in range(1000))
    for kind, expected in mixture.weights.items():
        assert abs(kinds[kind] / 1000 - expected) < 0.05


# -- persistence ------------------------------------------------------------------------


def test_sample_episode_roundtrip(tmp_path):
    scene = make_scene()
    sample = synthgen.generate_neural_video(
        scene, instr(), CorruptionSpec("offset_grasp", 0.6, 8), seed=50)
    sample.idm_actions = np.zeros((len(sample.video) - 1, 6))
    sample.alignment_score = 0.25
    ep = synthgen.sample_to_episode(sample)
    assert ep.embodiment == "neural"
    assert np.all(ep.states == 0)
    dataset.write_episode(ep, tmp_path / "s.ntrj")
    back = synthgen.episode_to_sample(dataset.read_episode(tmp_path / "s.ntrj"))
    assert back.gt_corruption == sample.gt_corruption
    assert back.alignment_score == 0.25
    assert np.array_equal(back.video, sample.video)


def test_unlabeled_sample_rejected():
    scene = make_scene()
    sample = synthgen.generate_neural_video(
        scene, instr(), CorruptionSpec("none", 0.0, 9), seed=60)
    with pytest.raises(ValueError):
        synthgen.sample_to_episode(sample)
