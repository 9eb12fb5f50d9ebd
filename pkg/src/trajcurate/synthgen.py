"""Surrogate generation stage for synthetic manipulation videos.

Stands in for a learned video generator: scene-level appearance edits
(structure-preserving), action-preserving video restyling via exact palette
remaps, structured instruction proposal, and a "neural video" generator that
renders expert rollouts and then injects seeded, magnitude-controlled
physical corruptions. Each sample carries a hidden ground-truth corruption
label (for evaluation only) plus an execution log of measured physical
quantities (what a judge may legitimately look at).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import sim
from .dataset import (
    EMBODIMENT_NEURAL,
    Episode,
    ExpertFailure,
    InfeasibleInstruction,
    instruction_feasible,
    sample_instruction,
    scripted_expert,
)
from .seeding import derive_seed, rng_for
from .sim import Instruction, SceneSpec, WorldState

CORRUPTION_KINDS = ("none", "tele_grab", "offset_grasp", "object_drift",
                    "temporal_jitter", "wrong_task")
PHYSICAL_KINDS = ("tele_grab", "offset_grasp", "object_drift", "temporal_jitter")

EDIT_AXES = ("table", "target_object", "lighting", "background")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not (0.0 <= self.magnitude <= 1.0):
            raise ValueError("magnitude outside [0, 1]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "magnitude": float(self.magnitude),
                "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        return cls(d["kind"], float(d["magnitude"]), int(d["seed"]))


@dataclass(frozen=True)
class CorruptionMixture:
    """Sampling weights per corruption kind plus the magnitude range."""
    weights: dict[str, float] = field(default_factory=lambda: {
        "none": 0.6, "tele_grab": 0.1, "offset_grasp": 0.1,
        "object_drift": 0.1, "temporal_jitter": 0.1})
    magnitude_range: tuple[float, float] = (0.25, 1.0)

    def draw(self, rng: np.random.Generator) -> CorruptionSpec:
        kinds = sorted(self.weights)
        probs = np.array([self.weights[k] for k in kinds], dtype=float)
        probs = probs / probs.sum()
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        mag = 0.0 if kind == "none" else float(rng.uniform(*self.magnitude_range))
        return CorruptionSpec(kind, mag, seed=int(rng.integers(2**31)))


@dataclass
class NeuralSample:
    """Generated video + metadata. gt_corruption is hidden from curation:
    decisions read the candidate view (see curation module), never this field."""
    sample_id: int
    video: np.ndarray                      # (T, H, W, 3) uint8
    instruction: Instruction
    scene: SceneSpec
    gt_corruption: CorruptionSpec
    exec_log: dict
    seed: int
    idm_actions: np.ndarray | None = None  # (T-1, 6) once labeled
    alignment_score: float | None = None
    hidden_actions: np.ndarray | None = None   # clean expert actions, report-only

    def __post_init__(self):
        if self.idm_actions is not None and len(self.idm_actions) != len(self.video) - 1:
            raise ValueError("idm_actions must have T-1 rows")

    def initial_state(self) -> WorldState:
        return sim.initial_state(self.scene)


# -- scene editing (structure-preserving) -----------------------------------------------


def _pick_color(rng: np.random.Generator, exclude: set[int]) -> int:
    pool = [c for c in sim.SCENE_COLOR_INDICES if c not in exclude]
    return int(rng.choice(pool))


def edit_initial_scene(scene: SceneSpec, axes: Iterable[str],
                       rng: np.random.Generator) -> SceneSpec:
    """Appearance-only scene edit; object positions and radii never change."""
    axes = tuple(axes)
    if not axes:
        raise ValueError("need at least one edit axis")
    for axis in axes:
        if axis not in EDIT_AXES:
            raise ValueError(f"unknown edit axis {axis!r}")
    used = {scene.table_color, scene.background_color,
            *(o.color for o in scene.objects)}
    out = scene
    if "table" in axes:
        new = _pick_color(rng, used)
        used.discard(out.table_color)
        used.add(new)
        out = replace(out, table_color=new)
    if "background" in axes:
        new = _pick_color(rng, used)
        used.discard(out.background_color)
        used.add(new)
        out = replace(out, background_id=f"bg{new}", background_color=new)
    if "lighting" in axes:
        out = replace(out, lighting_gain=float(rng.uniform(0.5, 1.5)))
    if "target_object" in axes and out.objects:
        idx = out.target_index
        target = out.objects[idx]
        new_color = _pick_color(rng, used)
        new_shape = str(rng.choice(sim.SHAPES))
        objects = list(out.objects)
        objects[idx] = replace(target, color=new_color, shape=new_shape)
        out = replace(out, objects=tuple(objects))
    return out


# -- action-preserving restyle -----------------------------------------------------------


def apply_palette_map(scene: SceneSpec, palette_map: dict[int, int],
                      new_gain: float | None = None) -> SceneSpec:
    if sim.ROBOT_COLOR_INDEX in palette_map:
        raise ValueError("palette map must not remap the reserved robot color")
    if sim.ROBOT_COLOR_INDEX in palette_map.values():
        raise ValueError("palette map must not introduce the reserved robot color")
    remap = lambda c: palette_map.get(c, c)
    objects = tuple(replace(o, color=remap(o.color)) for o in scene.objects)
    gain = scene.lighting_gain if new_gain is None else float(new_gain)
    bg = remap(scene.background_color)
    return replace(scene, table_color=remap(scene.table_color),
                   background_id=f"bg{bg}", background_color=bg,
                   lighting_gain=gain, objects=objects)


def remap_frames(frames: np.ndarray, scene: SceneSpec,
                 palette_map: dict[int, int],
                 new_gain: float | None = None) -> tuple[np.ndarray, SceneSpec]:
    """Exact per-pixel recolor of non-robot pixels; returns (frames, new scene)."""
    new_scene = apply_palette_map(scene, palette_map, new_gain)
    old_colors = sim.scene_color_table(scene)
    new_colors = sim.scene_color_table(new_scene)
    robot = tuple(int(v) for v in sim.PALETTE[sim.ROBOT_COLOR_INDEX])
    value_map: dict[tuple, tuple] = {}
    for key in sorted(old_colors):
        src, dst = old_colors[key], new_colors[key]
        if src == robot or src in value_map:
            continue
        value_map[src] = dst
    out = frames.copy()
    for src, dst in value_map.items():
        if src == dst:
            continue
        mask = np.all(frames == np.array(src, dtype=np.uint8), axis=-1)
        out[mask] = np.array(dst, dtype=np.uint8)
    return out, new_scene


def restyle_video(episode: Episode, palette_map: dict[int, int],
                  new_gain: float | None = None) -> Episode:
    """Recolor a whole episode; actions, states and instruction are reused as-is."""
    frames, new_scene = remap_frames(episode.frames, episode.scene,
                                     palette_map, new_gain)
    return Episode(
        episode_id=episode.episode_id,
        embodiment=episode.embodiment,
        scene=new_scene,
        instruction=episode.instruction,
        frames=frames,
        states=episode.states.copy(),
        actions=episode.actions.copy(),
        provenance={**episode.provenance,
                    "restyle": {str(k): int(v) for k, v in palette_map.items()}},
    )


def random_palette_map(scene: SceneSpec, rng: np.random.Generator,
                       fixed: Iterable[int] = ()) -> dict[int, int]:
    """Injective recolor of the scene's palette entries, keeping `fixed` colors."""
    fixed = set(fixed)
    used = [c for c in dict.fromkeys(
        [scene.table_color, scene.background_color, *(o.color for o in scene.objects)])
        if c not in fixed]
    pool = [c for c in sim.SCENE_COLOR_INDICES if c not in fixed]
    targets = rng.choice(pool, size=len(used), replace=False)
    return {src: int(dst) for src, dst in zip(used, targets)}


# -- instruction proposal -----------------------------------------------------------------


def propose_instructions(scene: SceneSpec, k: int,
                         rng: np.random.Generator) -> list[Instruction]:
    """k distinct feasible instructions; hand assignments alternate so the
    left/right counts differ by at most one."""
    if k < 1:
        raise ValueError("need k >= 1")
    if not scene.objects:
        raise ValueError("scene has no objects")
    combos = []
    descriptors = sorted({(o.shape, o.color) for o in scene.objects})
    for behavior in sim.BEHAVIORS:
        for shape, color in descriptors:
            for placement in sim.PLACEMENTS:
                probe = Instruction(behavior, shape, color, placement, "left")
                if instruction_feasible(scene, probe):
                    combos.append((behavior, shape, color, placement))
    if k > 2 * len(combos):
        raise ValueError(f"k={k} exceeds {2 * len(combos)} feasible distinct instructions")
    order = list(rng.permutation(len(combos)))
    first_hand = int(rng.integers(2))
    out: list[Instruction] = []
    used: set[tuple] = set()
    for i in range(k):
        hand = sim.HANDS[(first_hand + i) % 2]
        for j in range(len(combos)):
            combo = combos[order[(i + j) % len(combos)]]
            if (combo, hand) not in used:
                used.add((combo, hand))
                behavior, shape, color, placement = combo
                out.append(Instruction(behavior, shape, color, placement, hand))
                break
    return out


# -- corrupted generation --------------------------------------------------------------------


def _attachment_frames(states: list[WorldState]) -> list[int]:
    return [i for i, s in enumerate(states) if any(a is not None for a in s.attachment)]


def _shift_object(state: WorldState, obj: int, delta: np.ndarray) -> WorldState:
    poses = state.object_poses.copy()
    poses[obj] = poses[obj] + delta
    return WorldState(state.joints.copy(), state.gripper.copy(), poses,
                      state.attachment)


def _corrupt_states(states: list[WorldState], target: int,
                    spec: CorruptionSpec,
                    protected: tuple[int, ...] = ()) -> list[WorldState]:
    rng = np.random.default_rng(spec.seed)
    m = spec.magnitude
    if spec.kind in ("none", "wrong_task"):
        return states

    attached = _attachment_frames(states)
    if spec.kind == "tele_grab":
        if not attached:
            return states
        g = attached[0]
        if g <= 2:
            return states
        k = min(g - 2, max(2, int(round(m * (g - 2)))))
        return states[:g - k] + states[g:]

    if spec.kind == "offset_grasp":
        if not attached:
            return states
        angle = rng.uniform(0, 2 * np.pi)
        dist = sim.R_GRASP * (1.2 + 1.8 * m)
        delta = dist * np.array([np.cos(angle), np.sin(angle)])
        out = list(states)
        for i in attached:
            if target in states[i].attachment:
                out[i] = _shift_object(states[i], target, delta)
        return out

    if spec.kind == "object_drift":
        # prefer drifting an uninvolved object so the instruction still reads
        # as accomplished and the failure is purely physical
        n_obj = len(states[0].object_poses)
        grabbed = {a for s in states for a in s.attachment if a is not None}
        avoid = grabbed | {target} | set(protected)
        candidates = [i for i in range(n_obj) if i not in avoid]
        drift_obj = candidates[0] if candidates else target
        release = attached[-1] + 1 if attached else 2
        if len(states) - release >= 8:
            window = (release, len(states))
        else:
            end = attached[0] - 1 if attached else len(states)
            window = (2, max(3, end))
        a, b = window
        span = b - a
        if span < 2:
            return states
        angle = rng.uniform(0, 2 * np.pi)
        total = (0.08 + 0.22 * m) * np.array([np.cos(angle), np.sin(angle)])
        out = list(states)
        for i in range(a, len(states)):
            ramp = min(1.0, (i - a + 1) / span)
            pos = states[i].object_poses[drift_obj] + ramp * total
            clamped = np.clip(pos, 0.05, 0.95) - states[i].object_poses[drift_obj]
            out[i] = _shift_object(states[i], drift_obj, clamped)
        return out

    if spec.kind == "temporal_jitter":
        n_events = int(round(m * 8))
        if n_events == 0:
            return states
        out = list(states)
        t = len(out)
        for _ in range(n_events):
            width = 2 + int(rng.integers(0, 3))
            if t <= width + 2:
                break
            i = int(rng.integers(1, t - width - 1))
            if rng.integers(2) == 0:
                out[i:i + width] = [out[i]] * width           # freeze
            else:
                out[i:i + width] = list(reversed(out[i:i + width]))
        return out

    raise AssertionError(spec.kind)


def measure_execution(scene: SceneSpec, states: list[WorldState],
                      requested: Instruction, executed: Instruction) -> dict:
    """Physical quantities measured on the final (possibly corrupted) state
    sequence. This is the only information judges are allowed to consume."""
    eff = np.array([[sim.effector_position(s, a) for a in range(2)] for s in states])
    eff_step = np.linalg.norm(np.diff(eff, axis=0), axis=-1)
    approach_jump = float(eff_step.max()) if len(eff_step) else 0.0
    second_diff = 0.0
    if len(eff) >= 3:
        dd = eff[2:] - 2 * eff[1:-1] + eff[:-2]
        second_diff = float(np.linalg.norm(dd, axis=-1).max())

    grasp_gap = 0.0
    free_drift = 0.0
    for i, state in enumerate(states):
        for arm, obj in enumerate(state.attachment):
            if obj is not None:
                gap = float(np.hypot(*(state.object_poses[obj]
                                       - sim.effector_position(state, arm))))
                grasp_gap = max(grasp_gap, gap)
        if i > 0:
            prev = states[i - 1]
            for obj in range(len(state.object_poses)):
                if obj in state.attachment or obj in prev.attachment:
                    continue
                moved = float(np.hypot(*(state.object_poses[obj]
                                         - prev.object_poses[obj])))
                free_drift = max(free_drift, moved)

    def success(instr: Instruction) -> bool:
        try:
            return sim.task_success(scene, states, instr)
        except ValueError:
            return False

    return {
        "approach_jump": approach_jump,
        "grasp_gap": grasp_gap,
        "free_drift": free_drift,
        "path_roughness": second_diff,
        "follows_requested": success(requested),
        "follows_executed": success(executed),
        "executed_instruction": executed.to_dict(),
        "final_frames": len(states),
    }


def generate_neural_video(scene: SceneSpec, instruction: Instruction,
                          corruption: CorruptionSpec, seed: int,
                          resolution: int = sim.DEFAULT_RESOLUTION,
                          sample_id: int = 0) -> NeuralSample:
    """Expert rollout + seeded corruption, rendered in the scene's own look."""
    if not instruction_feasible(scene, instruction):
        raise InfeasibleInstruction(instruction.text())
    executed = instruction
    if corruption.kind == "wrong_task":
        # the executed task must differ in what the success oracle can see
        # (behavior/target/placement), not merely in the acting hand
        rng = np.random.default_rng(derive_seed(seed, "wrong-task"))
        key = (instruction.behavior, instruction.target_shape,
               instruction.target_color, instruction.placement)
        for _ in range(50):
            candidate = sample_instruction(scene, rng)
            if (candidate.behavior, candidate.target_shape,
                    candidate.target_color, candidate.placement) != key:
                executed = candidate
                break

    actions = None
    for attempt in range(10):
        try:
            actions = scripted_expert(scene, executed,
                                      derive_seed(seed, "gen-expert", attempt))
            break
        except ExpertFailure:
            continue
    if actions is None:
        raise ExpertFailure("generator could not produce a base rollout")

    states = sim.rollout(scene, sim.initial_state(scene), actions)
    target = sim.find_target(scene, executed)
    protected = []
    if executed.behavior == "stack":
        protected.append(sim.stack_base_index(scene, target, executed.placement))
    corrupted = _corrupt_states(states, target, corruption, tuple(protected))
    frames = np.stack([sim.render(scene, s, resolution) for s in corrupted])
    log = measure_execution(scene, corrupted, instruction, executed)
    return NeuralSample(
        sample_id=sample_id,
        video=frames,
        instruction=instruction,
        scene=scene,
        gt_corruption=corruption,
        exec_log=log,
        seed=seed,
        hidden_actions=actions if corruption.kind == "none" else None,
    )


def sample_candidates(scene: SceneSpec, instruction: Instruction, n: int,
                      mixture: CorruptionMixture, base_seed: int,
                      resolution: int = sim.DEFAULT_RESOLUTION) -> list[NeuralSample]:
    """n candidates with consecutive seeds and independently drawn corruption."""
    if n < 1:
        raise ValueError("need n >= 1")
    out = []
    for i in range(n):
        seed = base_seed + i
        corruption = mixture.draw(rng_for(seed, "corruption"))
        out.append(generate_neural_video(scene, instruction, corruption, seed,
                                         resolution=resolution, sample_id=i))
    return out


# -- persistence --------------------------------------------------------------------------


def sample_to_episode(sample: NeuralSample) -> Episode:
    """Neural samples persist as episodes: zero proprio, IDM actions, hidden
    provenance (corruption label + execution log + scores)."""
    if sample.idm_actions is None:
        raise ValueError("label the sample before persisting it as an episode")
    t = len(sample.video)
    provenance = {
        "generator_seed": int(sample.seed),
        "corruption": sample.gt_corruption.to_dict(),
        "exec_log": sample.exec_log,
        "alignment_score": sample.alignment_score,
    }
    return Episode(
        episode_id=sample.sample_id,
        embodiment=EMBODIMENT_NEURAL,
        scene=sample.scene,
        instruction=sample.instruction,
        frames=sample.video,
        states=np.zeros((t, 6)),
        actions=sample.idm_actions,
        provenance=provenance,
    )


def episode_to_sample(episode: Episode) -> NeuralSample:
    prov = episode.provenance
    return NeuralSample(
        sample_id=episode.episode_id,
        video=episode.frames,
        instruction=episode.instruction,
        scene=episode.scene,
        gt_corruption=CorruptionSpec.from_dict(prov["corruption"]),
        exec_log=prov["exec_log"],
        seed=int(prov["generator_seed"]),
        idm_actions=episode.actions,
        alignment_score=prov.get("alignment_score"),
    )
