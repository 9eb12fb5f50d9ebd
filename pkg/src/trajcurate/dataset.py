"""Scripted-expert demonstration collection and the on-disk episode format.

Demonstrations stand in for teleoperated data: a waypoint controller drives
one arm through approach / grasp / transport / release phases with seeded
jitter, and every collected episode is verified against the task-success
oracle before it is stored.

Episodes persist as one binary file each (magic "NTRJ") plus a JSON manifest
written last, so a dataset directory is either complete or visibly partial.
All numeric payloads are little-endian with explicit dims and dtype codes,
making the format bit-reproducible and language-neutral.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sim
from .seeding import derive_seed, rng_for
from .sim import (
    A_MAX,
    D_MIN_PUSH,
    Instruction,
    SceneDiversity,
    SceneSpec,
    WorldState,
)

MAGIC = b"NTRJ"
VERSION = 1

EMBODIMENT_REAL = "real"
EMBODIMENT_NEURAL = "neural"


class DatasetError(RuntimeError):
    pass


class InfeasibleInstruction(ValueError):
    pass


class ExpertFailure(RuntimeError):
    pass


@dataclass
class Episode:
    episode_id: int
    embodiment: str
    scene: SceneSpec
    instruction: Instruction
    frames: np.ndarray                 # (T, H, W, 3) uint8
    states: np.ndarray                 # (T, 6) float64
    actions: np.ndarray                # (T-1, 6) float64
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.uint8)
        self.states = np.ascontiguousarray(self.states, dtype=np.float64)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float64).reshape(-1, 6)
        t = len(self.frames)
        if len(self.states) != t or len(self.actions) != t - 1:
            raise ValueError("need len(states) == len(frames) == len(actions)+1")
        if self.embodiment not in (EMBODIMENT_REAL, EMBODIMENT_NEURAL):
            raise ValueError(f"unknown embodiment {self.embodiment!r}")
        if self.embodiment == EMBODIMENT_NEURAL and np.any(self.states != 0.0):
            raise ValueError("neural episodes carry zero proprioceptive states")


def episodes_equal(a: Episode, b: Episode) -> bool:
    return (a.episode_id == b.episode_id
            and a.embodiment == b.embodiment
            and a.scene == b.scene
            and a.instruction == b.instruction
            and np.array_equal(a.frames, b.frames)
            and np.array_equal(a.states, b.states)
            and np.array_equal(a.actions, b.actions)
            and a.provenance == b.provenance)


# -- instruction sampling -----------------------------------------------------------


def instruction_feasible(scene: SceneSpec, instruction: Instruction) -> bool:
    try:
        target = sim.find_target(scene, instruction)
    except ValueError:
        return False
    if instruction.behavior == "stack":
        return len(scene.objects) >= 2
    if instruction.behavior == "push":
        start = np.array(scene.objects[target].position)
        dist = float(np.hypot(*(sim.zone_center(instruction.placement) - start)))
        return dist >= D_MIN_PUSH + 0.05
    return True


def sample_instruction(scene: SceneSpec, rng: np.random.Generator,
                       diversity: SceneDiversity = SceneDiversity()) -> Instruction:
    for _ in range(100):
        behavior = str(rng.choice(diversity.behaviors))
        obj = scene.objects[int(rng.integers(len(scene.objects)))]
        instruction = Instruction(
            behavior=behavior,
            target_shape=obj.shape,
            target_color=obj.color,
            placement=str(rng.choice(diversity.placements)),
            hand=str(rng.choice(diversity.hands)),
        )
        if instruction_feasible(scene, instruction):
            return instruction
    raise InfeasibleInstruction("no feasible instruction found for scene")


# -- scripted expert ----------------------------------------------------------------


def _wrap(angle: np.ndarray) -> np.ndarray:
    return (angle + np.pi) % (2 * np.pi) - np.pi


class _Controller:
    """Single-arm waypoint controller that simulates as it emits actions."""

    def __init__(self, scene: SceneSpec, arm: int, rng: np.random.Generator,
                 speed: float):
        self.scene = scene
        self.arm = arm
        self.rng = rng
        self.speed = speed
        self.state = sim.initial_state(scene)
        self.actions: list[np.ndarray] = []

    def _emit(self, deltas: np.ndarray, grip: float) -> None:
        act = np.zeros(6)
        base = 0 if self.arm == 0 else 3
        act[base:base + 2] = deltas
        act[base + 2] = grip
        other = 3 - base
        act[other + 2] = self.state.gripper[1 - self.arm]   # idle arm holds
        self.state = sim.step(self.state, act)
        self.actions.append(act)

    def hold_grip(self) -> float:
        return float(self.state.gripper[self.arm])

    def move_to(self, point, tol: float = 0.015, max_steps: int = 140) -> None:
        point = np.asarray(point, dtype=float)
        for _ in range(max_steps):
            eff = sim.effector_position(self.state, self.arm)
            if float(np.hypot(*(eff - point))) <= tol:
                return
            tgt = np.array(sim.inverse_kinematics(point, self.arm))
            diff = _wrap(tgt - self.state.joints[self.arm])
            lim = A_MAX * self.speed
            deltas = np.clip(diff, -lim, lim) + self.rng.normal(0.0, 0.002, size=2)
            self._emit(np.clip(deltas, -A_MAX, A_MAX), self.hold_grip())
        raise ExpertFailure(f"waypoint {point} not reached")

    def set_grip(self, value: float, steps: int = 3) -> None:
        for _ in range(steps):
            self._emit(np.zeros(2), value)

    def dwell(self, steps: int) -> None:
        for _ in range(steps):
            self._emit(np.zeros(2), self.hold_grip())


def scripted_expert(scene: SceneSpec, instruction: Instruction, seed: int,
                    speed_range: tuple[float, float] = (0.16, 0.27)) -> np.ndarray:
    """Action sequence whose rollout satisfies the task-success oracle.

    Raises InfeasibleInstruction when the target is absent (or stack/push
    geometry is impossible) and ExpertFailure when control does not converge,
    so callers can retry with a fresh seed.
    """
    if not instruction_feasible(scene, instruction):
        raise InfeasibleInstruction(instruction.text())
    rng = np.random.default_rng(seed)
    target = sim.find_target(scene, instruction)
    arm = 0 if instruction.hand == "left" else 1
    ctl = _Controller(scene, arm, rng, speed=float(rng.uniform(*speed_range)))

    obj_pos = np.array(scene.objects[target].position)
    jitter = lambda s: rng.normal(0.0, s, size=2)

    if instruction.behavior == "push":
        goal = sim.zone_center(instruction.placement) + jitter(0.012)
        direction = goal - obj_pos
        direction = direction / max(float(np.hypot(*direction)), 1e-9)
        ctl.move_to(obj_pos - 0.11 * direction, tol=0.03)
        ctl.move_to(obj_pos, tol=0.012)
        ctl.set_grip(1.0)
        if ctl.state.attachment[arm] != target:
            raise ExpertFailure("grasp missed")
        ctl.move_to(goal, tol=0.02)
        ctl.set_grip(0.0)
    else:
        if instruction.behavior == "pick_place":
            goal = sim.zone_center(instruction.placement) + jitter(0.015)
        else:  # stack
            base = sim.stack_base_index(scene, target, instruction.placement)
            goal = np.array(scene.objects[base].position) + jitter(0.008)
        ctl.move_to(obj_pos, tol=0.012)
        ctl.set_grip(1.0)
        if ctl.state.attachment[arm] != target:
            raise ExpertFailure("grasp missed")
        mid = (sim.effector_position(ctl.state, arm) + goal) / 2.0
        perp = np.array([-(goal - obj_pos)[1], (goal - obj_pos)[0]])
        norm = float(np.hypot(*perp))
        if norm > 1e-9:
            mid = mid + perp / norm * 0.07
        ctl.move_to(mid, tol=0.05)
        ctl.move_to(goal, tol=0.02)
        ctl.set_grip(0.0)

    retreat = np.array([sim.ARM_BASES[arm][0], 0.18])
    ctl.move_to(retreat, tol=0.08)
    ctl.dwell(4)

    states = sim.rollout(scene, sim.initial_state(scene), ctl.actions)
    if not sim.task_success(scene, states, instruction):
        raise ExpertFailure("rollout does not satisfy the task oracle")
    return np.stack(ctl.actions)


def collect_demos(n: int, diversity: SceneDiversity = SceneDiversity(),
                  seed: int = 0, resolution: int = sim.DEFAULT_RESOLUTION,
                  max_attempts: int = 12, min_frames: int = 81) -> list[Episode]:
    """n verified expert episodes over randomized scenes and instructions.

    Episodes shorter than min_frames are re-drawn so every demonstration
    yields at least two clip windows for pair construction downstream.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    episodes = []
    for i in range(n):
        episode = None
        for attempt in range(max_attempts):
            rng = rng_for(seed, "demo", i, attempt)
            scene = sim.sample_scene(rng, diversity)
            try:
                instruction = sample_instruction(scene, rng, diversity)
                expert_seed = derive_seed(seed, "expert", i, attempt)
                actions = scripted_expert(scene, instruction, expert_seed)
            except (InfeasibleInstruction, ExpertFailure):
                continue
            if len(actions) + 1 < min_frames:
                continue
            states = sim.rollout(scene, sim.initial_state(scene), actions)
            frames = np.stack([sim.render(scene, s, resolution) for s in states])
            episode = Episode(
                episode_id=i,
                embodiment=EMBODIMENT_REAL,
                scene=scene,
                instruction=instruction,
                frames=frames,
                states=np.stack([s.proprio() for s in states]),
                actions=actions,
                provenance={"expert_seed": expert_seed, "attempt": attempt},
            )
            break
        if episode is None:
            raise ExpertFailure(f"could not collect episode {i} in {max_attempts} attempts")
        episodes.append(episode)
    return episodes


# -- binary serialization -------------------------------------------------------------

_DTYPE_U8, _DTYPE_F64, _DTYPE_I64, _DTYPE_JSON = 0, 1, 2, 3


def _canon_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _write_section(f, name: str, kind: int, payload: bytes, dims: tuple[int, ...]):
    encoded = name.encode()
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", kind))
    f.write(struct.pack("<I", len(dims)))
    f.write(struct.pack(f"<{len(dims)}Q", *dims))
    f.write(payload)


def write_episode(episode: Episode, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"episode_id": int(episode.episode_id), "embodiment": episode.embodiment}
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        hdr = _canon_json(header)
        _write_section(f, "header", _DTYPE_JSON, hdr, (len(hdr),))
        scn = _canon_json(episode.scene.to_dict())
        _write_section(f, "scene", _DTYPE_JSON, scn, (len(scn),))
        ins = _canon_json(episode.instruction.to_dict())
        _write_section(f, "instruction", _DTYPE_JSON, ins, (len(ins),))
        _write_section(f, "states", _DTYPE_F64,
                       episode.states.astype("<f8").tobytes(), episode.states.shape)
        _write_section(f, "actions", _DTYPE_F64,
                       episode.actions.astype("<f8").tobytes(), episode.actions.shape)
        _write_section(f, "frames", _DTYPE_U8,
                       episode.frames.tobytes(), episode.frames.shape)
        prov = _canon_json(episode.provenance)
        _write_section(f, "provenance", _DTYPE_JSON, prov, (len(prov),))


_ITEM_SIZE = {_DTYPE_U8: 1, _DTYPE_F64: 8, _DTYPE_I64: 8, _DTYPE_JSON: 1}
_NP_DTYPE = {_DTYPE_U8: np.uint8, _DTYPE_F64: "<f8", _DTYPE_I64: "<i8"}


def read_episode(path) -> Episode:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DatasetError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    pos = 6
    sections: dict[str, object] = {}
    while pos < len(raw):
        try:
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            if len(raw) - pos < name_len:
                raise struct.error("short name")
            name = raw[pos:pos + name_len].decode()
            pos += name_len
            (kind,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            nbytes = int(np.prod(dims)) * _ITEM_SIZE[kind] if rank else 0
            payload = raw[pos:pos + nbytes]
            if len(payload) < nbytes:
                raise struct.error("short payload")
            pos += nbytes
        except (struct.error, KeyError) as exc:
            raise DatasetError(f"{path}: truncated or corrupt section ({exc})") from exc
        if kind == _DTYPE_JSON:
            sections[name] = json.loads(payload.decode())
        else:
            sections[name] = np.frombuffer(payload, dtype=_NP_DTYPE[kind]).reshape(dims)
    try:
        header = sections["header"]
        return Episode(
            episode_id=int(header["episode_id"]),
            embodiment=header["embodiment"],
            scene=SceneSpec.from_dict(sections["scene"]),
            instruction=Instruction.from_dict(sections["instruction"]),
            frames=np.array(sections["frames"], dtype=np.uint8),
            states=np.array(sections["states"], dtype=np.float64),
            actions=np.array(sections["actions"], dtype=np.float64),
            provenance=sections["provenance"],
        )
    except KeyError as exc:
        raise DatasetError(f"{path}: missing section {exc}") from exc


def episode_filename(episode_id: int) -> str:
    return f"ep_{episode_id:08d}.ntrj"


def save_dataset(episodes: list[Episode], path, name: str = "dataset",
                 seed: int = 0) -> None:
    """Write episode files first, manifest last (the commit point)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ids = []
    for episode in episodes:
        write_episode(episode, path / episode_filename(episode.episode_id))
        ids.append(int(episode.episode_id))
    manifest = {"name": name, "seed": int(seed), "count": len(ids),
                "episode_ids": ids}
    (path / "manifest.json").write_bytes(_canon_json(manifest))


def load_dataset(path) -> list[Episode]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{path}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    ids = manifest["episode_ids"]
    if manifest["count"] != len(ids):
        raise DatasetError(f"{path}: manifest count {manifest['count']} != "
                           f"{len(ids)} listed episodes")
    episodes = []
    for eid in ids:
        ep_path = path / episode_filename(eid)
        if not ep_path.exists():
            raise DatasetError(f"{path}: manifest lists missing episode {eid}")
        episodes.append(read_episode(ep_path))
    return episodes
