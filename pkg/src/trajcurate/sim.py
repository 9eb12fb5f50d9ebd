"""Deterministic 2D bimanual manipulation world.

Two planar 2-link arms over a unit-square table, kinematic grasp physics
(attached objects track the effector exactly, nothing else moves), and a
palette-based rasterizer. Everything is a pure function of its inputs, so
replays are byte-reproducible: the same (scene, initial state, actions,
resolution) always yields the identical video.

Conventions: world x grows right, world y grows up; frames are row-major RGB
with the origin at the top-left. Actions are 6-vectors
[dL1, dL2, gripL, dR1, dR2, gripR]: joint deltas are clipped to +-A_MAX,
gripper commands are absolute in [0, 1] with >= 0.5 meaning closed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

# -- world constants -------------------------------------------------------------

A_MAX = 0.15                  # rad per step, per joint
R_GRASP = 0.05                # table-widths
R_STACK = 0.08
D_MIN_PUSH = 0.12
ARM_BASES = ((0.35, 0.0), (0.65, 0.0))
LINK_LENGTHS = (0.55, 0.55)
WORLD_LO, WORLD_HI = -0.25, 1.25          # rendered world window
DEFAULT_RESOLUTION = 64

# 16-color palette; index 0 is the robot color and is reserved: scene elements
# never use it, which is what makes "recolor everything except the robot"
# operations exactly checkable at the pixel level.
PALETTE = np.array([
    (250, 60, 240),    # 0 robot (reserved)
    (200, 60, 60),     # 1 red
    (60, 160, 60),     # 2 green
    (70, 90, 200),     # 3 blue
    (220, 180, 60),    # 4 yellow
    (150, 90, 40),     # 5 brown
    (90, 200, 200),    # 6 cyan
    (160, 60, 160),    # 7 purple
    (120, 120, 120),   # 8 gray
    (230, 230, 230),   # 9 off-white
    (40, 40, 80),      # 10 navy
    (240, 140, 40),    # 11 orange
    (120, 200, 90),    # 12 light green
    (170, 170, 110),   # 13 zone: left
    (110, 170, 170),   # 14 zone: right
    (190, 150, 150),   # 15 zone: plate
], dtype=np.uint8)

ROBOT_COLOR_INDEX = 0
SCENE_COLOR_INDICES = tuple(range(1, 13))
ZONE_COLOR_INDEX = {"left": 13, "right": 14, "plate": 15}

ZONES = {
    "left": (0.06, 0.60, 0.30, 0.88),     # (x0, y0, x1, y1)
    "right": (0.70, 0.60, 0.94, 0.88),
    "plate": (0.38, 0.62, 0.62, 0.86),
}

SHAPES = ("circle", "square", "triangle")
BEHAVIORS = ("pick_place", "push", "stack")
PLACEMENTS = ("left", "right", "plate")
HANDS = ("left", "right")

EFFECTOR_RADIUS_CLOSED = 0.06
EFFECTOR_RADIUS_OPEN = 0.012
ARM_THICKNESS = 0.022


class Behavior(str, Enum):
    pick_place = "pick_place"
    push = "push"
    stack = "stack"


@dataclass(frozen=True)
class Instruction:
    """Structured task command over the four task axes."""
    behavior: str
    target_shape: str
    target_color: int            # palette index
    placement: str
    hand: str

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"unknown behavior {self.behavior!r}")
        if self.target_shape not in SHAPES:
            raise ValueError(f"unknown shape {self.target_shape!r}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.hand not in HANDS:
            raise ValueError(f"unknown hand {self.hand!r}")

    def to_dict(self) -> dict:
        return {"behavior": self.behavior, "target_shape": self.target_shape,
                "target_color": int(self.target_color), "placement": self.placement,
                "hand": self.hand}

    @classmethod
    def from_dict(cls, d: dict) -> "Instruction":
        return cls(d["behavior"], d["target_shape"], int(d["target_color"]),
                   d["placement"], d["hand"])

    def text(self) -> str:
        return (f"use the {self.hand} hand to {self.behavior} the "
                f"{self.target_shape} of color {self.target_color} "
                f"to the {self.placement} zone")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: int                   # palette index, never ROBOT_COLOR_INDEX
    radius: float
    position: tuple[float, float]

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": int(self.color),
                "radius": float(self.radius),
                "position": [float(self.position[0]), float(self.position[1])]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(d["shape"], int(d["color"]), float(d["radius"]),
                   (float(d["position"][0]), float(d["position"][1])))


@dataclass(frozen=True)
class SceneSpec:
    table_color: int
    background_id: str
    background_color: int
    lighting_gain: float
    objects: tuple[SceneObject, ...]
    target_index: int
    distractor_count: int

    def __post_init__(self):
        if not (0.5 <= self.lighting_gain <= 1.5):
            raise ValueError("lighting_gain outside [0.5, 1.5]")
        if self.objects and not (0 <= self.target_index < len(self.objects)):
            raise ValueError("target_index out of range")
        for obj in self.objects:
            if obj.color == ROBOT_COLOR_INDEX:
                raise ValueError("robot color is reserved")

    def to_dict(self) -> dict:
        return {"table_color": int(self.table_color),
                "background_id": self.background_id,
                "background_color": int(self.background_color),
                "lighting_gain": float(self.lighting_gain),
                "objects": [o.to_dict() for o in self.objects],
                "target_index": int(self.target_index),
                "distractor_count": int(self.distractor_count)}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(int(d["table_color"]), d["background_id"],
                   int(d["background_color"]), float(d["lighting_gain"]),
                   tuple(SceneObject.from_dict(o) for o in d["objects"]),
                   int(d["target_index"]), int(d["distractor_count"]))


@dataclass(frozen=True)
class WorldState:
    joints: np.ndarray           # (2, 2) radians
    gripper: np.ndarray          # (2,) in [0, 1], >= 0.5 closed
    object_poses: np.ndarray     # (n, 2)
    attachment: tuple[int | None, int | None]   # object id per arm

    def copy(self) -> "WorldState":
        return WorldState(self.joints.copy(), self.gripper.copy(),
                          self.object_poses.copy(), self.attachment)

    def proprio(self) -> np.ndarray:
        """6-dim proprioceptive vector: four joint angles then two grippers."""
        return np.concatenate([self.joints.reshape(-1), self.gripper])


# -- kinematics -------------------------------------------------------------------

def forward_kinematics(joints, link_lengths=LINK_LENGTHS, base=(0.0, 0.0)):
    """Planar 2-link FK: base + l1*(cos t1, sin t1) + l2*(cos(t1+t2), sin(t1+t2))."""
    t1, t2 = float(joints[0]), float(joints[1])
    l1, l2 = link_lengths
    if l1 <= 0 or l2 <= 0:
        raise ValueError("link lengths must be positive")
    x = base[0] + l1 * math.cos(t1) + l2 * math.cos(t1 + t2)
    y = base[1] + l1 * math.sin(t1) + l2 * math.sin(t1 + t2)
    return np.array([x, y])


def arm_points(state: WorldState, arm: int):
    """(base, elbow, effector) for one arm."""
    base = np.array(ARM_BASES[arm])
    t1, t2 = state.joints[arm]
    l1, l2 = LINK_LENGTHS
    elbow = base + l1 * np.array([math.cos(t1), math.sin(t1)])
    eff = elbow + l2 * np.array([math.cos(t1 + t2), math.sin(t1 + t2)])
    return base, elbow, eff


def effector_position(state: WorldState, arm: int) -> np.ndarray:
    return arm_points(state, arm)[2]


def inverse_kinematics(target, arm: int) -> tuple[float, float]:
    """Analytic planar IK; unreachable targets are clamped to the reach circle."""
    base = np.array(ARM_BASES[arm])
    l1, l2 = LINK_LENGTHS
    d = np.asarray(target, dtype=float) - base
    r = float(np.hypot(d[0], d[1]))
    r = min(max(r, 1e-9), l1 + l2 - 1e-9)
    cos_t2 = (r * r - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    cos_t2 = min(1.0, max(-1.0, cos_t2))
    # elbow bends outward: left arm positive, right arm negative
    t2 = math.acos(cos_t2) * (1.0 if arm == 0 else -1.0)
    t1 = math.atan2(d[1], d[0]) - math.atan2(l2 * math.sin(t2), l1 + l2 * math.cos(t2))
    return t1, t2


def initial_state(scene: SceneSpec) -> WorldState:
    joints = np.array([inverse_kinematics((0.16, 0.30), 0),
                       inverse_kinematics((0.84, 0.30), 1)])
    poses = np.array([o.position for o in scene.objects], dtype=float).reshape(-1, 2)
    return WorldState(joints, np.zeros(2), poses, (None, None))


def step(state: WorldState, action, a_max: float = A_MAX,
         r_grasp: float = R_GRASP) -> WorldState:
    """Advance one tick. Inputs are clipped, never rejected."""
    act = np.asarray(action, dtype=float).reshape(6)
    if not np.all(np.isfinite(act)):
        raise ValueError("action must be finite")
    deltas = np.clip(act[[0, 1, 3, 4]], -a_max, a_max).reshape(2, 2)
    grip_cmd = np.clip(act[[2, 5]], 0.0, 1.0)

    joints = state.joints + deltas
    prev_grip = state.gripper
    poses = state.object_poses.copy()
    attachment = list(state.attachment)

    tmp = WorldState(joints, grip_cmd, poses, state.attachment)

    # release first: an opening gripper leaves its object in place
    for arm in range(2):
        if prev_grip[arm] >= 0.5 and grip_cmd[arm] < 0.5 and attachment[arm] is not None:
            attachment[arm] = None

    # attached objects track the effector exactly
    for arm in range(2):
        if attachment[arm] is not None:
            poses[attachment[arm]] = effector_position(tmp, arm)

    # grasp on a closing edge; lower arm index wins a simultaneous grab
    for arm in range(2):
        if prev_grip[arm] < 0.5 <= grip_cmd[arm] and attachment[arm] is None:
            eff = effector_position(tmp, arm)
            best, best_d = None, r_grasp
            for i in range(len(poses)):
                if i in attachment:
                    continue
                dist = float(np.hypot(*(poses[i] - eff)))
                if dist <= best_d:
                    best, best_d = i, dist
            if best is not None:
                attachment[arm] = best
                poses[best] = eff

    return WorldState(joints, grip_cmd, poses, (attachment[0], attachment[1]))


def rollout(scene: SceneSpec, init: WorldState, actions) -> list[WorldState]:
    states = [init.copy()]
    for act in actions:
        states.append(step(states[-1], act))
    return states


# -- rendering --------------------------------------------------------------------

_GRIDS: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _grid(resolution: int):
    cached = _GRIDS.get(resolution)
    if cached is None:
        px = (np.arange(resolution) + 0.5) / resolution
        xs = WORLD_LO + px * (WORLD_HI - WORLD_LO)
        ys = WORLD_HI - px * (WORLD_HI - WORLD_LO)       # row 0 is the top
        gx, gy = np.meshgrid(xs, ys)
        cached = (gx, gy)
        _GRIDS[resolution] = cached
    return cached


def background_value(color_index: int, gain: float) -> np.ndarray:
    """Rendered background RGB: palette color scaled by lighting gain, clamped."""
    return np.clip(np.round(PALETTE[color_index].astype(np.float64) * gain),
                   0, 255).astype(np.uint8)


def _rect_mask(gx, gy, rect):
    x0, y0, x1, y1 = rect
    return (gx >= x0) & (gx <= x1) & (gy >= y0) & (gy <= y1)


def _object_mask(gx, gy, obj: SceneObject, position):
    dx = gx - position[0]
    dy = gy - position[1]
    r = obj.radius
    if obj.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    # upward triangle: apex at +r, base at -0.8r
    return (dy >= -0.8 * r) & (dy <= r) & (np.abs(dx) <= 0.6 * (r - dy))


def _segment_mask(gx, gy, p0, p1, width):
    vx, vy = p1[0] - p0[0], p1[1] - p0[1]
    seg2 = vx * vx + vy * vy
    if seg2 < 1e-18:
        return (gx - p0[0]) ** 2 + (gy - p0[1]) ** 2 <= width * width
    t = np.clip(((gx - p0[0]) * vx + (gy - p0[1]) * vy) / seg2, 0.0, 1.0)
    dx = gx - (p0[0] + t * vx)
    dy = gy - (p0[1] + t * vy)
    return dx * dx + dy * dy <= width * width


def render(scene: SceneSpec, state: WorldState,
           resolution: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """Rasterize one frame: background, table, zones, objects, arms, grippers."""
    if resolution < 16:
        raise ValueError("resolution must be at least 16x16")
    gx, gy = _grid(resolution)
    img = np.empty((resolution, resolution, 3), dtype=np.uint8)
    img[:] = background_value(scene.background_color, scene.lighting_gain)

    img[_rect_mask(gx, gy, (0.0, 0.0, 1.0, 1.0))] = PALETTE[scene.table_color]
    for name, rect in ZONES.items():
        img[_rect_mask(gx, gy, rect)] = PALETTE[ZONE_COLOR_INDEX[name]]
    for i, obj in enumerate(scene.objects):
        img[_object_mask(gx, gy, obj, state.object_poses[i])] = PALETTE[obj.color]

    robot = PALETTE[ROBOT_COLOR_INDEX]
    for arm in range(2):
        base, elbow, eff = arm_points(state, arm)
        img[_segment_mask(gx, gy, base, elbow, ARM_THICKNESS)] = robot
        img[_segment_mask(gx, gy, elbow, eff, ARM_THICKNESS)] = robot
        r_eff = (EFFECTOR_RADIUS_CLOSED if state.gripper[arm] >= 0.5
                 else EFFECTOR_RADIUS_OPEN)
        img[(gx - eff[0]) ** 2 + (gy - eff[1]) ** 2 <= r_eff * r_eff] = robot
    return img


def replay(scene: SceneSpec, init: WorldState, actions,
           resolution: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """Video of len(actions)+1 frames; frame k shows the state after k steps."""
    states = rollout(scene, init, actions)
    return np.stack([render(scene, s, resolution) for s in states])


# -- task oracles -----------------------------------------------------------------

def find_target(scene: SceneSpec, instruction: Instruction) -> int:
    for i, obj in enumerate(scene.objects):
        if obj.shape == instruction.target_shape and obj.color == instruction.target_color:
            return i
    raise ValueError("instruction targets an object absent from the scene")


def zone_center(name: str) -> np.ndarray:
    x0, y0, x1, y1 = ZONES[name]
    return np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])


def in_zone(point, name: str) -> bool:
    x0, y0, x1, y1 = ZONES[name]
    return bool(x0 <= point[0] <= x1 and y0 <= point[1] <= y1)


def stack_base_index(scene: SceneSpec, target: int, placement: str) -> int:
    """Base object for stacking: the non-target object nearest the placement zone."""
    center = zone_center(placement)
    best, best_d = None, np.inf
    for i, obj in enumerate(scene.objects):
        if i == target:
            continue
        d = float(np.hypot(*(np.array(obj.position) - center)))
        if d < best_d:
            best, best_d = i, d
    if best is None:
        raise ValueError("stack requires a second object")
    return best


def task_success(scene: SceneSpec, states: list[WorldState],
                 instruction: Instruction) -> bool:
    if instruction.behavior not in BEHAVIORS:
        raise ValueError(f"unknown behavior {instruction.behavior!r}")
    target = find_target(scene, instruction)
    final = states[-1]
    attached = target in final.attachment
    pos = final.object_poses[target]

    if instruction.behavior == "pick_place":
        return in_zone(pos, instruction.placement) and not attached

    if instruction.behavior == "push":
        start = states[0].object_poses[target]
        toward = zone_center(instruction.placement) - start
        norm = float(np.hypot(*toward))
        if norm < 1e-9:
            return in_zone(pos, instruction.placement) and not attached
        moved = float((pos - start) @ (toward / norm))
        return moved >= D_MIN_PUSH and in_zone(pos, instruction.placement) and not attached

    base = stack_base_index(scene, target, instruction.placement)
    base_attached = base in final.attachment
    dist = float(np.hypot(*(pos - final.object_poses[base])))
    return dist <= R_STACK and not attached and not base_attached


# -- scene sampling ---------------------------------------------------------------

@dataclass(frozen=True)
class SceneDiversity:
    """Which appearance/task axes are randomized when sampling scenes."""
    table_colors: tuple[int, ...] = (5, 8, 9, 10)
    background_colors: tuple[int, ...] = (6, 8, 9, 10, 12)
    lighting_range: tuple[float, float] = (0.7, 1.3)
    object_count: tuple[int, int] = (2, 3)
    shapes: tuple[str, ...] = SHAPES
    behaviors: tuple[str, ...] = BEHAVIORS
    placements: tuple[str, ...] = PLACEMENTS
    hands: tuple[str, ...] = HANDS

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in self.__dict__.items()}


SPAWN_REGION = (0.12, 0.24, 0.88, 0.50)


def sample_scene(rng: np.random.Generator,
                 diversity: SceneDiversity = SceneDiversity()) -> SceneSpec:
    table = int(rng.choice(diversity.table_colors))
    bg_choices = [c for c in diversity.background_colors if c != table]
    bg = int(rng.choice(bg_choices))
    gain = float(rng.uniform(*diversity.lighting_range))
    n_obj = int(rng.integers(diversity.object_count[0], diversity.object_count[1] + 1))

    color_pool = [c for c in SCENE_COLOR_INDICES if c not in (table, bg)]
    colors = rng.choice(color_pool, size=n_obj, replace=False)
    objects = []
    positions: list[np.ndarray] = []
    x0, y0, x1, y1 = SPAWN_REGION
    for i in range(n_obj):
        radius = float(rng.uniform(0.048, 0.068))
        for _ in range(200):
            pos = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
            if all(np.hypot(*(pos - p)) > 0.17 for p in positions):
                break
        positions.append(pos)
        shape = str(rng.choice(diversity.shapes))
        objects.append(SceneObject(shape, int(colors[i]), radius,
                                   (float(pos[0]), float(pos[1]))))
    return SceneSpec(table_color=table, background_id=f"bg{bg}",
                     background_color=bg, lighting_gain=gain,
                     objects=tuple(objects), target_index=0,
                     distractor_count=n_obj - 1)


CANONICAL_TABLE = 8
CANONICAL_BACKGROUND = 10
CANONICAL_OBJECT_CYCLE = (1, 2, 3, 4, 11, 12)


def canonical_scene(scene: SceneSpec) -> SceneSpec:
    """Same geometry, fixed appearance: used for replay-side rendering."""
    objects = tuple(replace(o, color=CANONICAL_OBJECT_CYCLE[i % len(CANONICAL_OBJECT_CYCLE)])
                    for i, o in enumerate(scene.objects))
    return replace(scene, table_color=CANONICAL_TABLE,
                   background_id="canonical",
                   background_color=CANONICAL_BACKGROUND,
                   lighting_gain=1.0, objects=objects)


def scene_color_table(scene: SceneSpec) -> dict[str, tuple[int, int, int]]:
    """Exact rendered RGB per scene element (used by palette remapping)."""
    table: dict[str, tuple[int, int, int]] = {
        "background": tuple(int(v) for v in background_value(scene.background_color,
                                                             scene.lighting_gain)),
        "table": tuple(int(v) for v in PALETTE[scene.table_color]),
    }
    for name, idx in ZONE_COLOR_INDEX.items():
        table[f"zone:{name}"] = tuple(int(v) for v in PALETTE[idx])
    for i, obj in enumerate(scene.objects):
        table[f"object:{i}"] = tuple(int(v) for v in PALETTE[obj.color])
    return table
