"""CraftWorld: a deterministic 2D stand-in for the Minecraft crafting tasks.

The world is an N x N grid of blocks seen from above.  The agent is a point
with a continuous position, a yaw (degrees, clockwise from north) and a pitch
(degrees, positive looks up).  Two tasks are supported:

``iron_pickaxe``
    The eleven-item chain log -> planks -> stick -> crafting_table ->
    wooden_pickaxe -> cobblestone -> furnace -> stone_pickaxe -> iron_ore ->
    iron_ingot -> iron_pickaxe.  Each item type is rewarded once per episode.
``treechop``
    Collect logs in a dense forest; +1 per log, solved at 64 logs.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from craftbench.encoding import encode_vector

logger = logging.getLogger(__name__)

TASKS = ("iron_pickaxe", "treechop")

CELL_NAMES = (
    "air",
    "tree",
    "stone",
    "iron_ore",
    "dirt",
    "placed_crafting_table",
    "placed_furnace",
)
AIR, TREE, STONE, IRON_ORE, DIRT, TABLE, FURNACE = range(7)
OUT_OF_BOUNDS = 7

MOVEMENT_FLAGS = ("forward", "backward", "left", "right", "jump", "sprint", "attack", "sneak")
ITEM_VERBS = ("craft", "nearby_craft", "nearby_smelt", "place", "equip")

# block -> (item dropped, minimum pickaxe tier)
HARVEST_RULES = {
    TREE: ("log", 0),
    DIRT: ("dirt", 0),
    STONE: ("cobblestone", 1),
    IRON_ORE: ("iron_ore", 2),
}
PICKAXE_TIER = {"none": 0, "wooden_pickaxe": 1, "stone_pickaxe": 2, "iron_pickaxe": 3}
PLACEABLE = {
    "crafting_table": TABLE,
    "furnace": FURNACE,
    "dirt": DIRT,
    "stone": STONE,
    "cobblestone": STONE,
}
NEARBY_BLOCK = {"nearby_craft": TABLE, "nearby_smelt": FURNACE}

FRAME_SIZE = 64
PIXELS_PER_CELL = 8
ANCHOR_ROW = 56  # agent sits one cell above the bottom edge, centred horizontally
PITCH_BAND_ROWS = 4

PALETTE = np.array(
    [
        (96, 160, 72),  # air (grass)
        (24, 84, 24),  # tree
        (128, 128, 128),  # stone
        (208, 144, 96),  # iron_ore
        (120, 84, 48),  # dirt
        (200, 168, 88),  # placed_crafting_table
        (56, 56, 64),  # placed_furnace
        (0, 0, 0),  # outside the map
    ],
    dtype=np.uint8,
)
AGENT_COLOR = np.array((255, 255, 255), dtype=np.uint8)


def _load_defaults() -> Dict[str, Any]:
    text = resources.files("craftbench.data").joinpath("world_defaults.json").read_text()
    data = json.loads(text)
    data.pop("_comment", None)
    return data


_DEFAULTS = _load_defaults()


class WorldGenerationError(RuntimeError):
    """Raised when a world satisfying the task constraints cannot be generated."""


class WorldConfig(BaseModel):
    """Generation and dynamics parameters shared by both tasks."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    grid_size: int = Field(32, ge=16, le=256)
    densities: Dict[str, float] = Field(
        default_factory=lambda: {"tree": 0.06, "stone": 0.12, "iron_ore": 0.15, "dirt": 0.02}
    )
    forest_density: float = 0.15
    harvest_hits: int = Field(4, ge=1)
    logs_per_tree: int = Field(4, ge=1)
    move_speed: float = Field(0.5, gt=0)
    pitch_limit: float = 45.0
    spawn_pitch_range: float = 60.0
    horizon: Dict[str, int] = Field(default_factory=lambda: {"iron_pickaxe": 2000, "treechop": 2000})
    treechop_goal: int = Field(64, ge=1)
    generation_attempts: int = Field(10, ge=1)
    reward_table: Dict[str, float] = Field(default_factory=lambda: dict(_DEFAULTS["reward_table"]))
    recipe_table: Dict[str, Dict[str, Any]] = Field(
        default_factory=lambda: json.loads(json.dumps(_DEFAULTS["recipe_table"]))
    )

    @field_validator("densities")
    @classmethod
    def _check_densities(cls, value: Dict[str, float]) -> Dict[str, float]:
        required = {"tree", "stone", "iron_ore", "dirt"}
        missing = required - set(value)
        if missing:
            raise ValueError(f"missing densities: {sorted(missing)}")
        extra = set(value) - required
        if extra:
            raise ValueError(f"unknown densities: {sorted(extra)}")
        for name, d in value.items():
            if not 0.0 < d <= 1.0:
                raise ValueError(f"density {name}={d} not in (0, 1]")
        return value

    @field_validator("forest_density")
    @classmethod
    def _check_forest(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError(f"forest_density={value} not in (0, 1]")
        return value

    @field_validator("horizon")
    @classmethod
    def _check_horizon(cls, value: Dict[str, int]) -> Dict[str, int]:
        if set(value) != set(TASKS):
            raise ValueError(f"horizon must define exactly {TASKS}")
        if min(value.values()) < 1:
            raise ValueError("horizon must be positive")
        return value

    @field_validator("recipe_table")
    @classmethod
    def _check_recipes(cls, value: Dict[str, Dict[str, Any]]) -> Dict[str, Dict[str, Any]]:
        for item, recipe in value.items():
            if recipe.get("verb") not in ("craft", "nearby_craft", "nearby_smelt"):
                raise ValueError(f"recipe {item}: bad verb {recipe.get('verb')!r}")
            if not isinstance(recipe.get("inputs"), dict) or int(recipe.get("output", 0)) < 1:
                raise ValueError(f"recipe {item}: needs inputs and a positive output")
        return value


@dataclass
class EnvAction:
    """One environment action: movement flags, camera deltas and an item verb."""

    forward: bool = False
    backward: bool = False
    left: bool = False
    right: bool = False
    jump: bool = False
    sprint: bool = False
    attack: bool = False
    sneak: bool = False
    yaw_delta: float = 0.0
    pitch_delta: float = 0.0
    item_verb: Optional[Tuple[str, str]] = None

    def flags(self) -> Tuple[bool, ...]:
        return tuple(bool(getattr(self, name)) for name in MOVEMENT_FLAGS)


@dataclass
class RawStep(EnvAction):
    """A recorded demonstration step: the action taken plus its outcome."""

    reward: float = 0.0
    done: bool = False

    def to_record(self) -> Dict[str, Any]:
        return {
            "flags": [int(f) for f in self.flags()],
            "yaw_delta": float(self.yaw_delta),
            "pitch_delta": float(self.pitch_delta),
            "verb": list(self.item_verb) if self.item_verb else None,
            "reward": float(self.reward),
            "done": bool(self.done),
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "RawStep":
        flags = record["flags"]
        if len(flags) != len(MOVEMENT_FLAGS):
            raise ValueError(f"expected {len(MOVEMENT_FLAGS)} flags, got {len(flags)}")
        verb = record.get("verb")
        return cls(
            **{name: bool(v) for name, v in zip(MOVEMENT_FLAGS, flags)},
            yaw_delta=float(record["yaw_delta"]),
            pitch_delta=float(record["pitch_delta"]),
            item_verb=tuple(verb) if verb else None,
            reward=float(record["reward"]),
            done=bool(record["done"]),
        )

    def action(self) -> EnvAction:
        return EnvAction(
            *self.flags(),
            yaw_delta=self.yaw_delta,
            pitch_delta=self.pitch_delta,
            item_verb=self.item_verb,
        )


@dataclass
class Observation:
    frame: np.ndarray  # (64, 64, 3) uint8
    vector: Optional[np.ndarray] = None  # (187,) float32, raw counts in the float slots


@dataclass
class World:
    task: str
    config: WorldConfig
    grid: np.ndarray  # (N, N) int8, indexed [x, y]
    logs: np.ndarray  # (N, N) int16, logs left in each tree cell
    pos: np.ndarray  # (2,) float64
    yaw: float
    pitch: float
    inventory: Dict[str, int] = field(default_factory=dict)
    mainhand: str = "none"
    step_count: int = 0
    rewarded_items: set = field(default_factory=set)
    logs_collected: int = 0
    harvest_cell: Optional[Tuple[int, int]] = None
    harvest_progress: int = 0
    done: bool = False
    seed: int = 0

    @property
    def horizon(self) -> int:
        return self.config.horizon[self.task]

    @property
    def success(self) -> bool:
        if self.task == "treechop":
            return self.logs_collected >= self.config.treechop_goal
        return self.inventory.get("iron_pickaxe", 0) > 0

    def heading(self) -> np.ndarray:
        rad = math.radians(self.yaw)
        return np.array([math.sin(rad), math.cos(rad)])

    def right_vector(self) -> np.ndarray:
        rad = math.radians(self.yaw)
        return np.array([math.cos(rad), -math.sin(rad)])

    def agent_cell(self) -> Tuple[int, int]:
        return int(math.floor(self.pos[0])), int(math.floor(self.pos[1]))

    def faced_cell(self) -> Tuple[int, int]:
        p = self.pos + self.heading()
        return int(math.floor(p[0])), int(math.floor(p[1]))

    def cell(self, xy: Tuple[int, int]) -> int:
        x, y = xy
        n = self.grid.shape[0]
        if 0 <= x < n and 0 <= y < n:
            return int(self.grid[x, y])
        return OUT_OF_BOUNDS

    def count(self, item: str) -> int:
        return self.inventory.get(item, 0)

    def copy(self) -> "World":
        return World(
            task=self.task,
            config=self.config,
            grid=self.grid.copy(),
            logs=self.logs.copy(),
            pos=self.pos.copy(),
            yaw=self.yaw,
            pitch=self.pitch,
            inventory=dict(self.inventory),
            mainhand=self.mainhand,
            step_count=self.step_count,
            rewarded_items=set(self.rewarded_items),
            logs_collected=self.logs_collected,
            harvest_cell=self.harvest_cell,
            harvest_progress=self.harvest_progress,
            done=self.done,
            seed=self.seed,
        )

    def observe(self) -> Observation:
        vector = None
        if self.task == "iron_pickaxe":
            vector = encode_vector(self.inventory, self.mainhand, None)
        return Observation(frame=render(self), vector=vector)


def episode_seed(base_seed: int, index: int) -> int:
    """Seed for the ``index``-th episode of a stream; stable when more episodes are added."""
    state = np.random.SeedSequence([base_seed & 0xFFFFFFFFFFFFFFFF, index]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def _hand_reachable(grid: np.ndarray, start: Tuple[int, int]) -> np.ndarray:
    """Cells reachable from ``start`` without a pickaxe (air, trees and dirt can be cleared)."""
    n = grid.shape[0]
    open_cells = (grid == AIR) | (grid == TREE) | (grid == DIRT)
    seen = np.zeros_like(open_cells)
    seen[start] = True
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if 0 <= nx < n and 0 <= ny < n and open_cells[nx, ny] and not seen[nx, ny]:
                seen[nx, ny] = True
                queue.append((nx, ny))
    return seen


def _generate_grid(task: str, rng: np.random.Generator, config: WorldConfig) -> np.ndarray:
    n = config.grid_size
    c = n // 2
    xs, ys = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    spawn_dist2 = (xs - c) ** 2 + (ys - c) ** 2
    clearing = spawn_dist2 <= 2
    grid = np.zeros((n, n), dtype=np.int8)
    dens = config.densities

    if task == "treechop":
        grid[(rng.random((n, n)) < config.forest_density) & ~clearing] = TREE
        grid[(rng.random((n, n)) < dens["dirt"]) & ~clearing & (grid == AIR)] = DIRT
        return grid

    stone = np.zeros((n, n), dtype=bool)
    target = int(round(dens["stone"] * n * n))
    guard = 0
    while stone.sum() < target and guard < 10 * n * n:
        guard += 1
        bx, by = rng.integers(0, n, size=2)
        if (bx - c) ** 2 + (by - c) ** 2 < 9:
            continue
        radius = rng.uniform(1.0, 2.5)
        stone |= ((xs - bx) ** 2 + (ys - by) ** 2 <= radius**2) & (spawn_dist2 > 4)
    grid[stone] = STONE
    grid[stone & (rng.random((n, n)) < dens["iron_ore"])] = IRON_ORE
    free = (grid == AIR) & ~clearing
    grid[free & (rng.random((n, n)) < dens["tree"])] = TREE
    free = (grid == AIR) & ~clearing
    grid[free & (rng.random((n, n)) < dens["dirt"])] = DIRT
    return grid


def _grid_ok(task: str, grid: np.ndarray, config: WorldConfig) -> bool:
    c = config.grid_size // 2
    reach = _hand_reachable(grid, (c, c))
    trees = int(((grid == TREE) & reach).sum())
    if task == "treechop":
        return trees * config.logs_per_tree >= config.treechop_goal
    mineable = (grid == STONE) | (grid == IRON_ORE)
    # some stone must border the hand-reachable region
    border = np.zeros_like(reach)
    border[1:, :] |= reach[:-1, :]
    border[:-1, :] |= reach[1:, :]
    border[:, 1:] |= reach[:, :-1]
    border[:, :-1] |= reach[:, 1:]
    return (
        trees * config.logs_per_tree >= 8
        and bool((border & (grid == STONE)).any())
        and int((grid == IRON_ORE).sum()) >= 3
        and int(mineable.sum()) >= 14
    )


def reset(task: str, seed: int, config: Optional[WorldConfig] = None) -> Tuple[World, Observation]:
    """Generate a fresh world; identical ``(task, seed, config)`` gives an identical world."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    config = config or WorldConfig()
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    for attempt in range(config.generation_attempts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt, TASKS.index(task)]))
        grid = _generate_grid(task, rng, config)
        if _grid_ok(task, grid, config):
            break
    else:
        raise WorldGenerationError(
            f"{task} world for seed {seed} failed constraints after {config.generation_attempts} attempts"
        )
    c = config.grid_size // 2
    yaw = float(rng.uniform(0.0, 360.0))
    pitch = float(rng.uniform(-config.spawn_pitch_range, config.spawn_pitch_range))
    world = World(
        task=task,
        config=config,
        grid=grid,
        logs=np.where(grid == TREE, config.logs_per_tree, 0).astype(np.int16),
        pos=np.array([c + 0.5, c + 0.5]),
        yaw=yaw,
        pitch=pitch,
        seed=seed,
    )
    return world, world.observe()


def _passable(world: World, p: np.ndarray) -> bool:
    n = world.grid.shape[0]
    if not (0.0 <= p[0] < n and 0.0 <= p[1] < n):
        return False
    return world.grid[int(p[0]), int(p[1])] == AIR


def _move(world: World, action: EnvAction) -> None:
    fwd = int(action.forward) - int(action.backward)
    side = int(action.right) - int(action.left)
    if fwd == 0 and side == 0:
        return
    d = fwd * world.heading() + side * world.right_vector()
    d /= np.linalg.norm(d)
    speed = world.config.move_speed * (2.0 if action.sprint else 1.0)
    old = world.pos
    new = old + speed * d
    ox, oy = int(math.floor(old[0])), int(math.floor(old[1]))
    nx, ny = math.floor(new[0]), math.floor(new[1])
    diagonal_blocked = (
        nx != ox
        and ny != oy
        and world.cell((nx, oy)) != AIR
        and world.cell((ox, ny)) != AIR
    )
    if _passable(world, new) and not diagonal_blocked:
        world.pos = new
        return
    # slide along whichever axis is free
    for candidate in (np.array([new[0], old[1]]), np.array([old[0], new[1]])):
        if _passable(world, candidate):
            world.pos = candidate
            return


def _grant(world: World, item: str, amount: int) -> float:
    world.inventory[item] = world.inventory.get(item, 0) + amount
    if world.task == "treechop":
        if item == "log":
            world.logs_collected += amount
            return float(amount)
        return 0.0
    if item in world.config.reward_table and item not in world.rewarded_items:
        world.rewarded_items.add(item)
        return float(world.config.reward_table[item])
    return 0.0


def _attack(world: World, attacking: bool) -> float:
    if not attacking:
        world.harvest_cell, world.harvest_progress = None, 0
        return 0.0
    target = world.faced_cell()
    block = world.cell(target)
    rule = HARVEST_RULES.get(block)
    if (
        rule is None
        or abs(world.pitch) > world.config.pitch_limit
        or PICKAXE_TIER[world.mainhand] < rule[1]
    ):
        world.harvest_cell, world.harvest_progress = None, 0
        return 0.0
    if world.harvest_cell != target:
        world.harvest_cell, world.harvest_progress = target, 0
    world.harvest_progress += 1
    if world.harvest_progress < world.config.harvest_hits:
        return 0.0
    world.harvest_cell, world.harvest_progress = None, 0
    if block == TREE:
        world.logs[target] -= 1
        if world.logs[target] <= 0:
            world.grid[target] = AIR
    else:
        world.grid[target] = AIR
    return _grant(world, rule[0], 1)


def _apply_item_verb(world: World, verb: str, item: str) -> float:
    if verb == "equip":
        if item in PICKAXE_TIER and item != "none" and world.count(item) > 0:
            world.mainhand = item
        return 0.0
    if verb == "place":
        target = world.faced_cell()
        block = PLACEABLE.get(item)
        if (
            block is None
            or world.count(item) < 1
            or target == world.agent_cell()
            or world.cell(target) != AIR
        ):
            return 0.0
        world.inventory[item] -= 1
        world.grid[target] = block
        return 0.0
    recipe = world.config.recipe_table.get(item)
    if recipe is None or recipe["verb"] != verb:
        return 0.0
    if verb in NEARBY_BLOCK and world.cell(world.faced_cell()) != NEARBY_BLOCK[verb]:
        return 0.0
    inputs = recipe["inputs"]
    if any(world.count(name) < int(k) for name, k in inputs.items()):
        return 0.0
    for name, k in inputs.items():
        world.inventory[name] -= int(k)
    return _grant(world, item, int(recipe["output"]))


def step(world: World, action: EnvAction) -> Tuple[World, Observation, float, bool]:
    """Advance ``world`` in place by one step.

    Order within a step: camera, item verb, movement, attack.  Invalid verbs are
    silent no-ops.
    """
    if world.done:
        raise RuntimeError("step() called on a finished episode; call reset()")
    if not math.isfinite(action.yaw_delta) or not math.isfinite(action.pitch_delta):
        raise ValueError("camera deltas must be finite")
    world.yaw = (world.yaw + action.yaw_delta) % 360.0
    world.pitch = float(np.clip(world.pitch + action.pitch_delta, -90.0, 90.0))
    reward = 0.0
    if action.item_verb is not None:
        verb, item = action.item_verb
        reward += _apply_item_verb(world, verb, item)
    _move(world, action)
    reward += _attack(world, action.attack)
    world.step_count += 1
    world.done = world.step_count >= world.horizon or world.success
    return world, world.observe(), reward, world.done


def _view_offsets() -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = np.meshgrid(np.arange(FRAME_SIZE), np.arange(FRAME_SIZE), indexing="ij")
    lateral = (cols + 0.5 - FRAME_SIZE / 2) / PIXELS_PER_CELL
    ahead = (ANCHOR_ROW - (rows + 0.5)) / PIXELS_PER_CELL
    return lateral, ahead


_LATERAL, _AHEAD = _view_offsets()
_VIEW_PAD = int(math.ceil(math.hypot(_LATERAL.max(), max(_AHEAD.max(), -_AHEAD.min())))) + 2


def view_cells(world: World) -> np.ndarray:
    """Cell coordinates sampled by each pixel, shape (64, 64, 2)."""
    f = world.heading()
    r = world.right_vector()
    x = world.pos[0] + _LATERAL * r[0] + _AHEAD * f[0]
    y = world.pos[1] + _LATERAL * r[1] + _AHEAD * f[1]
    return np.stack([np.floor(x), np.floor(y)], axis=-1).astype(np.int64)


def render(world: World) -> np.ndarray:
    """Egocentric top-down RGB view, agent at centre-bottom facing up."""
    cells = view_cells(world)
    padded = np.pad(world.grid, _VIEW_PAD, constant_values=OUT_OF_BOUNDS)
    ix = np.clip(cells[..., 0] + _VIEW_PAD, 0, padded.shape[0] - 1)
    iy = np.clip(cells[..., 1] + _VIEW_PAD, 0, padded.shape[1] - 1)
    frame = PALETTE[padded[ix, iy]]
    a = PIXELS_PER_CELL // 4
    frame[ANCHOR_ROW - a : ANCHOR_ROW + a, FRAME_SIZE // 2 - a : FRAME_SIZE // 2 + a] = AGENT_COLOR
    level = int(round(127.5 + 127.5 * world.pitch / 90.0))
    frame[:PITCH_BAND_ROWS] = (level, 64, 255 - level)
    return frame


class CraftWorldEnv:
    """Gym-flavoured wrapper around :func:`reset` / :func:`step` for one task."""

    def __init__(self, task: str, config: Optional[WorldConfig] = None):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.config = config or WorldConfig()
        self.world: Optional[World] = None

    def reset(self, seed: int) -> Observation:
        self.world, obs = reset(self.task, seed, self.config)
        return obs

    def step(self, action: EnvAction) -> Tuple[Observation, float, bool]:
        if self.world is None:
            raise RuntimeError("reset() must be called first")
        _, obs, reward, done = step(self.world, action)
        return obs, reward, done
