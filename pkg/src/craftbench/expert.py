"""Scripted demonstrator for CraftWorld.

The expert plans on the true world state.  Every step it resolves the next
unmet requirement of the task goal from the current inventory (a recipe
walk: iron_pickaxe needs iron_ingot needs iron_ore needs a stone pickaxe ...),
then drives a low-level controller: navigate along a grid path, turn the
camera proportionally (capped at ``camera_gain`` degrees per step), attack,
place or craft.
"""
from __future__ import annotations

import heapq
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from craftbench import world as cw
from craftbench.world import (
    AIR,
    DIRT,
    FURNACE,
    IRON_ORE,
    PICKAXE_TIER,
    STONE,
    TABLE,
    TREE,
    EnvAction,
    RawStep,
    World,
    WorldConfig,
)

logger = logging.getLogger(__name__)

TIER_PICKAXE = {1: "wooden_pickaxe", 2: "stone_pickaxe", 3: "iron_pickaxe"}
NEARBY_RADIUS = 5.0
MINE_COST = 5.0
# path-length units charged per this many degrees of initial turning
TURN_COST_DEGREES = 30.0
TURN_SLACK = 4.0


class ExpertConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    camera_gain: float = Field(7.5, gt=0, lt=22.5)
    action_noise_prob: float = Field(0.02, ge=0, le=1)
    failure_rate: float = Field(0.1, ge=0, le=1)
    idle_prob: float = Field(0.05, ge=0, le=1)
    level_pitch_above: float = Field(10.0, ge=0)


def _wrap180(angle: float) -> float:
    return (angle + 180.0) % 360.0 - 180.0


def bearing(src: np.ndarray, dst: np.ndarray) -> float:
    """Yaw (clockwise from north) pointing from ``src`` to ``dst``."""
    d = dst - src
    return math.degrees(math.atan2(d[0], d[1])) % 360.0


def _center(cell: Tuple[int, int]) -> np.ndarray:
    return np.array([cell[0] + 0.5, cell[1] + 0.5])


@dataclass
class Goal:
    kind: str  # harvest | face | place | verb | done
    blocks: Tuple[int, ...] = ()
    verb: Optional[Tuple[str, str]] = None
    item: Optional[str] = None


class ScriptedExpert:
    """Stateless-by-design controller; only a path cache is kept between steps."""

    def __init__(self, config: Optional[ExpertConfig] = None, rng: Optional[np.random.Generator] = None):
        self.config = config or ExpertConfig()
        self.rng = rng or np.random.default_rng(0)
        self._cache_key = None
        self._cache_plan = None
        self._stuck = 0
        self._last_pos = None

    # ------------------------------------------------------------------ goals
    def next_goal(self, world: World) -> Goal:
        if world.task == "treechop":
            return Goal("harvest", blocks=(TREE,))
        if world.success:
            return Goal("done")
        return self._obtain(world, "iron_pickaxe", 1) or Goal("done")

    def _obtain(self, world: World, item: str, n: int, depth: int = 0) -> Optional[Goal]:
        if world.count(item) >= n:
            return None
        if depth > 12:
            return Goal("harvest", blocks=(TREE,))
        if item == "log":
            return Goal("harvest", blocks=(TREE,))
        if item == "cobblestone":
            return self._equip_tier(world, 1, depth) or Goal("harvest", blocks=(STONE,))
        if item == "iron_ore":
            return self._equip_tier(world, 2, depth) or Goal("harvest", blocks=(IRON_ORE,))
        if item == "dirt":
            return Goal("harvest", blocks=(DIRT,))
        recipe = world.config.recipe_table.get(item)
        if recipe is None:
            return Goal("harvest", blocks=(TREE,))
        for ingredient, k in recipe["inputs"].items():
            goal = self._obtain(world, ingredient, int(k), depth + 1)
            if goal is not None:
                return goal
        verb = recipe["verb"]
        if verb == "nearby_craft":
            goal = self._ensure_near(world, TABLE, "crafting_table", depth)
            if goal is not None:
                return goal
        elif verb == "nearby_smelt":
            goal = self._ensure_near(world, FURNACE, "furnace", depth)
            if goal is not None:
                return goal
        return Goal("verb", verb=(verb, item))

    def _equip_tier(self, world: World, tier: int, depth: int) -> Optional[Goal]:
        if PICKAXE_TIER[world.mainhand] >= tier:
            return None
        for t in (3, 2, 1):
            if t >= tier and world.count(TIER_PICKAXE[t]) > 0:
                return Goal("verb", verb=("equip", TIER_PICKAXE[t]))
        return self._obtain(world, TIER_PICKAXE[tier], 1, depth + 1)

    def _ensure_near(self, world: World, block: int, item: str, depth: int) -> Optional[Goal]:
        if world.cell(world.faced_cell()) == block:
            return None
        xs, ys = np.nonzero(world.grid == block)
        if len(xs):
            d = np.hypot(xs + 0.5 - world.pos[0], ys + 0.5 - world.pos[1])
            if d.min() <= NEARBY_RADIUS:
                return Goal("face", blocks=(block,))
        return self._obtain(world, item, 1, depth + 1) or Goal("place", item=item)

    # ------------------------------------------------------------- planning
    def _step_cost(self, world: World, block: int) -> Optional[float]:
        if block == AIR:
            return 1.0
        if block in (TREE, DIRT):
            return MINE_COST
        tier = PICKAXE_TIER[world.mainhand]
        if block == STONE and tier >= 1:
            return MINE_COST
        if block == IRON_ORE and tier >= 2:
            return MINE_COST
        return None

    def _plan(self, world: World, blocks: Tuple[int, ...]):
        """Cheapest path from the agent's cell to a cell bordering one of ``blocks``.

        Returns (path, target) or None.  Path cells other than the first may be
        solid; the controller clears them on the way.
        """
        key = (blocks, world.grid.tobytes(), world.mainhand)
        start = world.agent_cell()
        if self._cache_key == key and self._cache_plan is not None:
            path, target = self._cache_plan
            if start in path and world.cell(target) in blocks:
                return path[path.index(start):], target
        n = world.grid.shape[0]
        grid = world.grid
        dist = {start: 0.0}
        prev: Dict[Tuple[int, int], Tuple[int, int]] = {}
        heap = [(0.0, start)]
        found = None
        best_score = math.inf
        horizon = math.inf
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            if d > horizon:
                break
            x, y = u
            for v in ((x, y + 1), (x + 1, y), (x, y - 1), (x - 1, y)):
                if 0 <= v[0] < n and 0 <= v[1] < n and grid[v] in blocks:
                    if u == start:
                        turn = abs(_wrap180(bearing(world.pos, _center(v)) - world.yaw))
                    else:
                        first = self._first_hop(prev, start, u)
                        arrive = bearing(_center(prev[u]), _center(u))
                        turn = abs(_wrap180(bearing(world.pos, _center(first)) - world.yaw))
                        turn += abs(_wrap180(bearing(_center(u), _center(v)) - arrive))
                    score = d + turn / TURN_COST_DEGREES
                    if score < best_score:
                        best_score, found = score, (u, v)
                    horizon = min(horizon, d + TURN_SLACK)
            for v in ((x, y + 1), (x + 1, y), (x, y - 1), (x - 1, y)):
                if not (0 <= v[0] < n and 0 <= v[1] < n):
                    continue
                cost = self._step_cost(world, int(grid[v]))
                if cost is None:
                    continue
                nd = d + cost
                if nd < dist.get(v, math.inf):
                    dist[v] = nd
                    prev[v] = u
                    heapq.heappush(heap, (nd, v))
        if found is None:
            self._cache_key, self._cache_plan = None, None
            return None
        u, target = found
        path = [u]
        while path[-1] != start:
            path.append(prev[path[-1]])
        path.reverse()
        self._cache_key, self._cache_plan = key, (path, target)
        return path, target

    @staticmethod
    def _first_hop(prev, start, u):
        while prev[u] != start:
            u = prev[u]
        return u

    # ----------------------------------------------------------- controller
    def _turn_towards(self, world: World, yaw_target: float, act: EnvAction) -> float:
        err = _wrap180(yaw_target - world.yaw)
        gain = self.config.camera_gain
        act.yaw_delta = float(np.clip(err, -gain, gain))
        return err

    def _face_cell(self, world: World, cell: Tuple[int, int], act: EnvAction) -> bool:
        """Steer so that ``cell`` becomes the faced cell; True once it is."""
        centre = _center(cell)
        if np.linalg.norm(centre - world.pos) > 1.35:
            self._go_to(world, _center(world.agent_cell()), act)
            return False
        err = self._turn_towards(world, bearing(world.pos, centre), act)
        return world.faced_cell() == cell and abs(err) < 20.0

    def _go_to(self, world: World, point: np.ndarray, act: EnvAction, remaining: float = 0.0) -> None:
        dist = float(np.linalg.norm(point - world.pos))
        err = self._turn_towards(world, bearing(world.pos, point), act)
        if abs(err) < 30.0 and not (dist < 0.5 and abs(err) > 15.0):
            act.forward = True
            if remaining > 4.0 and abs(err) < 10.0:
                act.sprint = True

    def _follow(self, world: World, path, target, act: EnvAction, on_arrival) -> None:
        if len(path) > 1:
            nxt = path[1]
            if world.cell(nxt) != AIR:
                if self._face_cell(world, nxt, act):
                    act.attack = True
                return
            self._go_to(world, _center(nxt), act, remaining=len(path) - 1)
            return
        if self._face_cell(world, target, act):
            on_arrival(act)

    def act(self, world: World) -> EnvAction:
        """Intended action for the current state (before idle/noise injection)."""
        act = EnvAction()
        if abs(world.pitch) > self.config.level_pitch_above:
            gain = self.config.camera_gain
            act.pitch_delta = float(np.clip(-world.pitch, -gain, gain))
            return act
        goal = self.next_goal(world)
        if goal.kind == "done":
            return act
        if goal.kind == "verb":
            act.item_verb = goal.verb
            return act
        if goal.kind == "place":
            return self._place(world, goal.item, act)
        plan = self._plan(world, goal.blocks)
        if plan is None:
            return self._wander(act)
        path, target = plan

        def on_arrival(a: EnvAction) -> None:
            if goal.kind == "harvest":
                a.attack = True

        self._follow(world, path, target, act, on_arrival)
        return self._unstick(world, act)

    def _place(self, world: World, item: str, act: EnvAction) -> EnvAction:
        here = world.agent_cell()
        orthogonal = [(here[0] + dx, here[1] + dy) for dx, dy in ((0, 1), (1, 0), (0, -1), (-1, 0))]
        diagonal = [(here[0] + dx, here[1] + dy) for dx, dy in ((1, 1), (1, -1), (-1, -1), (-1, 1))]
        for ring in (orthogonal, diagonal):
            best = self._closest_heading(world, [c for c in ring if world.cell(c) == AIR])
            if best is not None:
                if self._face_cell(world, best, act):
                    act.item_verb = ("place", item)
                return act
        # boxed in: dig out a neighbour first
        best = self._closest_heading(
            world, [c for c in orthogonal if self._step_cost(world, world.cell(c)) is not None]
        )
        if best is None:
            return self._wander(act)
        if self._face_cell(world, best, act):
            act.attack = True
        return act

    @staticmethod
    def _closest_heading(world: World, cells):
        best, best_err = None, math.inf
        for cell in cells:
            err = abs(_wrap180(bearing(world.pos, _center(cell)) - world.yaw))
            if err < best_err:
                best, best_err = cell, err
        return best

    def _wander(self, act: EnvAction) -> EnvAction:
        act.forward = bool(self.rng.random() < 0.7)
        act.yaw_delta = float(self.rng.uniform(-1, 1) * self.config.camera_gain)
        return act

    def _unstick(self, world: World, act: EnvAction) -> EnvAction:
        if act.forward and self._last_pos is not None and np.allclose(world.pos, self._last_pos):
            self._stuck += 1
        else:
            self._stuck = 0
        self._last_pos = world.pos.copy()
        if self._stuck > 6:
            act.forward = False
            act.backward = True
            act.yaw_delta = float(self.rng.choice([-1.0, 1.0]) * self.config.camera_gain)
            self._stuck = 0
        return act


def expert_act(world: World, expert: ScriptedExpert) -> RawStep:
    """One raw demonstration step (reward/done are filled in after stepping)."""
    a = expert.act(world)
    return RawStep(**{**a.__dict__})


def _perturb(act: EnvAction, cfg: ExpertConfig, rng: np.random.Generator) -> EnvAction:
    if rng.random() < cfg.idle_prob:
        return EnvAction()
    if rng.random() < cfg.action_noise_prob:
        name = cw.MOVEMENT_FLAGS[int(rng.integers(len(cw.MOVEMENT_FLAGS)))]
        setattr(act, name, not getattr(act, name))
    return act


@dataclass
class EpisodeResult:
    seed: int
    frames: np.ndarray
    vectors: Optional[np.ndarray]
    raw_steps: List[RawStep]
    success: bool
    total_reward: float
    truncated: bool


def run_expert_episode(
    task: str,
    seed: int,
    expert_config: Optional[ExpertConfig] = None,
    world_config: Optional[WorldConfig] = None,
    truncate: bool = True,
) -> EpisodeResult:
    """Play one expert episode and record (observation, action, reward) per step.

    With ``truncate`` the episode is cut at a random point with probability
    ``failure_rate`` and recorded as unsuccessful.
    """
    cfg = expert_config or ExpertConfig()
    world, obs = cw.reset(task, seed, world_config)
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, 7]))
    expert = ScriptedExpert(cfg, rng)
    frames, vectors, steps = [], [], []
    done = False
    while not done:
        frames.append(obs.frame)
        if obs.vector is not None:
            vectors.append(obs.vector)
        act = _perturb(expert.act(world), cfg, rng)
        _, obs, reward, done = cw.step(world, act)
        steps.append(RawStep(**act.__dict__, reward=reward, done=done))
    success = world.success
    truncated = False
    if truncate and rng.random() < cfg.failure_rate:
        cut = max(1, int(len(steps) * rng.uniform(0.2, 0.9)))
        frames, vectors, steps = frames[:cut], vectors[:cut], steps[:cut]
        success, truncated = False, True
    return EpisodeResult(
        seed=world.seed,
        frames=np.stack(frames),
        vectors=np.stack(vectors) if vectors else None,
        raw_steps=steps,
        success=bool(success),
        total_reward=float(sum(s.reward for s in steps)),
        truncated=truncated,
    )


def expert_returns(task: str, seeds, expert_config=None, world_config=None) -> np.ndarray:
    """Untruncated expert returns on the given episode seeds (the reference score)."""
    return np.array(
        [run_expert_episode(task, s, expert_config, world_config, truncate=False).total_reward for s in seeds]
    )


def generate_demos(
    task: str,
    episodes: int,
    seed: int,
    out_path: "os.PathLike[str] | str",
    expert_config: Optional[ExpertConfig] = None,
    world_config: Optional[WorldConfig] = None,
) -> dict:
    """Write ``episodes`` expert trajectories as a raw dataset under ``out_path``."""
    from craftbench.datastore import DemoSet, Trajectory

    demos = DemoSet.create(out_path, kind="raw", task=task)
    summary = {"task": task, "seed": seed, "episodes": []}
    for i in range(episodes):
        ep = run_expert_episode(task, cw.episode_seed(seed, i), expert_config, world_config)
        traj = Trajectory(
            meta={
                "task": task,
                "seed": ep.seed,
                "length": len(ep.raw_steps),
                "total_reward": ep.total_reward,
                "success": ep.success,
                "truncated": ep.truncated,
            },
            frames=ep.frames,
            vectors=ep.vectors,
            raw_steps=ep.raw_steps,
        )
        demos.add(traj, name=f"ep_{i:05d}")
        summary["episodes"].append(
            {"name": f"ep_{i:05d}", "return": ep.total_reward, "success": ep.success, "length": len(ep.raw_steps)}
        )
        logger.info("episode %d: return %.1f success %s length %d", i, ep.total_reward, ep.success, len(ep.raw_steps))
    n_ok = sum(e["success"] for e in summary["episodes"])
    summary["success_fraction"] = n_ok / episodes if episodes else 0.0
    summary["mean_return"] = float(np.mean([e["return"] for e in summary["episodes"]])) if episodes else 0.0
    demos.write_manifest(extra={"summary": summary})
    return summary
