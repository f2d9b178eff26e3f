"""Discrete action catalog: compilation, labeling of raw steps, and decoding.

Movement actions come from all 2^8 binary flag combinations times five camera
choices (none or one of four 22.5 degree turns).  Each raw combination is
canonicalized by

1. dropping ``sneak``;
2. dropping both members of a conflicting pair (forward/backward, left/right);
3. while more than three sub-actions remain, removing them in the order
   sprint, left, right, backward, turnCameraUp, turnCameraDown,
   turnCameraLeft, turnCameraRight, attack, jump, forward;
4. dropping ``jump``, which is not part of an action's identity: decoding sets
   jump whenever attack is absent.

The distinct canonical sets (the empty set included) are the 112 movement
actions.  The empty set is the no-op.  Eighteen item actions follow.

Catalog order: movement actions sorted by (size, positions of their
sub-actions in ``SUB_ACTIONS``), then item actions in ``ITEM_ACTIONS`` order.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from craftbench.world import MOVEMENT_FLAGS, EnvAction, RawStep

CAMERA_ACTIONS = ("turnCameraUp", "turnCameraDown", "turnCameraLeft", "turnCameraRight")
SUB_ACTIONS = (
    "forward",
    "backward",
    "left",
    "right",
    "jump",
    "sprint",
    "attack",
) + CAMERA_ACTIONS
REMOVAL_ORDER = (
    "sprint",
    "left",
    "right",
    "backward",
    "turnCameraUp",
    "turnCameraDown",
    "turnCameraLeft",
    "turnCameraRight",
    "attack",
    "jump",
    "forward",
)
CONFLICTS = (("forward", "backward"), ("left", "right"), ("turnCameraUp", "turnCameraDown"),
             ("turnCameraLeft", "turnCameraRight"))
FLIP_PAIRS = {"left": "right", "right": "left", "turnCameraLeft": "turnCameraRight",
              "turnCameraRight": "turnCameraLeft"}
MAX_SUB_ACTIONS = 3
EXPECTED_MOVEMENT = 112
EXPECTED_TOTAL = 130

ITEM_ACTIONS = (
    ("craft", "planks"),
    ("craft", "stick"),
    ("craft", "crafting_table"),
    ("nearby_craft", "wooden_pickaxe"),
    ("nearby_craft", "stone_pickaxe"),
    ("nearby_craft", "iron_pickaxe"),
    ("nearby_craft", "furnace"),
    ("nearby_smelt", "iron_ingot"),
    ("nearby_smelt", "coal"),
    ("place", "crafting_table"),
    ("place", "furnace"),
    ("place", "torch"),
    ("place", "dirt"),
    ("place", "stone"),
    ("place", "cobblestone"),
    ("equip", "wooden_pickaxe"),
    ("equip", "stone_pickaxe"),
    ("equip", "iron_pickaxe"),
)

CAMERA_THRESHOLD = 11.25
CAMERA_WINDOW = 3
CAMERA_STEP = 22.5
DEFAULT_CAMERA_NOISE = 2.25

# label_camera tie order: yaw+, yaw-, pitch+, pitch-
_CAMERA_ORDER = ("turnCameraRight", "turnCameraLeft", "turnCameraUp", "turnCameraDown")


@dataclass(frozen=True)
class ActionDescriptor:
    sub_actions: FrozenSet[str] = frozenset()
    item_verb: Optional[Tuple[str, str]] = None

    @property
    def is_item(self) -> bool:
        return self.item_verb is not None

    @property
    def is_noop(self) -> bool:
        return self.item_verb is None and not self.sub_actions

    def sorted_sub_actions(self) -> List[str]:
        return sorted(self.sub_actions, key=SUB_ACTIONS.index)

    def to_json(self) -> dict:
        if self.is_item:
            return {"item_verb": list(self.item_verb)}
        return {"sub_actions": self.sorted_sub_actions()}

    def flipped(self) -> "ActionDescriptor":
        if self.is_item:
            return self
        return ActionDescriptor(frozenset(FLIP_PAIRS.get(a, a) for a in self.sub_actions))


def canonicalize(sub_actions) -> FrozenSet[str]:
    """Apply pruning steps 1-3 (sneak, conflicts, size limit); jump is kept."""
    s = set(sub_actions)
    s.discard("sneak")
    for a, b in CONFLICTS:
        if a in s and b in s:
            s -= {a, b}
    for name in REMOVAL_ORDER:
        if len(s) <= MAX_SUB_ACTIONS:
            break
        s.discard(name)
    return frozenset(s)


def movement_key(sub_actions) -> FrozenSet[str]:
    """Full canonical identity of a movement combination (pruned, jump removed)."""
    return canonicalize(sub_actions) - {"jump"}


def raw_movement_combinations() -> List[FrozenSet[str]]:
    combos = []
    for bits in itertools.product((0, 1), repeat=len(MOVEMENT_FLAGS)):
        base = {name for name, bit in zip(MOVEMENT_FLAGS, bits) if bit}
        for cam in (None,) + CAMERA_ACTIONS:
            combos.append(frozenset(base | ({cam} if cam else set())))
    return combos


def _sort_key(d: ActionDescriptor):
    return (len(d.sub_actions), tuple(sorted(SUB_ACTIONS.index(a) for a in d.sub_actions)))


class ActionSet:
    """The compiled catalog plus its left/right flip permutation."""

    def __init__(self, entries: Sequence[ActionDescriptor], raw_combinations: int):
        self.entries = list(entries)
        self.raw_combinations = raw_combinations
        self.count_movement = sum(not e.is_item for e in self.entries)
        self.count_item = len(self.entries) - self.count_movement
        self._index: Dict[ActionDescriptor, int] = {e: i for i, e in enumerate(self.entries)}
        self.flip_map = np.array([self._index[e.flipped()] for e in self.entries], dtype=np.int64)
        self.noop_id = self._index[ActionDescriptor()]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> ActionDescriptor:
        return self.entries[i]

    def index(self, descriptor: ActionDescriptor) -> int:
        return self._index[descriptor]

    def movement_id(self, sub_actions) -> int:
        return self._index[ActionDescriptor(movement_key(sub_actions))]

    def item_id(self, verb: str, item: str) -> Optional[int]:
        return self._index.get(ActionDescriptor(item_verb=(verb, item)))

    def to_json(self) -> str:
        payload = {
            "format_version": 1,
            "raw_combinations": self.raw_combinations,
            "count_movement": self.count_movement,
            "count_item": self.count_item,
            "entries": [e.to_json() for e in self.entries],
            "flip_map": [int(i) for i in self.flip_map],
        }
        return json.dumps(payload, indent=1) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_json(cls, text: str) -> "ActionSet":
        payload = json.loads(text)
        entries = []
        for e in payload["entries"]:
            if "item_verb" in e:
                entries.append(ActionDescriptor(item_verb=tuple(e["item_verb"])))
            else:
                entries.append(ActionDescriptor(frozenset(e["sub_actions"])))
        aset = cls(entries, payload["raw_combinations"])
        if list(aset.flip_map) != payload["flip_map"]:
            raise ValueError("flip_map in file disagrees with its entries")
        return aset


@lru_cache(maxsize=1)
def compile_action_set() -> ActionSet:
    raw = raw_movement_combinations()
    movement = {ActionDescriptor(movement_key(c)) for c in raw}
    entries = sorted(movement, key=_sort_key)
    if len(entries) != EXPECTED_MOVEMENT:
        raise AssertionError(
            f"pruning produced {len(entries)} movement actions, expected {EXPECTED_MOVEMENT}: "
            f"{[e.sorted_sub_actions() for e in entries]}"
        )
    entries += [ActionDescriptor(item_verb=iv) for iv in ITEM_ACTIONS]
    aset = ActionSet(entries, raw_combinations=len(raw))
    assert len(aset) == EXPECTED_TOTAL
    return aset


def _camera_sums(yaw: np.ndarray, pitch: np.ndarray, t: int) -> Tuple[float, float]:
    stop = min(t + CAMERA_WINDOW, len(yaw))
    return float(np.sum(yaw[t:stop])), float(np.sum(pitch[t:stop]))


def _pick_camera(yaw_sum: float, pitch_sum: float) -> Optional[str]:
    magnitudes = {
        "turnCameraRight": yaw_sum,
        "turnCameraLeft": -yaw_sum,
        "turnCameraUp": pitch_sum,
        "turnCameraDown": -pitch_sum,
    }
    best = None
    for name in _CAMERA_ORDER:
        m = magnitudes[name]
        if m > CAMERA_THRESHOLD and (best is None or m > magnitudes[best]):
            best = name
    return best


def label_camera(raw: Sequence[RawStep], t: int) -> Optional[str]:
    """Camera sub-action for step ``t`` from the summed deltas over steps t..t+2."""
    if not 0 <= t < len(raw):
        raise IndexError(t)
    window = raw[t : t + CAMERA_WINDOW]
    yaw = sum(s.yaw_delta for s in window)
    pitch = sum(s.pitch_delta for s in window)
    return _pick_camera(yaw, pitch)


def label_camera_array(yaw: np.ndarray, pitch: np.ndarray) -> List[Optional[str]]:
    """Vectorized :func:`label_camera` over a whole trajectory."""
    yaw = np.asarray(yaw, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    return [_pick_camera(*_camera_sums(yaw, pitch, t)) for t in range(len(yaw))]


def _step_sub_actions(step: EnvAction, camera: Optional[str]) -> set:
    s = {name for name, on in zip(MOVEMENT_FLAGS, step.flags()) if on}
    if camera:
        s.add(camera)
    return s


def encode_step(
    raw: Sequence[RawStep],
    t: int,
    action_set: Optional[ActionSet] = None,
    camera: Optional[str] = "auto",
) -> int:
    """ActionId of step ``t``.  Item verbs take priority over movement.

    Unknown item verbs fall through to movement labeling.  ``camera`` may pass
    a precomputed label to skip the window scan.
    """
    action_set = action_set or compile_action_set()
    step = raw[t]
    if step.item_verb is not None:
        idx = action_set.item_id(*step.item_verb)
        if idx is not None:
            return idx
    if camera == "auto":
        camera = label_camera(raw, t)
    return action_set.movement_id(_step_sub_actions(step, camera))


def decode(
    action_id: int,
    rng: Optional[np.random.Generator] = None,
    action_set: Optional[ActionSet] = None,
    noise_std: float = DEFAULT_CAMERA_NOISE,
) -> EnvAction:
    """Turn an ActionId into an environment action.

    Camera turns are 22.5 degrees plus Gaussian noise (skipped when ``rng`` is
    None or ``noise_std`` is 0).  Jump is set unless the action attacks.
    """
    action_set = action_set or compile_action_set()
    if not 0 <= action_id < len(action_set):
        raise IndexError(f"action id {action_id} outside catalog of {len(action_set)}")
    d = action_set[action_id]
    if d.is_item:
        return EnvAction(item_verb=d.item_verb)
    s = d.sub_actions
    magnitude = CAMERA_STEP
    if rng is not None and noise_std > 0 and s & set(CAMERA_ACTIONS):
        magnitude += float(rng.normal(0.0, noise_std))
    yaw = pitch = 0.0
    if "turnCameraRight" in s:
        yaw = magnitude
    elif "turnCameraLeft" in s:
        yaw = -magnitude
    elif "turnCameraUp" in s:
        pitch = magnitude
    elif "turnCameraDown" in s:
        pitch = -magnitude
    return EnvAction(
        forward="forward" in s,
        backward="backward" in s,
        left="left" in s,
        right="right" in s,
        jump="attack" not in s,
        sprint="sprint" in s,
        attack="attack" in s,
        yaw_delta=yaw,
        pitch_delta=pitch,
    )


class ActionLabeler(TransformerMixin, BaseEstimator):
    """Map a raw step sequence to ActionIds (``transform``) and back (``inverse_transform``).

    The catalog is fixed, so ``fit`` only records it.
    """

    def __init__(self, noise_std: float = DEFAULT_CAMERA_NOISE):
        self.noise_std = noise_std

    def fit(self, X=None, y=None):
        self.action_set_ = compile_action_set()
        self.n_actions_ = len(self.action_set_)
        return self

    def transform(self, X: Sequence[RawStep]) -> np.ndarray:
        if not hasattr(self, "action_set_"):
            self.fit()
        cams = label_camera_array([s.yaw_delta for s in X], [s.pitch_delta for s in X])
        return np.array(
            [encode_step(X, t, self.action_set_, camera=cams[t]) for t in range(len(X))],
            dtype=np.int64,
        )

    def inverse_transform(self, ids, rng: Optional[np.random.Generator] = None) -> List[EnvAction]:
        if not hasattr(self, "action_set_"):
            self.fit()
        return [decode(int(i), rng, self.action_set_, self.noise_std) for i in ids]
