"""Class-specific positive/negative prompt sets and their store.

A :class:`PromptSet` carries up to four prompt tensors (text and visual,
positive and negative). The :class:`PromptStore` maps classes to sets under
one of four policies:

``class-specific``  one set per class, frozen once its task ends
``task-specific``   one set per task, shared by that task's classes
``global``          a single set shared by every class and re-opened for
                    every task (it keeps adapting, so it forgets)
``none``            no prompts at all

The branch mode drops the positive or negative half of each set; a missing
branch is scored with un-prompted encoders.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError, VersionError
from .numerics import Parameter, Rng

PROMPT_MODES = ("class-specific", "task-specific", "global", "none")
BRANCH_MODES = ("both", "pos-only", "neg-only", "none")
SLOTS = ("text_pos", "text_neg", "visual_pos", "visual_neg")
DEFAULT_INIT_STD = 0.02
CLASS_TOKEN_SEED = 0x5EED


def class_token(class_id: int, dim: int) -> np.ndarray:
    """Frozen stand-in for a category-name embedding; depends only on the class id."""
    return Rng(CLASS_TOKEN_SEED).child("class-token", class_id).normal(dim, 1.0)


def _branch_slots(branch_mode: str) -> tuple[str, ...]:
    if branch_mode == "both":
        return SLOTS
    if branch_mode == "pos-only":
        return ("text_pos", "visual_pos")
    if branch_mode == "neg-only":
        return ("text_neg", "visual_neg")
    if branch_mode == "none":
        return ()
    raise UsageError(f"unknown branch mode {branch_mode!r}")


@dataclass(eq=False)
class PromptSet:
    key: str
    origin_task: int
    text_pos: Parameter | None = None
    text_neg: Parameter | None = None
    visual_pos: Parameter | None = None
    visual_neg: Parameter | None = None
    class_id: int | None = None
    class_token: np.ndarray | None = None

    def params(self) -> list[Parameter]:
        return [p for p in (getattr(self, s) for s in SLOTS) if p is not None]

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.params())

    def freeze(self):
        for p in self.params():
            p.frozen = True

    def unfreeze(self):
        for p in self.params():
            p.frozen = False


def create_class_prompts(
    class_id: int,
    seed: int,
    init_std: float = DEFAULT_INIT_STD,
    prompt_len: int = 16,
    dim: int = 64,
    origin_task: int = 1,
    branch_mode: str = "both",
) -> PromptSet:
    """Fresh prompt set for one class, drawn from a class-scoped stream."""
    ps = _new_set(f"c{class_id}", ("class", class_id), seed, init_std, prompt_len, dim, origin_task, branch_mode)
    ps.class_id = class_id
    ps.class_token = class_token(class_id, dim)
    return ps


def _new_set(key, stream, seed, init_std, prompt_len, dim, origin_task, branch_mode) -> PromptSet:
    rng = Rng(seed).child("prompts", *stream)
    ps = PromptSet(key=key, origin_task=origin_task)
    wanted = _branch_slots(branch_mode)
    # every slot is drawn so a branch's values do not depend on which others exist
    for slot in SLOTS:
        value = rng.child(slot).normal((prompt_len, dim), init_std)
        if slot in wanted:
            setattr(ps, slot, Parameter(value, name=f"{key}.{slot}"))
    return ps


class PromptStore:
    def __init__(
        self,
        prompt_len: int = 16,
        dim: int = 64,
        seed: int = 0,
        mode: str = "class-specific",
        branch_mode: str = "both",
        init_std: float = DEFAULT_INIT_STD,
    ):
        if mode not in PROMPT_MODES:
            raise UsageError(f"unknown prompt mode {mode!r}")
        _branch_slots(branch_mode)
        self.prompt_len = prompt_len
        self.dim = dim
        self.seed = seed
        self.mode = mode
        self.branch_mode = branch_mode
        self.init_std = init_std
        self.current_task = 0
        self.sets: dict[str, PromptSet] = {}
        self.class_task: dict[int, int] = {}
        self._tokens: dict[int, np.ndarray] = {}

    # -- lifecycle --------------------------------------------------------

    def begin_task(self, task: int, classes) -> None:
        if task != self.current_task + 1:
            raise UsageError(f"task {task} started after task {self.current_task}")
        classes = [int(c) for c in classes]
        for c in classes:
            if c in self.class_task:
                raise UsageError(f"class {c} already registered")
        self.current_task = task
        for c in classes:
            self.class_task[c] = task
            self._tokens[c] = class_token(c, self.dim)
        if self.prompts_disabled:
            return
        if self.mode == "class-specific":
            for c in classes:
                self.add(create_class_prompts(c, self.seed, self.init_std, self.prompt_len, self.dim, task, self.branch_mode))
        elif self.mode == "task-specific":
            key = f"t{task}"
            self.sets[key] = _new_set(
                key, ("task", task), self.seed, self.init_std, self.prompt_len, self.dim, task, self.branch_mode
            )
        else:
            ps = self.sets.get("g")
            if ps is None:
                ps = self.sets["g"] = _new_set(
                    "g", ("global",), self.seed, self.init_std, self.prompt_len, self.dim, task, self.branch_mode
                )
            ps.origin_task = task
            ps.unfreeze()

    def add(self, ps: PromptSet) -> None:
        if ps.key in self.sets:
            raise UsageError(f"prompt set {ps.key} already exists")
        self.sets[ps.key] = ps

    @property
    def prompts_disabled(self) -> bool:
        return self.mode == "none" or self.branch_mode == "none"

    def freeze_task_prompts(self, task: int) -> None:
        if task < 1 or task > self.current_task:
            raise UsageError(f"cannot freeze unknown task {task}")
        for ps in self.sets.values():
            if ps.origin_task == task:
                ps.freeze()

    # -- queries ----------------------------------------------------------

    def set_for(self, class_id: int) -> PromptSet | None:
        if self.prompts_disabled:
            return None
        if self.mode == "class-specific":
            return self.sets[f"c{class_id}"]
        if self.mode == "task-specific":
            return self.sets[f"t{self.class_task[class_id]}"]
        return self.sets["g"]

    def token(self, class_id: int) -> np.ndarray:
        return self._tokens[class_id]

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_task)

    def __len__(self) -> int:
        return len(self.class_task)

    def trainable_params(self) -> list[Parameter]:
        """Non-frozen prompt parameters in (set key, slot) order."""
        out = []
        for key in sorted(self.sets, key=_set_sort_key):
            out += [p for p in self.sets[key].params() if not p.frozen]
        return out

    def all_params(self) -> list[Parameter]:
        out = []
        for key in sorted(self.sets, key=_set_sort_key):
            out += self.sets[key].params()
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.all_params():
            h.update(p.name.encode())
            h.update(p.value.tobytes())
        return h.hexdigest()


def _set_sort_key(key: str):
    return (key[0], int(key[1:]) if key[1:] else 0)


# --- checkpoint file --------------------------------------------------------
#
# Layout (all integers little-endian):
#   0   8 bytes   magic b"DDPPRMT\x00"
#   8   u32       format version (1)
#   12  u32       header length H in bytes
#   16  H bytes   UTF-8 JSON header: config_hash, store settings, class table,
#                 and for each prompt set the slots with (offset, shape)
#   16+H          float64 little-endian payload, slots concatenated in header order

CKPT_MAGIC = b"DDPPRMT\x00"
CKPT_VERSION = 1


def save_checkpoint(store: PromptStore, path, config_hash: str = "") -> None:
    blobs = []
    offset = 0
    sets = []
    for key in sorted(store.sets, key=_set_sort_key):
        ps = store.sets[key]
        slots = []
        for slot in SLOTS:
            p = getattr(ps, slot)
            if p is None:
                continue
            data = p.value.astype("<f8").tobytes()
            slots.append({"slot": slot, "offset": offset, "shape": list(p.value.shape), "frozen": p.frozen})
            blobs.append(data)
            offset += len(data)
        sets.append({"key": key, "origin_task": ps.origin_task, "class_id": ps.class_id, "slots": slots})
    header = {
        "config_hash": config_hash,
        "mode": store.mode,
        "branch_mode": store.branch_mode,
        "prompt_len": store.prompt_len,
        "dim": store.dim,
        "seed": store.seed,
        "init_std": store.init_std,
        "current_task": store.current_task,
        "class_task": [[c, t] for c, t in sorted(store.class_task.items())],
        "sets": sets,
        "payload_bytes": offset,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[PromptStore, str]:
    """Returns (store, config_hash)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError("truncated checkpoint preamble", offset=len(raw))
    if raw[:8] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {CKPT_VERSION}", offset=8)
    if len(raw) < 16 + hlen:
        raise FormatError("truncated checkpoint header", offset=len(raw))
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", offset=16) from None
    base = 16 + hlen
    if len(raw) != base + header["payload_bytes"]:
        raise FormatError("checkpoint payload length mismatch", offset=len(raw))
    store = PromptStore(
        header["prompt_len"], header["dim"], header["seed"], header["mode"], header["branch_mode"], header["init_std"]
    )
    store.current_task = header["current_task"]
    for c, t in header["class_task"]:
        store.class_task[c] = t
        store._tokens[c] = class_token(c, store.dim)
    for s in header["sets"]:
        ps = PromptSet(key=s["key"], origin_task=s["origin_task"], class_id=s["class_id"])
        if ps.class_id is not None:
            ps.class_token = class_token(ps.class_id, store.dim)
        for slot in s["slots"]:
            n = int(np.prod(slot["shape"]))
            start = base + slot["offset"]
            value = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(slot["shape"]).astype(np.float64)
            setattr(ps, slot["slot"], Parameter(value, name=f"{ps.key}.{slot['slot']}", frozen=slot["frozen"]))
        store.sets[ps.key] = ps
    return store, header["config_hash"]
