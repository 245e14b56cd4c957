"""Bx-Cy incremental schedule, per-task training and evaluation.

During task ``t`` only the label columns of ``C^t`` are read, and only
training images with at least one positive among them are used. After
training, the task's prompts are frozen; evaluation scores every test image
against all classes seen so far.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoder as enc
from .errors import DegenerateInputError, NumericError, ProtocolError, ScheduleError
from .metrics import MetricsRecord, MetricsReport, aggregate, score_predictions
from .numerics import AdamState, Rng, adam_step, sigmoid
from .prompting import PromptStore
from .scoring import PcdSchedule, bce_from_margin, pcd_tau, score_batch, score_backward

EVAL_CHUNK = 50
PREFIX_CHUNK = 200


@dataclass(frozen=True)
class TaskSchedule:
    tasks: tuple[tuple[int, ...], ...]
    base: int = 0
    increment: int = 0

    def __post_init__(self):
        seen = set()
        for t in self.tasks:
            if seen & set(t):
                raise ScheduleError("task label sets must be disjoint")
            seen |= set(t)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def total_classes(self) -> int:
        return sum(len(t) for t in self.tasks)

    def classes(self, t: int) -> tuple[int, ...]:
        return self.tasks[t - 1]

    def cumulative(self, t: int) -> tuple[int, ...]:
        return tuple(c for task in self.tasks[:t] for c in task)

    def label(self) -> str:
        return f"{self.total_classes}:B{self.base}-C{self.increment}"


def build_schedule(total_classes: int, base: int, increment: int, class_names=None) -> TaskSchedule:
    """Split classes (sorted by name, else by id) into a base task and equal increments."""
    if base < 0 or increment < 1 or base > total_classes:
        raise ScheduleError(f"invalid schedule B{base}-C{increment} for {total_classes} classes")
    if (total_classes - base) % increment:
        raise ScheduleError(f"{total_classes - base} remaining classes not divisible by increment {increment}")
    if class_names is not None:
        order = sorted(range(total_classes), key=lambda c: class_names[c])
    else:
        order = list(range(total_classes))
    tasks = []
    pos = 0
    if base > 0:
        tasks.append(tuple(order[:base]))
        pos = base
    while pos < total_classes:
        tasks.append(tuple(order[pos:pos + increment]))
        pos += increment
    if not tasks:
        raise ScheduleError("schedule has no tasks")
    return TaskSchedule(tuple(tasks), base, increment)


_SCHED_RE = re.compile(r"^\s*(\d+)\s*:\s*B(\d+)\s*-\s*C(\d+)\s*$", re.IGNORECASE)


def parse_schedule(text: str) -> tuple[int, int, int]:
    """``"20:B4-C2"`` -> (20, 4, 2)."""
    m = _SCHED_RE.match(text)
    if not m:
        raise ScheduleError(f"schedule must look like TOTAL:Bx-Cy, got {text!r}")
    return int(m.group(1)), int(m.group(2)), int(m.group(3))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 3e-2
    prompt_len: int = 16
    attach_depth: int = 3
    pcd: tuple[float, float] | None = (7.0, 0.2)
    prompt_mode: str = "class-specific"
    branch_mode: str = "both"
    seed: int = 0
    init_std: float = 0.02
    threshold: float = 0.5
    high_conf_delta: float = 0.05
    num_layers: int = 6
    text_layers: int = 4
    num_heads: int = 4
    embed_dim: int = 64
    ff_width: int = 128
    patch_size: int = 2

    def encoder_config(self, grid) -> enc.EncoderConfig:
        return enc.EncoderConfig(
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            embed_dim=self.embed_dim,
            prompt_len=self.prompt_len,
            attach_depth=self.attach_depth,
            ff_width=self.ff_width,
            text_layers=self.text_layers,
            grid=tuple(grid),
            patch_size=self.patch_size,
        )

    def operating_points(self) -> dict[str, float]:
        return {"default": self.threshold, "high-confidence": self.threshold + self.high_conf_delta}

    def pcd_schedule(self, schedule: TaskSchedule) -> PcdSchedule | None:
        if self.pcd is None or schedule.num_tasks < 2:
            return None
        return PcdSchedule(self.pcd[0], self.pcd[1], len(schedule.classes(1)), schedule.total_classes)


@dataclass
class RunState:
    config: TrainConfig
    schedule: TaskSchedule
    weights: enc.EncoderWeights
    store: PromptStore
    adam: AdamState = field(default_factory=AdamState)
    completed: int = 0
    records: list[MetricsRecord] = field(default_factory=list)
    losses: dict[int, list[float]] = field(default_factory=dict)
    scores: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    _prefix: dict = field(default_factory=dict, repr=False)


def init_run(config: TrainConfig, schedule: TaskSchedule, grid) -> RunState:
    ecfg = config.encoder_config(grid)
    weights = enc.init_frozen_encoder(ecfg, config.seed)
    store = PromptStore(config.prompt_len, config.embed_dim, config.seed, config.prompt_mode, config.branch_mode,
                        config.init_std)
    return RunState(config=config, schedule=schedule, weights=weights, store=store, adam=AdamState(lr=config.lr))


def prefix_states(weights: enc.EncoderWeights, grids, chunk: int = PREFIX_CHUNK) -> np.ndarray:
    """Prefix cache for a stack of images, computed in fixed-size chunks."""
    out = [enc.visual_prefix_batch(weights, enc.embed_images(weights, grids[i:i + chunk]))
           for i in range(0, len(grids), chunk)]
    return np.concatenate(out, axis=0)


def train_task(state: RunState, t: int, train_data) -> RunState:
    if t != state.completed + 1:
        raise ProtocolError(f"task {t} requested after completing task {state.completed}")
    cfg = state.config
    classes = state.schedule.classes(t)
    state.store.begin_task(t, classes)
    y_task = np.asarray(train_data.task_labels(classes)).astype(bool)
    idx = np.flatnonzero(y_task.any(axis=1))
    y_task = y_task[idx]
    params = state.store.trainable_params()
    losses: list[float] = []
    if params and len(idx):
        states = prefix_states(state.weights, train_data.grids(idx))
        adam = AdamState(lr=cfg.lr)
        mask = np.ones((cfg.batch_size, len(classes)), dtype=bool)
        for epoch in range(cfg.epochs):
            order = Rng(cfg.seed).child("shuffle", t, epoch).permutation(len(idx))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                b = order[start:start + cfg.batch_size]
                for p in params:
                    p.zero_grad()
                try:
                    sp, sn, tape = score_batch(state.weights, state.store, classes, states=states[b], need_tape=True)
                except DegenerateInputError as e:
                    raise NumericError(f"prompts diverged in task {t}, epoch {epoch}: {e}") from e
                loss, g = bce_from_margin(sp - sn, y_task[b], mask[:len(b)], tau=1.0)
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite loss in task {t}, epoch {epoch}")
                score_backward(state.weights, g, -g, tape)
                adam_step(adam, params)
                if not all(np.isfinite(p.value).all() for p in params):
                    raise NumericError(f"non-finite prompt values in task {t}, epoch {epoch}")
                total += loss * len(b)
            losses.append(total / len(idx))
        state.adam = adam
    state.store.freeze_task_prompts(t)
    state.losses[t] = losses
    state.completed = t
    return state


def score_images(weights, store, classes, states=None, grids=None, chunk: int = EVAL_CHUNK):
    """(s+, s-) matrices (images x classes), scored one class at a time.

    Classes are scored independently with fixed image chunks so a class's
    scores do not depend on which other classes are being evaluated.
    """
    n = (states if states is not None else grids).shape[0]
    sp = np.empty((n, len(classes)))
    sn = np.empty((n, len(classes)))
    for j, c in enumerate(classes):
        for i in range(0, n, chunk):
            sl = slice(i, i + chunk)
            a, b, _ = score_batch(
                weights, store, [c],
                states=None if states is None else states[sl],
                grids=None if grids is None else grids[sl],
            )
            sp[sl, j], sn[sl, j] = a[:, 0], b[:, 0]
    return sp, sn


def test_prefix(state: RunState, test_data) -> np.ndarray:
    key = id(test_data)
    if key not in state._prefix:
        state._prefix = {key: prefix_states(state.weights, test_data.grids())}
    return state._prefix[key]


def evaluate(state: RunState, t: int, test_data, cached: bool = True) -> list[MetricsRecord]:
    if t > state.completed:
        raise ProtocolError(f"cannot evaluate task {t} before it is trained")
    classes = state.schedule.cumulative(t)
    if cached:
        sp, sn = score_images(state.weights, state.store, classes, states=test_prefix(state, test_data))
    else:
        sp, sn = score_images(state.weights, state.store, classes, grids=test_data.grids())
    state.scores[t] = (sp, sn)
    pcd = state.config.pcd_schedule(state.schedule)
    tau = pcd_tau(pcd, len(classes)) if pcd is not None else 1.0
    margin = sp - sn
    conf = sigmoid(margin / tau)
    labels = test_data.task_labels(classes)
    return score_predictions(conf, labels, classes, t, state.config.operating_points(), tau, rank_scores=margin)


@dataclass
class RunResult:
    report: MetricsReport
    state: RunState


def config_hash(config: TrainConfig, schedule: TaskSchedule, extra: str = "") -> str:
    text = repr(sorted(asdict(config).items())) + repr(schedule.tasks) + extra
    return hashlib.sha256(text.encode()).hexdigest()


def run_sequence(config: TrainConfig, train_data, test_data, schedule: TaskSchedule, manifest_hash: str = "",
                 progress=None) -> RunResult:
    state = init_run(config, schedule, train_data.grid)
    for t in range(1, schedule.num_tasks + 1):
        train_task(state, t, train_data)
        recs = evaluate(state, t, test_data)
        state.records += recs
        if progress is not None:
            progress(t, recs)
    report = aggregate(state.records, schedule.num_tasks, manifest_hash or config_hash(config, schedule))
    report.extra = {
        "schedule": [list(c) for c in schedule.tasks],
        "train_loss": {str(t): v for t, v in sorted(state.losses.items())},
        "encoder_fingerprint": state.weights.fingerprint(),
    }
    return RunResult(report, state)


def joint_upper_bound(config: TrainConfig, train_data, test_data, manifest_hash: str = "") -> RunResult:
    """All classes in one fully labeled task."""
    schedule = build_schedule(train_data.num_classes, train_data.num_classes, 1)
    return run_sequence(config, train_data, test_data, schedule, manifest_hash)
