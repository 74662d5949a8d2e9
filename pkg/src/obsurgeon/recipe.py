"""Declarative compression recipes and their per-step timelines.

A recipe is a YAML mapping; see ``obsurgeon/recipes/*.yaml`` for the shipped
ones. Schedule points are written in epochs (fractions allowed) and are
converted to optimizer steps by :func:`compile_timeline`.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .pruner import SparsitySchedule, sparsity_at

PHASE_ORDER = ("layer_drop", "prune", "finetune", "quantize")
METHODS = ("none", "gmp_uniform", "oberts_global")
LR_SCHEDULES = ("linear_decay", "linear_decay_with_rewinds")
_EPS = 1e-9


class RecipeError(ValueError):
    """Validation failure; ``path`` locates the offending key."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass
class Rewinds:
    start: float | None = None
    every: float | None = None
    at: list[float] = field(default_factory=list)


@dataclass
class LRConfig:
    initial: float
    final: float
    schedule: str = "linear_decay"
    rewinds: Rewinds | None = None


@dataclass
class Frequency:
    per_epoch: float | None = None
    every_epochs: float | None = None

    @property
    def interval(self) -> float:
        return 1.0 / self.per_epoch if self.per_epoch else float(self.every_epochs)


@dataclass
class PruningConfig:
    method: str = "none"
    start_epoch: float = 0.0
    end_epoch: float = 0.0
    frequency: Frequency = field(default_factory=Frequency)
    initial_sparsity: float = 0.0
    target_sparsity: float = 0.0
    group_size: int = 1
    compensate: bool = True


@dataclass
class FisherConfig:
    block_size: int = 50
    num_grads: int = 1024
    dampening: float = 1e-7
    batch_size: int | None = None


@dataclass
class KDValues:
    hardness: float = 1.0
    temperature: float = 2.0


@dataclass
class ModelSpec:
    hidden: list[int]
    activation: str = "relu"
    attention: list[int] | None = None
    dtype: str = "float32"


@dataclass
class DataConfig:
    n_samples: int = 8192
    n_features: int = 32
    n_classes: int = 16
    spread: float = 2.0
    centers_per_class: int = 6
    holdout: float = 0.25
    kind: str = "gaussian_mixture"
    seed_offset: int = 0


@dataclass
class StageConfig:
    """Training settings for an auxiliary stage (teacher, retraining, QAT)."""

    epochs: float
    lr_initial: float
    lr_final: float


@dataclass
class LayerDropConfig:
    keep: int
    epochs: float
    lr_initial: float
    lr_final: float
    kd: KDValues | None = None


@dataclass
class QuantizeConfig:
    bits: int = 8
    epochs: float = 10
    observer_epochs: float = 5
    lr_initial: float = 1e-3
    lr_final: float = 1e-4
    kd: KDValues | None = None


@dataclass
class Recipe:
    id: str
    epochs: float
    batch_size: int
    lr: LRConfig
    model: ModelSpec
    teacher: StageConfig
    data: DataConfig = field(default_factory=DataConfig)
    momentum: float = 0.9
    weight_decay: float = 0.0
    pruning: PruningConfig = field(default_factory=PruningConfig)
    fisher: FisherConfig = field(default_factory=FisherConfig)
    kd: KDValues | None = None
    phases: list[str] = field(default_factory=lambda: ["prune", "finetune"])
    layer_drop: LayerDropConfig | None = None
    quantize: QuantizeConfig | None = None
    # "fresh": independently initialized student; "teacher": start from the teacher's weights
    student_init: str = "fresh"
    # run directory whose model.bin (and mask.npy, if present) seeds the student
    init_from: str | None = None
    description: str = ""

    @property
    def dense(self) -> bool:
        return self.pruning.method == "none" or self.pruning.target_sparsity == 0.0


# parsing ---------------------------------------------------------------------


def _unwrap_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _coerce(value, tp, path):
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if optional:
            return None
        raise RecipeError(path, "value is required")
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    if origin is list:
        if not isinstance(value, list):
            raise RecipeError(path, f"expected a list, got {type(value).__name__}")
        (item,) = typing.get_args(tp)
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise RecipeError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise RecipeError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                raise RecipeError(path, f"expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise RecipeError(path, f"expected a finite number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise RecipeError(path, f"expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported recipe field type {tp!r}")


def _build(cls, data, path=""):
    if not isinstance(data, dict):
        raise RecipeError(path, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise RecipeError(where, "unknown key")
    kwargs = {}
    for name, f in fields.items():
        sub = f"{path}.{name}" if path else name
        if name in data:
            kwargs[name] = _coerce(data[name], hints[name], sub)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise RecipeError(sub, "missing required field")
    return cls(**kwargs)


def parse_recipe(text: str) -> Recipe:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise RecipeError("", f"malformed recipe text: {exc}") from None
    recipe = _build(Recipe, data)
    validate(recipe)
    return recipe


def load_recipe(path) -> Recipe:
    return parse_recipe(Path(path).read_text())


def shipped_recipes() -> list[str]:
    files = resources.files("obsurgeon") / "recipes"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml"))


def shipped_recipe(name: str) -> Recipe:
    return parse_recipe(shipped_recipe_text(name))


def shipped_recipe_text(name: str) -> str:
    path = resources.files("obsurgeon") / "recipes" / f"{name}.yaml"
    if not path.is_file():
        raise FileNotFoundError(f"no shipped recipe named {name!r}; available: {shipped_recipes()}")
    return path.read_text()


def resolve_recipe(ref) -> Recipe:
    """A path to a recipe file, or the name of a shipped recipe."""
    p = Path(ref)
    if p.is_file():
        return load_recipe(p)
    return shipped_recipe(str(ref))


def _prune(d):
    if isinstance(d, dict):
        return {k: _prune(v) for k, v in d.items() if v is not None and v != [] and v != ""}
    return d


def render_recipe(recipe: Recipe) -> str:
    return yaml.safe_dump(_prune(dataclasses.asdict(recipe)), sort_keys=False)


# validation ------------------------------------------------------------------


def _check(cond, path, message):
    if not cond:
        raise RecipeError(path, message)


def validate(r: Recipe) -> Recipe:
    _check(r.epochs > 0, "epochs", "must be positive")
    _check(r.batch_size >= 1, "batch_size", "must be >= 1")
    _check(0 <= r.momentum < 1, "momentum", "must lie in [0, 1)")
    _check(r.weight_decay >= 0, "weight_decay", "must be non-negative")

    lr = r.lr
    _check(lr.initial > 0, "lr.initial", "must be positive")
    _check(lr.final > 0, "lr.final", "must be positive")
    _check(lr.final <= lr.initial, "lr.final", f"must not exceed lr.initial ({lr.initial})")
    _check(lr.schedule in LR_SCHEDULES, "lr.schedule", f"must be one of {LR_SCHEDULES}")
    if lr.schedule == "linear_decay_with_rewinds":
        _check(lr.rewinds is not None, "lr.rewinds", "required for linear_decay_with_rewinds")
        rw = lr.rewinds
        _check(rw.start is not None or rw.at, "lr.rewinds", "give 'start' (and optionally 'every') or 'at'")
        _check(not (rw.at and rw.start is not None), "lr.rewinds", "'at' cannot be combined with 'start'")
        if rw.every is not None:
            _check(rw.every > 0, "lr.rewinds.every", "must be positive")
        for e in rewind_epochs(r):
            _check(0 < e < r.epochs, "lr.rewinds", f"rewind at epoch {e} lies outside (0, {r.epochs})")
    else:
        _check(lr.rewinds is None, "lr.rewinds", "only valid with linear_decay_with_rewinds")

    p = r.pruning
    _check(p.method in METHODS, "pruning.method", f"must be one of {METHODS}")
    _check(0 <= p.initial_sparsity <= 1, "pruning.initial_sparsity", "must lie in [0, 1]")
    _check(0 <= p.target_sparsity <= 1, "pruning.target_sparsity", "must lie in [0, 1]")
    _check(p.initial_sparsity <= p.target_sparsity, "pruning.initial_sparsity",
           f"must not exceed target_sparsity ({p.target_sparsity})")
    _check(p.group_size in (1, 4), "pruning.group_size", "must be 1 or 4")
    if not r.dense:
        _check(p.start_epoch >= 0, "pruning.start_epoch", "must be non-negative")
        _check(p.start_epoch < p.end_epoch, "pruning.start_epoch",
               f"must be before end_epoch ({p.end_epoch})")
        _check(p.end_epoch <= r.epochs, "pruning.end_epoch", f"exceeds epochs ({r.epochs})")
        f = p.frequency
        _check((f.per_epoch is None) != (f.every_epochs is None), "pruning.frequency",
               "give exactly one of per_epoch / every_epochs")
        _check(f.interval > 0, "pruning.frequency", "must be positive")
        n = (p.end_epoch - p.start_epoch) / f.interval
        _check(abs(n - round(n)) < 1e-6, "pruning.frequency",
               f"prune window {p.start_epoch}..{p.end_epoch} is not a whole number of intervals ({f.interval:g})")
        if p.method == "oberts_global":
            _check(r.fisher.block_size % p.group_size == 0, "fisher.block_size",
                   f"must be a multiple of pruning.group_size ({p.group_size})")

    fi = r.fisher
    _check(fi.block_size >= 1, "fisher.block_size", "must be >= 1")
    _check(fi.num_grads >= 1, "fisher.num_grads", "must be >= 1")
    _check(fi.dampening > 0, "fisher.dampening", "must be positive")
    for path, kd in (("kd", r.kd), ("layer_drop.kd", r.layer_drop and r.layer_drop.kd),
                     ("quantize.kd", r.quantize and r.quantize.kd)):
        if kd:
            _check(0 <= kd.hardness <= 1, f"{path}.hardness", "must lie in [0, 1]")
            _check(kd.temperature > 0, f"{path}.temperature", "must be positive")

    _check(len(r.phases) > 0, "phases", "must list at least one phase")
    for i, ph in enumerate(r.phases):
        _check(ph in PHASE_ORDER, f"phases[{i}]", f"unknown phase {ph!r}; expected one of {PHASE_ORDER}")
    ranks = [PHASE_ORDER.index(ph) for ph in r.phases]
    _check(ranks == sorted(ranks) and len(set(ranks)) == len(ranks), "phases",
           "must follow layer_drop -> prune -> finetune -> quantize without repeats")
    if "layer_drop" in r.phases:
        _check(r.layer_drop is not None, "layer_drop", "section required when the layer_drop phase is listed")
        _check(1 <= r.layer_drop.keep <= len(r.model.hidden), "layer_drop.keep",
               f"must lie in [1, {len(r.model.hidden)}]")
        _check(r.layer_drop.epochs > 0, "layer_drop.epochs", "must be positive")
    if "quantize" in r.phases:
        _check(r.quantize is not None, "quantize", "section required when the quantize phase is listed")
        q = r.quantize
        _check(2 <= q.bits <= 16, "quantize.bits", "must lie in [2, 16]")
        _check(0 <= q.observer_epochs <= q.epochs, "quantize.observer_epochs", f"must lie in [0, {q.epochs}]")
    _check(r.teacher.epochs > 0, "teacher.epochs", "must be positive")
    _check(r.student_init in ("fresh", "teacher"), "student_init", "must be 'fresh' or 'teacher'")
    _check(not (r.init_from and "layer_drop" in r.phases), "init_from", "cannot be combined with layer_drop")
    _check(len(r.model.hidden) >= 1, "model.hidden", "needs at least one layer")
    _check(r.data.n_samples > r.batch_size, "data.n_samples", "must exceed batch_size")
    return r


# schedules -------------------------------------------------------------------


def rewind_epochs(recipe: Recipe) -> list[float]:
    lr = recipe.lr
    if lr.schedule != "linear_decay_with_rewinds" or lr.rewinds is None:
        return []
    rw = lr.rewinds
    if rw.at:
        return sorted(float(e) for e in rw.at)
    if rw.every is None:
        return [float(rw.start)]
    out, e = [], float(rw.start)
    while e < recipe.epochs - _EPS:
        out.append(e)
        e = rw.start + len(out) * rw.every
    return out


def total_steps(recipe: Recipe, steps_per_epoch: int) -> int:
    return max(1, int(round(recipe.epochs * steps_per_epoch)))


def _rewind_steps(recipe: Recipe, steps_per_epoch: int) -> list[int]:
    last = total_steps(recipe, steps_per_epoch) - 1
    return sorted({s for s in (int(round(e * steps_per_epoch)) for e in rewind_epochs(recipe)) if 0 < s < last})


def lr_at(recipe: Recipe, step: int, steps_per_epoch: int) -> float:
    """Piecewise-linear decay; each rewind restarts at ``lr.initial`` and heads
    for ``lr.final`` at the last step of the run."""
    last = total_steps(recipe, steps_per_epoch) - 1
    starts = [0] + _rewind_steps(recipe, steps_per_epoch)
    seg = max(s for s in starts if s <= step)
    if last == seg:
        return recipe.lr.initial
    frac = (step - seg) / (last - seg)
    # convex form so both endpoints are exact
    return recipe.lr.final * frac + recipe.lr.initial * (1.0 - frac)


def linear_lrs(lr_initial: float, lr_final: float, n_steps: int) -> list[float]:
    if n_steps <= 1:
        return [lr_initial] * n_steps
    return [lr_final * (i / (n_steps - 1)) + lr_initial * (1 - i / (n_steps - 1)) for i in range(n_steps)]


def prune_event_epochs(recipe: Recipe) -> list[float]:
    """Epochs of every prune event, both ends of the window inclusive."""
    if recipe.dense:
        return []
    p = recipe.pruning
    dt = p.frequency.interval
    n = int(round((p.end_epoch - p.start_epoch) / dt))
    return [p.start_epoch + i * dt for i in range(n + 1)]


def sparsity_schedule(recipe: Recipe) -> SparsitySchedule:
    p = recipe.pruning
    return SparsitySchedule(p.initial_sparsity, p.target_sparsity, p.start_epoch, p.end_epoch)


@dataclass
class TimelineRecord:
    step: int
    epoch: float
    lr: float
    prune_flag: bool
    scheduled_sparsity: float
    phase: str


@dataclass
class Timeline:
    records: list[TimelineRecord]
    steps_per_epoch: int

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def prune_steps(self) -> list[int]:
        return [r.step for r in self.records if r.prune_flag]

    @property
    def lrs(self) -> list[float]:
        return [r.lr for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "lr", "prune_flag", "scheduled_sparsity", "phase"])
            for r in self.records:
                w.writerow([r.step, f"{r.epoch:.6f}", repr(r.lr), int(r.prune_flag),
                            repr(r.scheduled_sparsity), r.phase])
        return path


def compile_timeline(recipe: Recipe, steps_per_epoch: int) -> Timeline:
    if steps_per_epoch < 1:
        raise RecipeError("steps_per_epoch", "must be >= 1")
    n = total_steps(recipe, steps_per_epoch)
    p = recipe.pruning
    events = {}
    if not recipe.dense:
        if p.frequency.per_epoch and p.frequency.per_epoch > steps_per_epoch:
            raise RecipeError("pruning.frequency.per_epoch",
                              f"{p.frequency.per_epoch:g} prunes per epoch exceeds {steps_per_epoch} steps per epoch")
        sched = sparsity_schedule(recipe)
        for e in prune_event_epochs(recipe):
            s = min(int(round(e * steps_per_epoch)), n - 1)
            if s in events:
                raise RecipeError("pruning.frequency", f"two prune events fall on step {s}")
            events[s] = sparsity_at(sched, e)
    records, current = [], 0.0
    last_event = max(events) if events else -1
    for step in range(n):
        flag = step in events
        if flag:
            current = events[step]
        phase = "prune" if step <= last_event else "finetune"
        records.append(TimelineRecord(step, step / steps_per_epoch, lr_at(recipe, step, steps_per_epoch),
                                      flag, current, phase))
    return Timeline(records, steps_per_epoch)
