"""Execute a recipe end to end and write its report, logs and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fisher import FisherInverseEstimator, estimator_memory_bytes, num_blocks
from .harness import (
    SGD,
    DataSpec,
    KDConfig,
    ModelConfig,
    QuantConfig,
    ToyModel,
    Trainer,
    ShapeError,
    drop_layers,
    evaluate,
    fake_quant_finetune,
    load_model,
    make_dataset,
    save_model,
)
from .pruner import Mask, PruneEvent, gmp_step, oberts_step
from .recipe import Recipe, compile_timeline, linear_lrs, render_recipe
from .saliency import GroupSpec

log = logging.getLogger(__name__)

THREADS_ENV = "OBSURGEON_THREADS"
EVAL_SUBSET = 1024


class RunAborted(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        self.phase = phase
        self.cause = cause
        super().__init__(f"run aborted during {phase}: {cause}")


@dataclass
class RunReport:
    recipe_id: str
    seed: int
    status: str = "running"
    method: str = "none"
    group_size: int = 1
    target_sparsity: float = 0.0
    n_prunable: int = 0
    final_sparsity: float = 0.0
    layer_sparsity: dict = field(default_factory=dict)
    prune_events: int = 0
    scheduled_prune_events: int = 0
    prune_log: list = field(default_factory=list)
    dense_baseline: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    estimator_memory_bytes: int = 0
    fisher: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=_json_default)

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def _atomic_write(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


@contextmanager
def thread_limit(threads: int | None):
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else None
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


class _PhaseClock:
    def __init__(self, report: RunReport):
        self.report = report

    @contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except RunAborted:
            raise
        except Exception as exc:
            raise RunAborted(name, exc) from exc
        finally:
            self.report.wall_clock[name] = round(time.perf_counter() - t0, 4)


def _kd(values, teacher):
    if values is None or values.hardness == 0:
        return None
    return KDConfig(values.hardness, values.temperature, teacher)


class _PruneLog:
    def __init__(self, path: Path | None):
        self.path = path
        if path is not None:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(PruneEvent.PRUNE_LOG_FIELDS)

    def append(self, ev: PruneEvent):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([repr(v) if isinstance(v, float) else v for v in ev.row().values()])


def run(recipe: Recipe, seed: int = 0, out_dir=None, threads: int | None = None) -> RunReport:
    """Run every phase of ``recipe``; writes artifacts to ``out_dir`` when given."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "recipe.yaml").write_text(render_recipe(recipe))
    report = RunReport(recipe.id, seed, method=recipe.pruning.method, group_size=recipe.pruning.group_size,
                       target_sparsity=0.0 if recipe.dense else recipe.pruning.target_sparsity)

    def flush():
        if out is not None:
            _atomic_write(out / "report.json", report.to_json())

    try:
        with thread_limit(threads):
            _execute(recipe, seed, out, report, flush)
        report.status = "complete"
    except RunAborted as exc:
        report.status = "aborted"
        report.error = f"{exc.phase}: {type(exc.cause).__name__}: {exc.cause}"
        flush()
        raise
    flush()
    return report


def _load_init(run_dir: Path, config: ModelConfig):
    student, _ = load_model(run_dir / "model.bin")
    got = student.config
    shape = lambda c: (c.n_features, c.n_classes, list(c.hidden), list(c.attention or []))  # noqa: E731
    if shape(got) != shape(config):
        raise ShapeError(f"checkpoint in {run_dir} has shape {got.n_features}->{got.hidden}->{got.n_classes}, "
                         f"recipe expects {config.n_features}->{config.hidden}->{config.n_classes}")
    mask_path = run_dir / "mask.npy"
    bits = np.load(mask_path) if mask_path.is_file() else None
    if bits is not None and bits.size != student.n_prunable:
        raise ShapeError(f"{mask_path} has {bits.size} entries, model has {student.n_prunable} prunable weights")
    return student, bits


def _execute(recipe: Recipe, seed: int, out: Path | None, report: RunReport, flush):
    phase = _PhaseClock(report)
    rng = np.random.default_rng(seed)
    dc = recipe.data

    with phase("setup"):
        data = make_dataset(DataSpec(seed + dc.seed_offset, dc.n_samples, dc.n_features, dc.n_classes,
                                     dc.spread, dc.centers_per_class, dc.holdout, dc.kind), recipe.model.dtype)
        ms = recipe.model
        config = ModelConfig(dc.n_features, list(ms.hidden), dc.n_classes, ms.activation,
                             list(ms.attention) if ms.attention else None, ms.dtype)

    with phase("teacher"):
        teacher = ToyModel(config, seed=int(rng.integers(2**31)))
        t_trainer = Trainer(teacher, data, recipe.batch_size, rng,
                            optimizer=SGD(recipe.momentum, recipe.weight_decay))
        spe = t_trainer.steps_per_epoch
        n = int(round(recipe.teacher.epochs * spe))
        t_trainer.train_span(linear_lrs(recipe.teacher.lr_initial, recipe.teacher.lr_final, n))
        loss, acc = evaluate(teacher, data.x_test, data.y_test)
        report.dense_baseline = {"heldout_loss": loss, "heldout_accuracy": acc,
                                 "n_prunable": teacher.n_prunable}
    flush()

    init_bits = None
    with phase("init"):
        if recipe.init_from:
            student, init_bits = _load_init(Path(recipe.init_from), config)
        elif recipe.student_init == "teacher" or "layer_drop" in recipe.phases:
            student = teacher.copy()
        else:
            student = ToyModel(config, seed=int(rng.integers(2**31)))
    if "layer_drop" in recipe.phases:
        with phase("layer_drop"):
            ld = recipe.layer_drop
            student = drop_layers(student, ld.keep)
            tr = Trainer(student, data, recipe.batch_size, rng, _kd(ld.kd or recipe.kd, teacher),
                         SGD(recipe.momentum, recipe.weight_decay))
            tr.train_span(linear_lrs(ld.lr_initial, ld.lr_final, int(round(ld.epochs * spe))))
            loss, acc = evaluate(student, data.x_test, data.y_test)
            report.final["after_layer_drop"] = {"heldout_loss": loss, "heldout_accuracy": acc,
                                                "hidden_layers": student.depth}
        flush()

    d = student.n_prunable
    report.n_prunable = d
    mask = Mask.dense(d, student.segments())
    if init_bits is not None:
        mask = Mask(init_bits, student.segments())
        student.set_prunable(student.get_prunable() * mask.bits)
    trainer = Trainer(student, data, recipe.batch_size, rng, _kd(recipe.kd, teacher),
                      SGD(recipe.momentum, recipe.weight_decay), mask=mask)
    timeline = compile_timeline(recipe, spe)
    report.scheduled_prune_events = len(timeline.prune_steps)
    if out is not None:
        timeline.to_csv(out / "timeline.csv")

    method = "none" if recipe.dense else recipe.pruning.method
    group = GroupSpec(recipe.pruning.group_size)
    fc = recipe.fisher
    est = None
    if method == "oberts_global":
        report.estimator_memory_bytes = estimator_memory_bytes(d, fc.block_size)
        report.fisher = {"block_size": fc.block_size, "num_grads": fc.num_grads, "dampening": fc.dampening,
                         "n_blocks": num_blocks(d, fc.block_size)}
    prune_log = _PruneLog(out / "prune_log.csv" if out is not None else None)
    eval_idx = np.arange(min(EVAL_SUBSET, data.n_train))
    last_saliency = None

    if "prune" in recipe.phases or "finetune" in recipe.phases:
        with phase("prune_finetune"):
            for rec in timeline:
                if rec.prune_flag:
                    before = trainer.objective(eval_idx)
                    w = student.get_prunable()
                    predicted = float("nan")
                    if method == "gmp_uniform":
                        mask = gmp_step(w, mask, rec.scheduled_sparsity, group)
                        new_w = w * mask.bits
                    else:
                        if est is None:
                            est = FisherInverseEstimator(d, fc.block_size, fc.dampening, fc.num_grads)
                        est.reset()
                        est.update_many(trainer.gradient_stream(fc.num_grads, fc.batch_size))
                        res = oberts_step(w, est, mask, rec.scheduled_sparsity, group,
                                          recipe.pruning.compensate)
                        mask = res.mask
                        new_w = w + res.delta
                        predicted = res.predicted_loss_increase
                        last_saliency = res.report
                    student.set_prunable(new_w)
                    trainer.mask = mask
                    after = trainer.objective(eval_idx)
                    ev = PruneEvent(rec.step, rec.epoch, rec.scheduled_sparsity, mask.sparsity,
                                    predicted, before, after)
                    report.prune_log.append(ev.row() | {"epoch": rec.epoch})
                    prune_log.append(ev)
                trainer.step(rec.lr)
        report.prune_events = len(report.prune_log)
        flush()

    if "quantize" in recipe.phases:
        with phase("quantize"):
            q = recipe.quantize
            qc = QuantConfig(q.bits, q.epochs, q.observer_epochs)
            qtrainer = Trainer(student, data, recipe.batch_size, rng, _kd(q.kd or recipe.kd, teacher),
                               SGD(recipe.momentum, recipe.weight_decay), mask=mask)
            _, scales = fake_quant_finetune(qtrainer, qc, linear_lrs(q.lr_initial, q.lr_final,
                                                                    int(round(q.epochs * spe))), spe)
            report.final["quant_scales"] = scales
        flush()

    with phase("evaluate"):
        w = student.get_prunable()
        if np.any(w[~mask.bits] != 0):
            raise RuntimeError("masked coordinates are not exactly zero in the final model")
        test_loss, test_acc = evaluate(student, data.x_test, data.y_test)
        train_loss, train_acc = evaluate(student, data.x_train, data.y_train)
        report.final.update({"heldout_loss": test_loss, "heldout_accuracy": test_acc,
                             "train_loss": train_loss, "train_accuracy": train_acc})
        report.final_sparsity = mask.sparsity
        report.layer_sparsity = mask.layer_sparsity()
        if recipe.pruning.target_sparsity and not recipe.dense:
            slack = group.size / d
            if abs(mask.sparsity - recipe.pruning.target_sparsity) > slack + 1e-12:
                report.warnings.append(
                    f"final sparsity {mask.sparsity:.6f} misses target {recipe.pruning.target_sparsity} "
                    f"by more than one group ({slack:.2e})")
        if est is not None and est.consumed < est.num_grads:
            report.warnings.append(f"Fisher estimate used {est.consumed} of {est.num_grads} gradients")

    if out is not None:
        save_model(student, out / "model.bin", {"recipe": recipe.id, "seed": seed})
        np.save(out / "mask.npy", mask.bits)
        if est is not None:
            est.save(out / "fisher.bin")
        if last_saliency is not None:
            last_saliency.to_csv(out / "saliency_last.csv", student.weight_store())
    return report
