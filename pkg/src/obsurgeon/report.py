"""Summaries, CSV tables and figures for finished (or partial) run directories."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

SPARSITY_LOSS_FIELDS = ("step", "epoch", "scheduled_sparsity", "achieved_sparsity", "predicted_loss_increase",
                        "measured_loss_before", "measured_loss_after", "measured_loss_increase")
SCHEDULE_FIELDS = ("step", "epoch", "lr", "scheduled_sparsity", "prune_flag", "phase")
COMPARE_METRICS = ("status", "method", "group_size", "final_sparsity", "prune_events",
                   "heldout_loss", "heldout_accuracy", "train_loss", "train_accuracy",
                   "dense_heldout_loss", "dense_heldout_accuracy", "estimator_memory_bytes")


@dataclass
class RunData:
    path: Path
    report: dict | None = None
    prune_log: list[dict] = field(default_factory=list)
    timeline: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def name(self) -> str:
        if self.report:
            return f"{self.report.get('recipe_id', '?')}@seed{self.report.get('seed', '?')}"
        return self.path.name


@dataclass
class Summary:
    text: str
    files: list[Path] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v):
    if v is None or v == "":
        return math.nan
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def load_run(run_dir) -> RunData:
    """Read whatever a run left behind; anything missing becomes a warning."""
    path = Path(run_dir)
    data = RunData(path)
    if not path.is_dir():
        data.warnings.append(f"{path} is not a directory")
        return data
    rp = path / "report.json"
    if rp.is_file():
        try:
            data.report = json.loads(rp.read_text())
        except json.JSONDecodeError as exc:
            data.warnings.append(f"report.json is unreadable ({exc})")
    else:
        data.warnings.append("report.json missing")
    if data.report is not None:
        status = data.report.get("status")
        if status != "complete":
            msg = f"run status is {status!r}"
            if data.report.get("error"):
                msg += f": {data.report['error']}"
            data.warnings.append(msg)
        data.warnings.extend(data.report.get("warnings", []))

    pl = path / "prune_log.csv"
    if pl.is_file():
        data.prune_log = _read_csv(pl)
    elif data.report and data.report.get("prune_log"):
        data.prune_log = [{k: v for k, v in row.items()} for row in data.report["prune_log"]]
        data.warnings.append("prune_log.csv missing; using the copy inside report.json")
    elif not (data.report and data.report.get("method") == "none"):
        data.warnings.append("prune_log.csv missing")

    tl = path / "timeline.csv"
    if tl.is_file():
        data.timeline = _read_csv(tl)
    else:
        data.warnings.append("timeline.csv missing")

    if data.report and data.timeline:
        expected = data.report.get("scheduled_prune_events", 0)
        if data.report.get("status") == "complete" and len(data.prune_log) != expected:
            data.warnings.append(f"prune log has {len(data.prune_log)} events, timeline scheduled {expected}")
    return data


def sparsity_loss_rows(data: RunData) -> list[dict]:
    epochs = {int(r["step"]): _num(r["epoch"]) for r in data.timeline}
    rows = []
    for r in data.prune_log:
        step = int(_num(r["step"]))
        before, after = _num(r["measured_loss_before"]), _num(r["measured_loss_after"])
        rows.append({
            "step": step,
            "epoch": epochs.get(step, _num(r.get("epoch"))),
            "scheduled_sparsity": _num(r["scheduled_sparsity"]),
            "achieved_sparsity": _num(r["achieved_sparsity"]),
            "predicted_loss_increase": _num(r["predicted_loss_increase"]),
            "measured_loss_before": before,
            "measured_loss_after": after,
            "measured_loss_increase": after - before,
        })
    return rows


def _write_rows(path: Path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


def _fmt(v, spec=".4g"):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else format(v, spec)
    return "-" if v is None else str(v)


def _table(header, rows) -> str:
    cells = [list(map(str, header))] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def summary_text(data: RunData, rows: list[dict]) -> str:
    r = data.report or {}
    out = [f"run: {data.path}"]
    if r:
        out.append(f"recipe {r.get('recipe_id')}  seed {r.get('seed')}  status {r.get('status')}  "
                   f"method {r.get('method')}  group size {r.get('group_size')}")
        out.append(f"prunable weights {r.get('n_prunable')}  target sparsity {_fmt(r.get('target_sparsity'))}  "
                   f"final sparsity {_fmt(r.get('final_sparsity'))}")
        fin, dense = r.get("final", {}), r.get("dense_baseline", {})
        if dense:
            out.append(f"dense teacher: held-out loss {_fmt(dense.get('heldout_loss'))}, "
                       f"accuracy {_fmt(dense.get('heldout_accuracy'))}")
        if "heldout_loss" in fin:
            out.append(f"final model:   held-out loss {_fmt(fin.get('heldout_loss'))}, "
                       f"accuracy {_fmt(fin.get('heldout_accuracy'))}, train loss {_fmt(fin.get('train_loss'))}")
        if r.get("estimator_memory_bytes"):
            out.append(f"Fisher estimator memory: {r['estimator_memory_bytes']} bytes  {r.get('fisher', {})}")
        if r.get("wall_clock"):
            out.append("wall clock (s): " + ", ".join(f"{k} {v:.2f}" for k, v in r["wall_clock"].items()))
    if rows:
        out.append("")
        out.append("prune events (predicted vs measured loss increase):")
        out.append(_table(("step", "epoch", "target", "achieved", "predicted", "measured"),
                          [(x["step"], x["epoch"], x["scheduled_sparsity"], x["achieved_sparsity"],
                            x["predicted_loss_increase"], x["measured_loss_increase"]) for x in rows]))
    if data.warnings:
        out.append("")
        out.append(f"warnings ({len(data.warnings)}):")
        out.extend(f"  - {w}" for w in data.warnings)
    return "\n".join(out)


def _figures(data: RunData, rows: list[dict], dest: Path) -> list[Path]:
    from matplotlib.figure import Figure

    files = []
    if data.timeline:
        epoch = [_num(r["epoch"]) for r in data.timeline]
        fig = Figure(figsize=(7, 5))
        ax_lr, ax_s = fig.subplots(2, 1, sharex=True)
        ax_lr.plot(epoch, [_num(r["lr"]) for r in data.timeline], lw=1)
        ax_lr.set_ylabel("learning rate")
        ax_s.step(epoch, [_num(r["scheduled_sparsity"]) for r in data.timeline], where="post", lw=1)
        ev = [(_num(r["epoch"]), _num(r["scheduled_sparsity"])) for r in data.timeline if r["prune_flag"] == "1"]
        if ev and len(ev) <= 200:
            ax_s.plot(*zip(*ev), "o", ms=3)
        ax_s.set_ylabel("sparsity")
        ax_s.set_xlabel("epoch")
        fig.tight_layout()
        files.append(dest / "schedule.png")
        fig.savefig(files[-1], dpi=120)

    if rows:
        fig = Figure(figsize=(7, 4))
        ax = fig.subplots()
        s = [x["achieved_sparsity"] for x in rows]
        ax.plot(s, [x["measured_loss_increase"] for x in rows], "o-", ms=3, label="measured")
        pred = [x["predicted_loss_increase"] for x in rows]
        if not all(math.isnan(p) for p in pred):
            ax.plot(s, pred, "s--", ms=3, label="predicted")
        ax.set_xlabel("sparsity after prune step")
        ax.set_ylabel("loss increase")
        ax.legend()
        fig.tight_layout()
        files.append(dest / "prune_events.png")
        fig.savefig(files[-1], dpi=120)
    return files


def report(run_dir, out_dir=None, figures: bool = True) -> Summary:
    """Write ``sparsity_vs_loss.csv``, ``schedule_trace.csv``, ``summary.txt`` and figures.

    Output goes to ``out_dir`` (default: ``<run_dir>/report``). Partial runs are
    reported with whatever they contain.
    """
    data = load_run(run_dir)
    dest = Path(out_dir) if out_dir is not None else Path(run_dir) / "report"
    dest.mkdir(parents=True, exist_ok=True)
    rows = sparsity_loss_rows(data)
    files = [_write_rows(dest / "sparsity_vs_loss.csv", SPARSITY_LOSS_FIELDS, rows)]
    if data.timeline:
        files.append(_write_rows(dest / "schedule_trace.csv", SCHEDULE_FIELDS, data.timeline))
    if figures:
        files.extend(_figures(data, rows, dest))
    text = summary_text(data, rows)
    (dest / "summary.txt").write_text(text + "\n")
    files.append(dest / "summary.txt")
    return Summary(text, files, data.warnings)


def _metrics(data: RunData) -> dict:
    r = data.report or {}
    fin, dense = r.get("final", {}), r.get("dense_baseline", {})
    return {
        "status": r.get("status", "missing"),
        "method": r.get("method"),
        "group_size": r.get("group_size"),
        "final_sparsity": r.get("final_sparsity"),
        "prune_events": r.get("prune_events"),
        "heldout_loss": fin.get("heldout_loss"),
        "heldout_accuracy": fin.get("heldout_accuracy"),
        "train_loss": fin.get("train_loss"),
        "train_accuracy": fin.get("train_accuracy"),
        "dense_heldout_loss": dense.get("heldout_loss"),
        "dense_heldout_accuracy": dense.get("heldout_accuracy"),
        "estimator_memory_bytes": r.get("estimator_memory_bytes"),
    }


def compare(run_a, run_b, out_dir=None) -> Summary:
    """Side-by-side final metrics of two runs; optionally written as ``compare.csv``."""
    a, b = load_run(run_a), load_run(run_b)
    ma, mb = _metrics(a), _metrics(b)
    rows = [(k, ma[k], mb[k]) for k in COMPARE_METRICS]
    text = _table(("metric", a.name, b.name), rows)
    warnings = [f"{a.name}: {w}" for w in a.warnings] + [f"{b.name}: {w}" for w in b.warnings]
    if warnings:
        text += f"\n\nwarnings ({len(warnings)}):\n" + "\n".join(f"  - {w}" for w in warnings)
    files = []
    if out_dir is not None:
        dest = Path(out_dir)
        dest.mkdir(parents=True, exist_ok=True)
        files.append(_write_rows(dest / "compare.csv", ("metric", "a", "b"),
                                 [{"metric": k, "a": x, "b": y} for k, x, y in rows]))
    return Summary(text, files, warnings)
