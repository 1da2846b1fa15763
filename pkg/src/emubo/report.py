"""Run CSV export/import, metric computation across runs, summary CSV and SVG plots."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .metrics import (MetricError, Summary, aggregate, aggregate_by_cost, inference_regret,
                      log_hv_regret, log_simple_regret, per_step_simple_regret, simple_regret)
from .problems import Problem, estimate_optimum, make_problem
from .runner import ExperimentConfig, Row, RunRecord

METRICS = ("log_simple_regret", "simple_regret", "per_step_simple_regret", "inference_regret",
           "log_hv_difference")
CONFIG_FILE = "config.json"


class ExportError(RuntimeError):
    pass


def run_columns(k: int) -> list[str]:
    return (["iteration", "seed", "point_json", "fidelity"] + [f"value_{j}" for j in range(k)]
            + [f"noiseless_{j}" for j in range(k)]
            + ["step_cost", "cum_cost", "best_noiseless", "incumbent_mean_point_json", "wall_ms"])


def _num(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def _point_json(p) -> str:
    if p is None:
        return ""
    if isinstance(p, (int, np.integer)):
        return json.dumps({"row": int(p)})
    return json.dumps([float(v) for v in p])


def _parse_point(s: str):
    if s == "":
        return None
    v = json.loads(s)
    return int(v["row"]) if isinstance(v, dict) else [float(a) for a in v]


def run_csv_text(rec: RunRecord, wall_clock: bool = True) -> str:
    """CSV text of one run. Without ``wall_clock`` the ``wall_ms`` cells are left empty."""
    if not rec.rows:
        raise ExportError("record has no rows")
    k = len(rec.rows[0].values)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(run_columns(k))
    for r in rec.rows:
        w.writerow([r.iteration, rec.seed, _point_json(r.point), _num(r.fidelity)]
                   + [_num(v) for v in r.values] + [_num(v) for v in r.noiseless]
                   + [_num(r.step_cost), _num(r.cum_cost), _num(r.best_noiseless),
                      _point_json(r.incumbent_mean_point),
                      _num(r.wall_ms) if wall_clock else ""])
    return buf.getvalue()


def parse_run_csv(text: str, problem: str, method: str, meta: dict | None = None) -> RunRecord:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ExportError("empty CSV")
    head = rows[0]
    k = sum(h.startswith("value_") for h in head)
    if head != run_columns(k):
        raise ExportError("unexpected run CSV columns")
    out, seed = [], None
    for r in rows[1:]:
        seed = int(r[1])
        num = lambda s: None if s == "" else float(s)
        vals = tuple(float(v) for v in r[4:4 + k])
        nl = tuple(float(v) for v in r[4 + k:4 + 2 * k])
        j = 4 + 2 * k
        out.append(Row(int(r[0]), _parse_point(r[2]), num(r[3]), vals, nl, float(r[j]),
                       float(r[j + 1]), float(r[j + 2]), _parse_point(r[j + 3]), num(r[j + 4])))
    if seed is None:
        raise ExportError("run CSV has no rows")
    return RunRecord(problem, method, seed, out, dict(meta or {}))


def _run_name(seed: int) -> str:
    return f"run_seed{seed}.csv"


def export_runs(records: list[RunRecord], out_dir: str | Path, cfg: ExperimentConfig | None = None,
                wall_clock: bool = False) -> list[Path]:
    """Write one CSV per run plus ``config.json``; timings go to a sidecar unless ``wall_clock``.

    Everything is rendered before the directory is touched, so a bad record
    leaves no partial output.
    """
    if not records:
        raise ExportError("no records to export")
    texts = {_run_name(r.seed): run_csv_text(r, wall_clock) for r in records}
    timing = {}
    if not wall_clock:
        for r in records:
            timing[f"run_seed{r.seed}.timing.csv"] = "wall_ms\n" + "".join(
                _num(row.wall_ms) + "\n" for row in r.rows)
    manifest = {
        "problem": records[0].problem,
        "method": records[0].method,
        "seeds": [r.seed for r in records],
        "meta": {str(r.seed): r.meta for r in records},
        "config": cfg.to_dict() if cfg is not None else None,
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in {**texts, **timing}.items():
        (out / name).write_text(text)
        paths.append(out / name)
    (out / CONFIG_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    paths.append(out / CONFIG_FILE)
    return paths


def load_runs(run_dir: str | Path) -> tuple[list[RunRecord], dict]:
    """Read back every run of an exported directory (timings restored from sidecars)."""
    d = Path(run_dir)
    if not (d / CONFIG_FILE).exists():
        raise ExportError(f"{d} has no {CONFIG_FILE}")
    man = json.loads((d / CONFIG_FILE).read_text())
    recs = []
    for s in man["seeds"]:
        rec = parse_run_csv((d / _run_name(s)).read_text(), man["problem"], man["method"],
                            man["meta"].get(str(s), {}))
        side = d / f"run_seed{s}.timing.csv"
        if side.exists():
            vals = side.read_text().splitlines()[1:]
            for row, v in zip(rec.rows, vals):
                row.wall_ms = None if v == "" else float(v)
        recs.append(rec)
    return recs, man


# --- metrics over runs ----------------------------------------------------------------

def metric_series(rec: RunRecord, metric: str, problem: Problem) -> np.ndarray:
    if metric not in METRICS:
        raise MetricError(f"unknown metric {metric!r}; known: {', '.join(METRICS)}")
    est = estimate_optimum(problem)
    if metric == "log_hv_difference":
        if not problem.is_multi_objective:
            raise MetricError("log_hv_difference needs a multi-objective problem")
        return log_hv_regret(rec, est.hv_star, est.ref)
    if problem.is_multi_objective:
        raise MetricError(f"{metric} needs a single-objective problem")
    fn = {"log_simple_regret": log_simple_regret, "simple_regret": simple_regret,
          "per_step_simple_regret": per_step_simple_regret}.get(metric)
    if fn is not None:
        return fn(rec, est.f_star)
    return inference_regret(rec, problem, est.f_star)


def summarize(records: list[RunRecord], metric: str, problem: Problem) -> Summary:
    series = [metric_series(r, metric, problem) for r in records]
    if problem.is_multi_fidelity:
        return aggregate_by_cost(records, series)
    n = min(len(s) for s in series)
    return aggregate([s[:n] for s in series])


def summary_csv_text(s: Summary, metric: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([s.x_label.replace(" ", "_"), f"{metric}_mean", "ci_lower", "ci_upper", "n_seeds"])
    for x, m, lo, hi in zip(s.x, s.mean, s.lower, s.upper):
        w.writerow([repr(float(x)), repr(float(m)), repr(float(lo)), repr(float(hi)), s.n])
    return buf.getvalue()


def plot_svg(summaries: dict[str, Summary], metric: str, path: str | Path) -> Path:
    """Mean lines with CI bands, one per label."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "emubo"
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, s in summaries.items():
        ax.plot(s.x, s.mean, label=label)
        ax.fill_between(s.x, s.lower, s.upper, alpha=0.2)
    first = next(iter(summaries.values()))
    ax.set_xlabel(first.x_label)
    ax.set_ylabel(metric.replace("_", " "))
    ax.legend()
    fig.tight_layout()
    p = Path(path)
    fig.savefig(p, format="svg", metadata={"Date": None})
    plt.close(fig)
    return p


def report(run_dir: str | Path, metric: str, svg: bool = False,
           problem: Problem | None = None) -> tuple[Summary, list[Path]]:
    """Aggregate ``metric`` over an exported run directory and write the summary files."""
    recs, man = load_runs(run_dir)
    if problem is None:
        assets = (man.get("config") or {}).get("problem", {}).get("assets")
        noise = (man.get("config") or {}).get("problem", {}).get("noise_std")
        problem = make_problem(man["problem"], assets, **({"noise_std": noise} if noise is not None else {}))
    s = summarize(recs, metric, problem)
    d = Path(run_dir)
    out = [d / f"summary_{metric}.csv"]
    out[0].write_text(summary_csv_text(s, metric))
    if svg:
        out.append(plot_svg({man["method"]: s}, metric, d / f"{metric}.svg"))
    return s, out


def final_line(s: Summary, metric: str, label: str) -> str:
    hw = float(s.half_width[-1])
    return f"{label}: final {metric} = {s.mean[-1]:.4f} +/- {hw:.4f} (95% t, n={s.n})" if math.isfinite(hw) \
        else f"{label}: final {metric} = {s.mean[-1]:.4f}"
