"""Result persistence: CSV/text tables, confusion matrices, curves, embeddings, plots."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .pipeline import ExperimentResult, sweep_table

OUT_DIR_ENV = "SSIDEC_OUT_DIR"


def resolve_out_dir(out_dir=None) -> Path:
    """Explicit argument, else the environment override, else ./results."""
    return Path(out_dir or os.environ.get(OUT_DIR_ENV) or "results")


def _prepare(out_dir, force: bool) -> Path:
    out = resolve_out_dir(out_dir)
    if out.exists() and not out.is_dir():
        raise NotADirectoryError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty; pass force=True (--force) to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"{out} is not writable")
    return out


def _label(res: ExperimentResult) -> str:
    return res.label or "proposed"


def _result_rows(results):
    rows = []
    for res in results:
        for t in res.trials:
            row = {"task": res.task_id, "mode": res.config["mode"], "method": _label(res), "trial": t.trial,
                   "seed": t.seed, "config_hash": res.config_hash,
                   "acc": "" if t.report is None else t.report.acc,
                   "nmi": "" if t.report is None else t.report.nmi,
                   "stage1_acc": t.stage_metrics.get("stage1_acc", ""),
                   "stage2_acc": t.stage_metrics.get("stage2_acc", ""),
                   "failure": "" if t.failure is None else f"{t.failure['stage']}: {t.failure['error']}",
                   "seconds": round(sum(t.timings.values()), 3)}
            rows.append(row)
    return rows


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _fmt(x) -> str:
    return f"{x:.4f}" if isinstance(x, float) else str(x)


def _text_table(results) -> str:
    lines = [f"{'task':<8} {'method':<16} {'trials':>6} {'metric':<10} {'mean':>8} {'std':>8}"]
    for res in results:
        for metric, stats in sorted(res.summary.items()):
            lines.append(f"{res.task_id:<8} {_label(res):<16} {stats['n']:>6} {metric:<10} "
                         f"{stats['mean']:>8.4f} {stats['std']:>8.4f}")
        failed = [t for t in res.trials if t.failure]
        for t in failed:
            lines.append(f"  trial {t.trial} failed in {t.failure['stage']}: {t.failure['error']}")
    return "\n".join(lines) + "\n"


def _confusion_rows(results):
    rows = []
    for res in results:
        for t in res.trials:
            if t.report is None:
                continue
            for i, counts in enumerate(t.report.confusion):
                total = sum(counts)
                for j, c in enumerate(counts):
                    rows.append({"task": res.task_id, "method": _label(res), "trial": t.trial, "true": i,
                                 "pred": j, "count": c, "percent": 100.0 * c / total if total else 0.0})
    return rows


def _curve_rows(results):
    rows = []
    for res in results:
        for t in res.trials:
            for name, values in t.curves.items():
                for epoch, v in enumerate(values):
                    rows.append({"task": res.task_id, "method": _label(res), "trial": t.trial,
                                 "curve": name, "epoch": epoch, "value": v})
            for i, v in enumerate(t.change_trajectory):
                rows.append({"task": res.task_id, "method": _label(res), "trial": t.trial,
                             "curve": "pseudo_label_change", "epoch": i, "value": v})
    return rows


def _write_embeddings(out: Path, results) -> None:
    """Row-major little-endian float32 matrix plus a JSON sidecar describing the rows."""
    mats, meta = [], []
    for res in results:
        for t in res.trials:
            if t.embeddings is None:
                continue
            Z = np.asarray(t.embeddings, dtype="<f4")
            mats.append(Z)
            meta.append({"task": res.task_id, "method": _label(res), "trial": t.trial, "rows": int(len(Z)),
                         "labels": None if t.embedding_labels is None else np.asarray(t.embedding_labels).tolist(),
                         "assignments": None if t.embedding_assignments is None
                         else np.asarray(t.embedding_assignments).tolist()})
    dims = {m.shape[1] for m in mats}
    if len(dims) > 1:
        # mixed N_rep (sweeps): one file per block
        for i, Z in enumerate(mats):
            Z.tofile(out / f"embeddings_{i}.f32")
            meta[i]["file"] = f"embeddings_{i}.f32"
            meta[i]["cols"] = int(Z.shape[1])
        np.zeros((0,), dtype="<f4").tofile(out / "embeddings.f32")
    else:
        Z = np.concatenate(mats) if mats else np.zeros((0, 0), dtype="<f4")
        Z.tofile(out / "embeddings.f32")
        for m in meta:
            m["file"] = "embeddings.f32"
            m["cols"] = int(Z.shape[1]) if Z.ndim == 2 else 0
    (out / "embeddings.json").write_text(json.dumps(meta), encoding="utf-8")


def _plots(out: Path, results, sweep_axis) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for r_idx, res in enumerate(results):
        for t in res.trials:
            tag = f"{r_idx}_{res.task_id}_{_label(res)}_t{t.trial}".replace("/", "_").replace("=", "")
            if t.report is not None:
                cm = np.asarray(t.report.confusion, dtype=float)
                pct = 100 * cm / np.maximum(cm.sum(1, keepdims=True), 1)
                fig, ax = plt.subplots(figsize=(4, 4))
                ax.imshow(pct, cmap="Blues", vmin=0, vmax=100)
                for (i, j), v in np.ndenumerate(pct):
                    ax.text(j, i, f"{v:.0f}", ha="center", va="center", fontsize=7)
                ax.set_xlabel("predicted")
                ax.set_ylabel("true")
                fig.tight_layout()
                fig.savefig(out / f"confusion_{tag}.png", dpi=100)
                plt.close(fig)
            if t.curves:
                fig, ax = plt.subplots(figsize=(5, 3))
                for name, values in t.curves.items():
                    if values:
                        ax.plot(values, label=name)
                ax.set_xlabel("epoch")
                ax.set_yscale("symlog", linthresh=1e-3)
                ax.legend(fontsize=6)
                fig.tight_layout()
                fig.savefig(out / f"curves_{tag}.png", dpi=100)
                plt.close(fig)
    if sweep_axis:
        table = sweep_table(results)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.errorbar(range(len(table)), [r["mean"] for r in table], yerr=[r["std"] for r in table], marker="o")
        ax.set_xticks(range(len(table)), [r["label"].split("=", 1)[-1] for r in table])
        ax.set_xlabel(sweep_axis)
        ax.set_ylabel(table[0]["metric"] if table else "")
        fig.tight_layout()
        fig.savefig(out / "sweep.png", dpi=100)
        plt.close(fig)


def emit_report(results, out_dir=None, force: bool = False, plots: bool = True,
                sweep_axis: str | None = None) -> Path:
    """Write every artefact of one or more ExperimentResults into ``out_dir``."""
    if isinstance(results, ExperimentResult):
        results = [results]
    results = list(results)
    if not results:
        raise ValueError("nothing to report")
    out = _prepare(out_dir, force)
    _write_csv(out / "results.csv", _result_rows(results))
    (out / "results.txt").write_text(_text_table(results), encoding="utf-8")
    _write_csv(out / "confusion.csv", _confusion_rows(results))
    _write_csv(out / "curves.csv", _curve_rows(results))
    _write_embeddings(out, results)
    (out / "result.json").write_text(json.dumps([r.to_dict() for r in results], indent=1), encoding="utf-8")
    if sweep_axis:
        _write_csv(out / "sweep.csv", sweep_table(results))
    if plots:
        _plots(out, results, sweep_axis)
    return out


def load_results(path) -> list[ExperimentResult]:
    path = Path(path)
    if path.is_dir():
        path = path / "result.json"
    data = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = [data]
    return [ExperimentResult.from_dict(d) for d in data]
