"""Run directories (report.json, CSV tables, arrays, PNG triptychs) and checkpoint files."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import FormatError, scale_for_display, write_png
from .metrics import MetricsReport, lp_norms, report as make_report, ssim
from .models import Model, ModelSpec, load, save

SCHEMA = 1
SUMMARY_COLUMNS = ["method", "asr", "ssim", "l0", "l1", "l2", "linf", "n"]
TABLE_COLUMNS = ["method", "image_id", "label", "predicted", "success", "ssim", "l0", "l1", "l2",
                 "linf", "iterations_used", "error"]


def image_record(result) -> dict:
    l0, l1, l2, linf = lp_norms(result.delta)
    return {
        "image_id": result.image_id,
        "label": int(result.label),
        "predicted": int(result.predicted),
        "success": bool(result.success),
        "ssim": ssim(result.original, result.adversarial),
        "l0": l0, "l1": l1, "l2": l2, "linf": linf,
        "iterations_used": int(result.iterations_used),
        "loss_history": [float(v) for v in result.loss_history],
        "mask_stats": result.mask_stats,
        "error": result.error,
    }


def build_report(results: Sequence, config: dict, method: str,
                 metrics: Optional[MetricsReport] = None, extra: Optional[dict] = None) -> dict:
    """Assemble the JSON-ready report for one attack run."""
    metrics = metrics if metrics is not None else make_report(results)
    out = {
        "schema": SCHEMA,
        "method": method,
        "config": config,
        "metrics": metrics.to_dict(),
        "images": [image_record(r) for r in results],
    }
    if extra:
        out.update(extra)
    return out


def write_run(results: Sequence, report: dict, path, triptychs: int = 0) -> Path:
    """Write ``report.json``, ``table.csv`` (one row per image) and ``summary.csv``.

    Args:
        results: The attack results the report describes.
        report: Output of :func:`build_report`.
        path: Run directory; created if missing.
        triptychs: Write clean | scaled delta | adversarial PNGs for the
            first this-many results.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    method = report["method"]
    rows = [{**rec, "method": method} for rec in report["images"]]
    write_csv([_blank(r, TABLE_COLUMNS) for r in rows], root / "table.csv", TABLE_COLUMNS)
    summary = {"method": method, **report["metrics"]}
    write_csv([_blank(summary, SUMMARY_COLUMNS)], root / "summary.csv", SUMMARY_COLUMNS)

    if len(results):
        np.savez_compressed(
            root / "arrays.npz",
            original=np.stack([r.original for r in results]),
            delta=np.stack([r.delta for r in results]),
            adversarial=np.stack([r.adversarial for r in results]))

    if triptychs:
        (root / "png").mkdir(exist_ok=True)
        for r in list(results)[:triptychs]:
            write_png(triptych(r.original, r.delta, r.adversarial),
                      root / "png" / f"{_safe(r.image_id)}.png")
    return root


def triptych(original: np.ndarray, delta: np.ndarray, adversarial: np.ndarray, gap: int = 1) -> np.ndarray:
    """Side-by-side [3,H,3W+2gap] image; the middle panel is min-max scaled (display only)."""
    c, h, _ = original.shape
    sep = np.ones((c, h, gap))
    return np.concatenate([original, sep, scale_for_display(delta), sep, adversarial], axis=2)


def _blank(row: dict, columns: Sequence[str]) -> dict:
    return {k: ("" if row.get(k) is None else row[k]) for k in columns}


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def read_run(path) -> dict:
    """Load ``report.json`` from a run directory."""
    f = Path(path) / "report.json"
    try:
        data = json.loads(f.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{f}: invalid JSON ({exc})") from exc
    if data.get("schema") != SCHEMA:
        raise FormatError(f"{f}: unsupported report schema {data.get('schema')!r}")
    return data


def read_results(path) -> list:
    """Rebuild :class:`AttackResult` objects from a run directory."""
    from .attacks import AttackResult

    root = Path(path)
    rep = read_run(root)
    recs = rep["images"]
    if not recs:
        return []
    with np.load(root / "arrays.npz") as arrays:
        orig, delta, adv = arrays["original"], arrays["delta"], arrays["adversarial"]
    if len(orig) != len(recs):
        raise FormatError(f"{root}: arrays.npz holds {len(orig)} images, report lists {len(recs)}")
    return [AttackResult(rec["image_id"], rec["label"], orig[i], delta[i], adv[i], rec["success"],
                         rec["predicted"], rep["method"], rec["loss_history"], rec["iterations_used"],
                         rec["mask_stats"], rec["error"])
            for i, rec in enumerate(recs)]


def write_csv(rows: Sequence[dict], path, columns: Optional[Sequence[str]] = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(save(model))


def load_checkpoint(path, expected_spec: Optional[ModelSpec] = None) -> Model:
    return load(Path(path).read_bytes(), expected_spec)
