"""Evaluation metrics and report/plot generation.

Aggregates per-trial localization errors and gait-parameter comparisons
into one metrics document, renders a plain-text table, and emits static
error-bar plots (no interactive UI; reports are consumed offline).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EvalError
from .fusion import FootstepEvent
from .gait import (FootstepSeq, GaitParameters, ParamComparison,
                   compare_params, match_by_time)
from .locate import LocalizedFootstep

log = logging.getLogger(__name__)


@dataclass
class TrialEval:
    """One trial's estimates paired with its ground truth."""

    trial_id: str
    estimates: Sequence[LocalizedFootstep]
    truth: Sequence[FootstepEvent]
    baseline: Optional[Sequence[LocalizedFootstep]] = None


def _loc_errors(steps: Sequence[LocalizedFootstep],
                truth: Sequence[FootstepEvent],
                max_gap_s: float) -> np.ndarray:
    if not steps or not truth:
        return np.array([])
    est = FootstepSeq.from_localized(steps)
    tru = FootstepSeq.from_events(truth)
    pairs = match_by_time(est.times, tru.times, max_gap_s)
    return np.array([float(np.linalg.norm(est.locations[i] - tru.locations[j]))
                     for i, j in pairs])


def _summary(errors: np.ndarray) -> dict:
    if errors.size == 0:
        return {"count": 0, "mae_m": None, "std_m": None, "median_m": None,
                "p90_m": None}
    return {"count": int(errors.size),
            "mae_m": float(errors.mean()),
            "std_m": float(errors.std()),
            "median_m": float(np.median(errors)),
            "p90_m": float(np.percentile(errors, 90))}


def evaluate_trials(trials: Sequence[TrialEval],
                    max_gap_s: float = 0.3) -> dict:
    """Localization MAE/std plus per-parameter gait MAPE over all trials.

    Includes a baseline-vs-enhanced comparison when baseline estimates are
    present. Raises EvalError when nothing matches anywhere.
    """
    enh = []
    base = []
    mape_acc: Dict[str, List[Tuple[float, int]]] = {}
    abs_acc: Dict[str, List[Tuple[float, int]]] = {}
    matched = missed = spurious = 0
    per_trial = []
    for t in trials:
        errs = _loc_errors(t.estimates, t.truth, max_gap_s)
        enh.append(errs)
        row = {"trial_id": t.trial_id, "localization": _summary(errs)}
        if t.baseline is not None:
            berrs = _loc_errors(t.baseline, t.truth, max_gap_s)
            base.append(berrs)
            row["baseline"] = _summary(berrs)
        try:
            cmp_ = compare_params(FootstepSeq.from_localized(t.estimates),
                                  FootstepSeq.from_events(t.truth), max_gap_s)
        except EvalError:
            cmp_ = None
        if cmp_ is not None:
            matched += cmp_.matched_steps
            missed += cmp_.missed_truth
            spurious += cmp_.spurious_estimates
            for name, v in cmp_.mape.items():
                if np.isfinite(v):
                    n = len(cmp_.location_errors_m)
                    mape_acc.setdefault(name, []).append((v, n))
            for name, v in cmp_.abs_error.items():
                if np.isfinite(v):
                    abs_acc.setdefault(name, []).append(
                        (v, len(cmp_.location_errors_m)))
            row["gait_mape_pct"] = {k: (round(v, 3) if np.isfinite(v) else None)
                                    for k, v in cmp_.mape.items()}
        per_trial.append(row)

    all_enh = np.concatenate(enh) if enh else np.array([])
    if all_enh.size == 0:
        raise EvalError("no footsteps matched between estimates and truth")

    def pooled(acc):
        out = {}
        for name, pairs in acc.items():
            w = sum(n for _, n in pairs)
            out[name] = (float(sum(v * n for v, n in pairs) / w)
                         if w else None)
        return out

    doc = {
        "localization": _summary(all_enh),
        "gait_mape_pct": pooled(mape_acc),
        "gait_abs_error": pooled(abs_acc),
        "matched_steps": matched,
        "missed_truth_steps": missed,
        "spurious_estimates": spurious,
        "trials": per_trial,
    }
    if base:
        all_base = np.concatenate(base)
        doc["baseline"] = _summary(all_base)
        if all_base.size and all_enh.size:
            doc["median_error_ratio_enhanced_over_baseline"] = float(
                np.median(all_enh) / np.median(all_base))
    return doc


def format_table(doc: dict) -> str:
    """Plain-text summary of an evaluation document."""
    lines = []
    loc = doc["localization"]
    lines.append("Localization (enhanced)")
    lines.append(f"  steps: {loc['count']}  MAE: {loc['mae_m']:.3f} m  "
                 f"std: {loc['std_m']:.3f} m  median: {loc['median_m']:.3f} m")
    if "baseline" in doc:
        b = doc["baseline"]
        lines.append("Localization (baseline, constant-velocity search)")
        lines.append(f"  steps: {b['count']}  MAE: {b['mae_m']:.3f} m  "
                     f"std: {b['std_m']:.3f} m  median: {b['median_m']:.3f} m")
        r = doc.get("median_error_ratio_enhanced_over_baseline")
        if r is not None:
            lines.append(f"  median error ratio (enhanced/baseline): {r:.3f}")
    lines.append("Gait parameter MAPE")
    for name, v in doc["gait_mape_pct"].items():
        lines.append(f"  {name:>14}: " + (f"{v:6.1f} %" if v is not None
                                          else "   n/a"))
    lines.append(f"matched {doc['matched_steps']}  "
                 f"missed {doc['missed_truth_steps']}  "
                 f"spurious {doc['spurious_estimates']}")
    return "\n".join(lines) + "\n"


def write_metrics(doc: dict, out_dir, stem: str = "metrics") -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath = out / f"{stem}.json"
    tpath = out / f"{stem}.txt"
    jpath.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    tpath.write_text(format_table(doc))
    return [jpath, tpath]


def write_plots(doc: dict, out_dir) -> List[Path]:
    """Error-bar comparison and MAPE bar charts as standalone PNGs."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    labels, means, stds = ["enhanced"], [doc["localization"]["mae_m"]], \
        [doc["localization"]["std_m"]]
    if "baseline" in doc:
        labels.append("baseline")
        means.append(doc["baseline"]["mae_m"])
        stds.append(doc["baseline"]["std_m"])
    ax.bar(labels, means, yerr=stds, capsize=6,
           color=["tab:blue", "tab:orange"][:len(labels)])
    ax.set_ylabel("localization error (m)")
    ax.set_title("Footstep localization error")
    fig.tight_layout()
    p = out / "localization_error.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    mape = {k: v for k, v in doc["gait_mape_pct"].items() if v is not None}
    if mape:
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        ax.bar(list(mape), list(mape.values()), color="tab:green")
        ax.set_ylabel("MAPE (%)")
        ax.set_title("Spatial gait parameter error")
        ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
        p = out / "gait_mape.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)
    return paths
