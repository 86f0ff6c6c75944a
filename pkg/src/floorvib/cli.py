"""Command-line surface: simulate, calibrate, localize, eval.

Exit codes: 0 success, 1 internal error, 2 input/config error. Every
command is deterministic given its inputs and seed; reruns produce
byte-identical output files.
"""

from __future__ import annotations

import argparse
import glob
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import fileio, fusion, locate, report
from .config import RunConfig
from .errors import (CalibrationError, ConfigError, EvalError, InputError,
                     PipelineError, ScenarioError)
from .geometry import Rect
from .simfloor import scenario_suite, synthesize

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON path")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("--out", required=True, help="output directory or file")
    p.add_argument("-v", "--verbose", action="store_true")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _parse_floor(text: Optional[str]) -> Optional[Rect]:
    if not text:
        return None
    try:
        x0, x1, y0, y1 = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise InputError(f"--floor expects 'x0,x1,y0,y1': {exc}") from exc
    return Rect(x0, x1, y0, y1)


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.suite:
        scenarios = scenario_suite(args.suite, trials=args.trials)
    else:
        scenarios = [fileio.load_scenario(args.scenario)]
        if args.trials and args.trials > 1:
            scenarios = [replace(scenarios[0],
                                 seed=scenarios[0].seed + i,
                                 trial_id=f"{scenarios[0].trial_id}-{i:03d}")
                         for i in range(args.trials)]
    if getattr(args, "seed", None) is not None:
        scenarios = [replace(sc, seed=cfg.seed + i)
                     for i, sc in enumerate(scenarios)]
    for i, sc in enumerate(scenarios):
        record, events, truth = synthesize(sc)
        stem = out / f"trial_{i:03d}"
        fileio.write_trace(record, f"{stem}.trace.csv")
        fileio.write_events(events, f"{stem}.events.csv")
        fileio.write_truth(sc, events, truth, f"{stem}.truth.json")
    print(f"wrote {len(scenarios)} trial(s) to {out}")
    return EXIT_OK


def _paired_trials(trace_paths: List[str]):
    trials = []
    for tp in sorted(trace_paths):
        ep = tp.replace(".trace.csv", ".events.csv")
        if ep == tp or not Path(ep).exists():
            raise InputError(f"no events file next to {tp} "
                             "(expected *.events.csv)")
        trials.append((fileio.read_trace(tp), fileio.read_events(ep)))
    return trials


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    trace_paths = sorted(glob.glob(args.traces))
    if not trace_paths:
        raise InputError(f"no trace files match {args.traces!r}")
    trials = _paired_trials(trace_paths)
    profile = fusion.calibrate(
        trials,
        floor_bounds=_parse_floor(args.floor),
        detection_band=cfg.detection_band,
        arrival_band=cfg.arrival_band,
        z=cfg.noise_ci_z,
        detection_sigma=cfg.detection_sigma,
        min_gap_s=cfg.min_gap_s,
        window_s=cfg.window_s,
        v_min=cfg.v_min_mps,
        v_max=cfg.v_max_mps,
    )
    out = Path(args.out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "profile.json"
    profile.save(out)
    md = profile.metadata
    print(f"calibrated on {md['trial_count']} trial(s), "
          f"{md['footsteps_used']} footsteps, "
          f"{md['velocity_samples']} velocity samples -> {out}")
    if md["needs_more_trials"]:
        print("warning: velocity confidence interval above 100 m/s; "
              "more fusion trials recommended")
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg = _load_config(args)
    profile = fusion.CalibrationProfile.load(args.profile)
    record = fileio.read_trace(args.trace)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.trace).name
    for suffix in (".trace.csv", ".csv"):
        if stem.endswith(suffix):
            stem = stem[:-len(suffix)]
            break

    steps = locate.track_trial(
        record, profile,
        resolution=cfg.grid_resolution_m,
        norm=cfg.residual_norm,
        detection_sigma=cfg.detection_sigma,
        min_gap_s=cfg.min_gap_s,
        window_s=cfg.window_s,
        proposal_size_m=cfg.proposal_size_m,
        initial_margin_m=cfg.initial_margin_m,
        z=cfg.noise_ci_z,
        ratio_sigmas=cfg.ratio_sigmas,
    )
    loc_path = out / f"{stem}.loc.csv"
    fileio.write_localizations(steps, loc_path)

    from .gait import FootstepSeq, spatial_params
    gait_path = out / f"{stem}.gait.json"
    if len(steps) >= 2:
        params = spatial_params(FootstepSeq.from_localized(steps))
        summary = params.summary()
    else:
        summary = {}
    import json
    gait_path.write_text(json.dumps(
        {"trial": stem, "steps": len(steps), "parameters": summary},
        indent=2, sort_keys=True) + "\n")

    if args.baseline:
        base = _baseline_track(record, profile, cfg)
        fileio.write_localizations(base, out / f"{stem}.baseline.csv")
    print(f"localized {len(steps)} footstep(s) -> {loc_path}")
    return EXIT_OK


def _baseline_track(record, profile, cfg: RunConfig):
    """Constant-velocity reference method: whole-floor joint (p, v) search
    per detected footstep, sharing this pipeline's detection and arrival
    estimation."""
    from .signal import denoise_record, detect_footsteps
    floor = profile.velocity.bounds
    noise = profile.noise
    segs = detect_footsteps(denoise_record(record, noise), noise,
                            profile.detection_band,
                            threshold_sigma=cfg.detection_sigma,
                            min_gap_s=cfg.min_gap_s, window_s=cfg.window_s)
    whole = locate.propose_next(None, floor, margin_m=cfg.initial_margin_m)
    max_delay = floor.diagonal / profile.velocity.v_min
    out = []
    for seg in segs:
        try:
            est, fl = locate.estimate_arrivals(seg, whole, profile,
                                               z=cfg.noise_ci_z,
                                               ratio_sigmas=cfg.ratio_sigmas)
            vec = locate.tdoa(est, seg, max_delay)
            step = locate.baseline_localize(vec, whole.rect, profile.sensors,
                                            v_min=cfg.v_min_mps,
                                            v_max=cfg.v_max_mps,
                                            resolution=cfg.grid_resolution_m,
                                            norm=cfg.residual_norm,
                                            time_s=seg.center_time)
        except PipelineError as exc:
            log.debug("baseline skipped segment at %.3f s: %s",
                      seg.center_time, exc)
            continue
        out.append(step)
    return out


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    est_paths = sorted(glob.glob(str(Path(args.estimates) / "*.loc.csv")))
    if not est_paths:
        raise InputError(f"no *.loc.csv files in {args.estimates!r}")
    trials = []
    for ep in est_paths:
        stem = Path(ep).name[:-len(".loc.csv")]
        truth_events = Path(args.truth) / f"{stem}.events.csv"
        if not truth_events.exists():
            raise InputError(f"no truth events for {stem} "
                             f"(expected {truth_events})")
        baseline_path = Path(ep).with_name(f"{stem}.baseline.csv")
        trials.append(report.TrialEval(
            trial_id=stem,
            estimates=fileio.read_localizations(ep),
            truth=fileio.read_events(truth_events),
            baseline=(fileio.read_localizations(baseline_path)
                      if baseline_path.exists() else None),
        ))
    doc = report.evaluate_trials(trials, max_gap_s=cfg.match_gap_s)
    paths = report.write_metrics(doc, args.out)
    if not args.no_plots:
        paths += report.write_plots(doc, args.out)
    print(report.format_table(doc), end="")
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="floorvib",
        description="Footstep localization and spatial gait analysis from "
                    "floor vibration")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render synthetic-floor trials")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--suite", help="built-in scenario suite name")
    g.add_argument("--scenario", help="scenario JSON path")
    p.add_argument("--trials", type=int, help="number of trials")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fusion-stage calibration")
    p.add_argument("--traces", required=True,
                   help="glob of *.trace.csv files (events expected "
                        "alongside as *.events.csv)")
    p.add_argument("--floor", help="floor bounds as 'x0,x1,y0,y1' meters")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("localize", help="vibration-only operating stage")
    p.add_argument("--trace", required=True, help="trace file")
    p.add_argument("--profile", required=True, help="calibration profile")
    p.add_argument("--baseline", action="store_true",
                   help="also run the constant-velocity baseline")
    _add_common(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", help="compare estimates against ground truth")
    p.add_argument("--estimates", required=True,
                   help="directory with *.loc.csv (and *.baseline.csv)")
    p.add_argument("--truth", required=True,
                   help="directory with *.events.csv")
    p.add_argument("--no-plots", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError, CalibrationError, ScenarioError,
            EvalError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PipelineError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
