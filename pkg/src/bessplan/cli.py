"""Command line entry point: ``bessplan <command> [options]``.

Exit codes: 0 success, 2 malformed input, 3 invalid input, 1 any other
failure.  Errors are also written to stderr as one JSON line.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import io
from .assembly import ModelConfig
from .exceptions import BessPlanError, ConfigInvalid, ParseError, ValidationError
from .predictor import QuantileLSTM, build_windows
from .robust import BoxSet, RobustInstance, build_single_stage
from .solver import solve
from .synth import ScenarioSpec, generate
from .training import (TaskTemplate, calibrate_forecaster, evaluate, split_indices, train,
                       window_gap, write_history)

log = logging.getLogger("bessplan")


def _common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="YAML run configuration")
    p.add_argument("--out-dir", default=".")


def _data_args(p, checkpoint=False, threshold=False):
    p.add_argument("--network", default=None)
    p.add_argument("--timeseries", default=None)
    if checkpoint:
        p.add_argument("--checkpoint", default=None)
    if threshold:
        p.add_argument("--threshold", default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="bessplan", description="Storage siting and sizing under forecast boxes")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic network and time series")
    _common(p)
    p.add_argument("--days", type=int, default=None)
    p.add_argument("--buses", type=int, default=None)

    for name, help_ in (("solve", "solve the planning LP for given boxes"),
                        ("export-lp", "write the planning LP in text form")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--network", default=None)
        p.add_argument("--boxes", required=True, help="CSV of per-step price/load bounds")
        p.add_argument("--start-step", type=int, default=0)

    p = sub.add_parser("train", help="fit, calibrate and evaluate a forecaster")
    _common(p)
    _data_args(p)
    p.add_argument("--mode", choices=["eto", "end_to_end"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--loss-weight", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--per-target", action="store_true", default=None)

    p = sub.add_parser("calibrate", help="calibrate a conformal threshold for a checkpoint")
    _common(p)
    _data_args(p, checkpoint=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--per-target", action="store_true", default=None)

    p = sub.add_parser("evaluate", help="test-split planning cost, MSE and coverage")
    _common(p)
    _data_args(p, checkpoint=True, threshold=True)
    p.add_argument("--loss-weight", type=float, default=None)

    p = sub.add_parser("export-plot", help="per-step slack power, box bounds and truth as CSV")
    _common(p)
    _data_args(p, checkpoint=True, threshold=True)
    p.add_argument("--window", type=int, default=0, help="index within the test split")
    return parser


def _config(args):
    cfg = io.load_run_config(args.config) if args.config else io.RunConfig()
    if args.seed is not None:
        cfg.scenario = replace(cfg.scenario, seed=args.seed)
        cfg.train = replace(cfg.train, seed=args.seed)
    train_over = {k: getattr(args, a) for k, a in (("mode", "mode"), ("epochs", "epochs"),
                                                    ("loss_weight", "loss_weight"), ("alpha", "alpha"),
                                                    ("learning_rate", "lr"), ("per_target", "per_target"))
                  if getattr(args, a, None) is not None}
    if train_over:
        cfg.train = replace(cfg.train, **train_over)
    return cfg


def _path(args, cfg, key):
    value = getattr(args, key, None) or cfg.paths.get(key)
    if value is None:
        raise ConfigInvalid(f"--{key} is required (or paths.{key} in the config)")
    if not os.path.exists(value):
        raise ParseError(f"{key} file not found: {value}")
    return value


def _out(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _model_config(cfg, horizon, start=0):
    return replace(cfg.model, horizon=horizon, start_step=start)


def cmd_gen(args, cfg):
    over = {k: v for k, v in (("days", args.days), ("n_buses", args.buses)) if v is not None}
    spec = replace(cfg.scenario, **over)
    network, frame = generate(spec)
    io.write_network(network, _out(args, "network.json"))
    io.write_timeseries(frame, _out(args, "timeseries.csv"))
    io.write_json(_out(args, "scenario.json"), spec.to_dict())
    print(json.dumps({"network": _out(args, "network.json"), "timeseries": _out(args, "timeseries.csv"),
                      "steps": len(frame)}))


def _planning_lp(args, cfg):
    network = io.load_network(_path(args, cfg, "network"))
    price_box, load_box = io.load_boxes(args.boxes)
    mc = _model_config(cfg, price_box.shape[0], args.start_step)
    model, lp = build_single_stage(RobustInstance(network, mc, price_box, load_box))
    return model, lp, load_box


def cmd_solve(args, cfg):
    model, lp, _ = _planning_lp(args, cfg)
    result = solve(lp)
    result.check()
    sol = model.solution(result)
    out = dict(status=result.status, objective=sol.objective, x=sol.x.tolist(),
               installed=sol.installed.tolist(),
               slack_power=[[[z.real, z.imag] for z in row] for row in sol.slack_power])
    io.write_json(_out(args, "solution.json"), out)
    print(f"objective {sol.objective:.10g}")
    print("x " + " ".join(f"{v:.6g}" for v in sol.x))
    for t, row in enumerate(sol.slack_power):
        print(f"s0[{t}] " + " ".join(f"{z.real:+.6g}{z.imag:+.6g}j" for z in row))


def cmd_export_lp(args, cfg):
    _, lp, _ = _planning_lp(args, cfg)
    io.write_lp(lp, _out(args, "model.lp"))
    print(json.dumps({"lp": _out(args, "model.lp"), "n_vars": lp.n,
                      "n_eq": lp.A_eq.shape[0], "n_ub": lp.A_ub.shape[0]}))


class _Data:
    """Windows, splits and the planning template for one network + series."""

    def __init__(self, args, cfg):
        self.network = io.load_network(_path(args, cfg, "network"))
        self.frame = io.load_timeseries(_path(args, cfg, "timeseries"), self.network.n_buses)
        self.X, self.Y, self.starts = build_windows(self.frame, self.network.n_buses, cfg.history,
                                                    cfg.model.horizon, cfg.stride)
        self.splits = split_indices(len(self.X), cfg.train.splits,
                                    window_gap(cfg.history, cfg.model.horizon, cfg.stride))
        self.cfg = cfg

    def part(self, name):
        idx = self.splits[("train", "cal", "test").index(name)]
        return self.X[idx], self.Y[idx], self.starts[idx]

    def template(self):
        _, Y, starts = self.part("train")
        tpl = TaskTemplate.from_history(self.network, _model_config(self.cfg, self.cfg.model.horizon), Y)
        tpl.fit_scale(Y, starts)
        return tpl


def cmd_train(args, cfg):
    data = _Data(args, cfg)
    result = train(data.X, data.Y, data.starts, data.network, cfg.train,
                   _model_config(cfg, cfg.model.horizon), cfg.history, cfg.stride)
    result.estimator.save(_out(args, "checkpoint.npz"), metadata=dict(mode=cfg.train.mode))
    io.write_threshold(result.threshold, _out(args, "threshold.json"))
    write_history(_out(args, "history.csv"), result.history)
    io.write_rows(_out(args, "report.csv"), [result.report.row()])
    print(json.dumps(result.report.row(), sort_keys=True))


def cmd_calibrate(args, cfg):
    data = _Data(args, cfg)
    est = QuantileLSTM.load(_path(args, cfg, "checkpoint"))
    X, Y, _ = data.part("cal")
    thr = calibrate_forecaster(est, X, Y, cfg.train.alpha, cfg.train.rule, cfg.train.per_target)
    io.write_threshold(thr, _out(args, "threshold.json"))
    print(json.dumps(thr.to_dict(), sort_keys=True))


def cmd_evaluate(args, cfg):
    data = _Data(args, cfg)
    est = QuantileLSTM.load(_path(args, cfg, "checkpoint"))
    thr = io.load_threshold(_path(args, cfg, "threshold"))
    X, Y, starts = data.part("test")
    report = evaluate(est, thr, X, Y, starts, data.template(), cfg.train.loss_weight)
    io.write_rows(_out(args, "report.csv"), [report.row()])
    print(json.dumps(report.row(), sort_keys=True))


def cmd_export_plot(args, cfg):
    from .conformal import inflate
    data = _Data(args, cfg)
    est = QuantileLSTM.load(_path(args, cfg, "checkpoint"))
    thr = io.load_threshold(_path(args, cfg, "threshold"))
    X, Y, starts = data.part("test")
    if not 0 <= args.window < len(X):
        raise ValidationError(f"window {args.window} outside the test split (0..{len(X) - 1})")
    tpl = data.template()
    lower, upper = est.predict_interval(X[args.window:args.window + 1])
    lo, hi = inflate(lower[0], upper[0], thr, tpl.limits)
    hi_c, _ = tpl.clip(hi)
    sol = tpl.model(starts[args.window]).solve(hi_c[:, :3], hi_c[:, 3:])
    rows = []
    truth = Y[args.window]
    for t in range(truth.shape[0]):
        for p, ph in enumerate("abc"):
            rows.append(dict(step=t, phase=ph, slack_real=float(sol.slack_power[t, p].real),
                             load_lower=float(lo[t, 3 + p]), load_upper=float(hi[t, 3 + p]),
                             load_truth=float(truth[t, 3 + p]), price_lower=float(lo[t, p]),
                             price_upper=float(hi[t, p]), price_truth=float(truth[t, p])))
    io.write_rows(_out(args, "plot.csv"), rows)
    print(json.dumps({"plot": _out(args, "plot.csv"), "rows": len(rows)}))


COMMANDS = {"gen": cmd_gen, "solve": cmd_solve, "export-lp": cmd_export_lp, "train": cmd_train,
            "calibrate": cmd_calibrate, "evaluate": cmd_evaluate, "export-plot": cmd_export_plot}


def _fail(exc, code):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except ParseError as exc:
        return _fail(exc, 2)
    except ValidationError as exc:
        return _fail(exc, 3)
    except BessPlanError as exc:
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
