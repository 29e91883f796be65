"""File formats: network JSON, time-series CSV, YAML run config, thresholds
and result tables.

Per-unit conversion happens here and nowhere else.  Network files declare
``"units": "pu"`` (default) or ``"si"``; in SI files powers are kVA,
admittances siemens and voltage limits kV magnitudes.  Time-series loads are
per-unit unless ``units="si"`` (kW) is passed.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import pandas as pd
import yaml

from .assembly import ModelConfig
from .conformal import ConformalThreshold
from .exceptions import ConfigInvalid, ParseError, ValidationError
from .network import PHASES, Bus, Line, Network
from .synth import WEATHER, ScenarioSpec
from .training import TrainConfig

PU, SI = "pu", "si"


def _pairs(value, shape, what):
    """Nested ``[re, im]`` pairs to a complex array of ``shape``."""
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{what}: expected numbers as [re, im] pairs") from exc
    if arr.shape != tuple(shape) + (2,):
        raise ParseError(f"{what}: expected shape {tuple(shape) + (2,)}, got {arr.shape}")
    return arr[..., 0] + 1j * arr[..., 1]


def _to_pairs(arr):
    arr = np.asarray(arr, dtype=complex)
    return np.stack([arr.real, arr.imag], axis=-1).tolist()


def _get(d, key, what, default=KeyError):
    if key in d:
        return d[key]
    if default is KeyError:
        raise ParseError(f"{what}: missing field {key!r}")
    return default


def network_from_dict(doc):
    if not isinstance(doc, dict):
        raise ParseError("network document must be a JSON object")
    units = doc.get("units", PU)
    if units not in (PU, SI):
        raise ParseError(f"units must be 'pu' or 'si', got {units!r}")
    base = _get(doc, "base", "network")
    try:
        kva, kv = float(base["kva"]), float(base["kv"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError("network: base needs numeric 'kva' and 'kv'") from exc
    if kva <= 0 or kv <= 0:
        raise ValidationError("base quantities must be positive")
    s_scale = 1.0 / kva if units == SI else 1.0
    z_base = kv**2 * 1000.0 / kva
    y_scale = z_base if units == SI else 1.0

    buses = []
    for i, b in enumerate(_get(doc, "buses", "network")):
        what = f"bus[{i}]"
        if not isinstance(b, dict):
            raise ParseError(f"{what}: expected an object")
        v_min = float(b.get("v_min", 0.95 * kv if units == SI else 0.95**2))
        v_max = float(b.get("v_max", 1.05 * kv if units == SI else 1.05**2))
        if units == SI:
            v_min, v_max = (v_min / kv) ** 2, (v_max / kv) ** 2
        pv = b.get("pv_profile", [[[0.0, 0.0]] * PHASES])
        pv = _pairs(pv, (len(pv), PHASES), f"{what}.pv_profile") * s_scale
        try:
            buses.append(Bus(
                id=int(_get(b, "id", what)),
                kind=str(b.get("kind", "load")),
                s_min=_pairs(_get(b, "s_min", what), (PHASES,), f"{what}.s_min") * s_scale,
                s_max=_pairs(_get(b, "s_max", what), (PHASES,), f"{what}.s_max") * s_scale,
                v_min=v_min, v_max=v_max, pv_profile=pv,
                bess_cost=float(b.get("bess_cost", 0.0)),
                bess_candidate=bool(b.get("bess_candidate", False)),
                load_weight=np.asarray(b.get("load_weight", [0.0] * PHASES), dtype=float),
            ))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ParseError(f"{what}: {exc}") from exc
    lines = []
    for i, ln in enumerate(_get(doc, "lines", "network")):
        what = f"line[{i}]"
        if not isinstance(ln, dict):
            raise ParseError(f"{what}: expected an object")
        y_fwd = _pairs(_get(ln, "y_fwd", what), (PHASES, PHASES), f"{what}.y_fwd") * y_scale
        y_rev = ln.get("y_rev")
        y_rev = None if y_rev is None else _pairs(y_rev, (PHASES, PHASES), f"{what}.y_rev") * y_scale
        cap = ln.get("flow_cap")
        lines.append(Line(int(_get(ln, "from", what)), int(_get(ln, "to", what)), y_fwd, y_rev,
                          is_transformer=bool(ln.get("is_transformer", False)),
                          flow_cap=None if cap is None else float(cap) * s_scale))
    net = Network(tuple(buses), tuple(lines), base_kva=kva, base_kv=kv,
                  name=str(doc.get("name", "network")))
    net.tree  # radiality is checked on load
    return net


def network_to_dict(net):
    return dict(
        name=net.name, units=PU, base=dict(kva=net.base_kva, kv=net.base_kv),
        buses=[dict(id=b.id, kind=b.kind, s_min=_to_pairs(b.s_min), s_max=_to_pairs(b.s_max),
                    v_min=b.v_min, v_max=b.v_max, pv_profile=_to_pairs(b.pv_profile),
                    bess_cost=b.bess_cost, bess_candidate=b.bess_candidate,
                    load_weight=b.load_weight.tolist()) for b in net.buses],
        lines=[{"from": ln.from_bus, "to": ln.to_bus, "y_fwd": _to_pairs(ln.y_fwd),
                "y_rev": _to_pairs(ln.y_rev), "is_transformer": ln.is_transformer,
                "flow_cap": ln.flow_cap} for ln in net.lines],
    )


def load_network(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from exc
    return network_from_dict(doc)


def write_network(net, path):
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# time series
# ---------------------------------------------------------------------------

def _float_or_nan(text):
    # python's float() round-trips %.17g exactly; pandas' fast parser does not
    try:
        return float(text)
    except ValueError:
        return math.nan


def timeseries_columns(n_buses):
    cols = ["timestamp"] + [f"price_{p}" for p in "abc"] + list(WEATHER)
    cols += [f"load_bus{k}_{p}" for k in range(n_buses) for p in "abc"]
    return cols


def load_timeseries(path, n_buses=None, units=PU, base_kva=1000.0):
    """Read and validate a time-series CSV.

    Raises ``ParseError`` for unreadable files, missing columns, empty or
    non-numeric cells, and ``ValidationError`` for non-monotone timestamps or
    an irregular step (the first offending row is named).
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if n_buses is None:
        ks = [int(c[len("load_bus"):].split("_")[0]) for c in frame.columns if c.startswith("load_bus")]
        n_buses = max(ks) + 1 if ks else 0
    for col in timeseries_columns(n_buses):
        if col not in frame.columns:
            raise ParseError(f"{path}: missing column {col!r}")
    out = pd.DataFrame()
    try:
        out["timestamp"] = pd.to_datetime(frame["timestamp"], format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise ParseError(f"{path}: bad timestamp ({exc})") from exc
    for col in timeseries_columns(n_buses)[1:]:
        raw = frame[col]
        empty = raw.str.strip() == ""
        if empty.any():
            raise ParseError(f"{path}: empty cell in column {col!r} at row {int(np.argmax(empty.values)) + 2}")
        vals = raw.map(_float_or_nan)
        if vals.isna().any():
            raise ParseError(f"{path}: non-numeric value in column {col!r} at row {int(np.argmax(vals.isna().values)) + 2}")
        out[col] = vals.astype(float)
    if len(out) < 2:
        raise ValidationError(f"{path}: need at least two rows")
    if units == SI:
        for col in out.columns:
            if col.startswith("load_bus"):
                out[col] = out[col] / base_kva
    steps = out["timestamp"].diff().iloc[1:]
    step = steps.iloc[0]
    if step <= pd.Timedelta(0):
        raise ValidationError(f"{path}: timestamps not increasing at row 3")
    bad = np.flatnonzero(steps.values != step.to_timedelta64())
    if bad.size:
        i = int(bad[0]) + 1
        kind = "gap" if steps.iloc[bad[0]] > step else "irregular step"
        raise ValidationError(f"{path}: timestamp {kind} between {out['timestamp'].iloc[i - 1]} "
                              f"and {out['timestamp'].iloc[i]} (row {i + 2})")
    return out


def write_timeseries(frame, path):
    out = frame.copy()
    out["timestamp"] = pd.to_datetime(out["timestamp"]).dt.strftime("%Y-%m-%dT%H:%M:%S")
    out.to_csv(path, index=False, float_format="%.17g")


# ---------------------------------------------------------------------------
# boxes, thresholds, reports
# ---------------------------------------------------------------------------

BOX_COLUMNS = ([f"price_lo_{p}" for p in "abc"] + [f"price_hi_{p}" for p in "abc"]
               + [f"load_lo_{p}" for p in "abc"] + [f"load_hi_{p}" for p in "abc"])


def load_boxes(path):
    """CSV with one row per step: ``price_lo_*``, ``price_hi_*``, ``load_lo_*``, ``load_hi_*``."""
    from .robust import BoxSet
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    for col in BOX_COLUMNS:
        if col not in frame.columns:
            raise ParseError(f"{path}: missing column {col!r}")
    vals = frame[BOX_COLUMNS].apply(pd.to_numeric, errors="coerce")
    if vals.isna().any().any():
        raise ParseError(f"{path}: empty or non-numeric box entries")
    v = vals.to_numpy(float)
    return BoxSet(v[:, 0:3], v[:, 3:6]), BoxSet(v[:, 6:9], v[:, 9:12])


def write_boxes(price_box, load_box, path):
    v = np.hstack([price_box.lower, price_box.upper, load_box.lower, load_box.upper])
    frame = pd.DataFrame(v, columns=BOX_COLUMNS)
    frame.insert(0, "step", np.arange(len(frame)))
    frame.to_csv(path, index=False, float_format="%.17g")


def write_threshold(threshold, path):
    with open(path, "w") as fh:
        json.dump(threshold.to_dict(), fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def load_threshold(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
        if d.get("q_star") == "inf":
            d["q_star"] = math.inf
        return ConformalThreshold.from_dict(d)
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"{path}: cannot read threshold ({exc})") from exc


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def write_rows(path, rows):
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def write_lp(lp, path):
    with open(path, "w") as fh:
        fh.write(lp.dump())


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    history: int = 24
    stride: int = 24
    paths: dict = field(default_factory=dict)


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigInvalid(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigInvalid(f"section {name!r}: unknown keys {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigInvalid(f"section {name!r}: {exc}") from exc


def run_config_from_dict(doc, base_dir="."):
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigInvalid("config must be a mapping")
    unknown = sorted(set(doc) - {"model", "train", "scenario", "data", "paths"})
    if unknown:
        raise ConfigInvalid(f"unknown config sections {unknown}")
    data = doc.get("data") or {}
    paths = {}
    for k, v in (doc.get("paths") or {}).items():
        p = v if os.path.isabs(v) else os.path.join(base_dir, v)
        if not os.path.exists(p):
            raise ConfigInvalid(f"path {k}={v!r} does not exist")
        paths[k] = p
    cfg = RunConfig(model=_section(ModelConfig, doc.get("model"), "model"),
                    train=_section(TrainConfig, doc.get("train"), "train"),
                    scenario=_section(ScenarioSpec, doc.get("scenario"), "scenario"),
                    history=int(data.get("history", 24)), stride=int(data.get("stride", 24)),
                    paths=paths)
    if cfg.model.horizon != cfg.scenario.horizon and "scenario" in doc and "model" in doc:
        raise ConfigInvalid("model.horizon and scenario.horizon differ")
    return cfg


def load_run_config(path):
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: invalid YAML ({exc})") from exc
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from exc
    return run_config_from_dict(doc, os.path.dirname(os.path.abspath(path)))


def run_config_to_dict(cfg):
    return dict(model=asdict(cfg.model), train={**asdict(cfg.train), "splits": list(cfg.train.splits)},
                scenario={**asdict(cfg.scenario), "phase_imbalance": list(cfg.scenario.phase_imbalance)},
                data=dict(history=cfg.history, stride=cfg.stride), paths=dict(cfg.paths))


def write_run_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(run_config_to_dict(cfg), fh, sort_keys=True)
