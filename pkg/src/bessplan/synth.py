"""Synthetic feeder and weather/load/price time series.

The generator is the only data source the package ships with.  Structure is
deliberately simple so a forecaster can learn it:

* weather: daily sinusoids (temperature, solar) with day-level drift and
  noise, AR(1) wind, humidity anti-correlated with temperature;
* loads: per-bus base level x daily shape x per-phase imbalance, coupled
  linearly to temperature, plus Gaussian noise;
* prices: affine in temperature and aggregate load, with random spikes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .exceptions import ValidationError
from .network import LOAD, PHASES, SLACK, Bus, Line, Network

WEATHER = ("windspeed", "temperature", "humidity", "solar")


@dataclass
class ScenarioSpec:
    n_buses: int = 8
    days: int = 120
    step_hours: float = 1.0
    seed: int = 0
    history: int = 24
    horizon: int = 24
    # weather
    temp_mean: float = 20.0
    temp_amplitude: float = 8.0
    temp_noise: float = 1.0
    temp_day_drift: float = 2.0
    solar_noise: float = 0.05
    wind_mean: float = 5.0
    wind_noise: float = 1.0
    humidity_noise: float = 3.0
    # loads (per-unit, per phase)
    load_base: float = 0.08
    load_temp_coupling: float = 0.25
    load_noise: float = 0.01
    phase_imbalance: tuple = (1.0, 0.9, 1.1)
    # prices ($ per pu-hour)
    price_base: float = 0.12
    price_temp_coef: float = 0.006
    price_load_coef: float = 0.25
    price_noise: float = 0.01
    spike_prob: float = 0.05
    spike_mult: float = 3.0
    # network
    pv_capacity: float = 0.15
    bess_cost: float = 0.02

    def __post_init__(self):
        for name in ("temp_noise", "solar_noise", "wind_noise", "humidity_noise",
                     "load_noise", "price_noise", "temp_day_drift"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        steps = 24.0 / self.step_hours
        if self.step_hours <= 0 or abs(steps - round(steps)) > 1e-9:
            raise ValidationError("step_hours must divide 24")
        if self.n_buses < 3:
            raise ValidationError("need at least 3 buses")
        if self.days < 2 or self.history < 1 or self.horizon < 1:
            raise ValidationError("days >= 2, history >= 1 and horizon >= 1 required")
        if not 0 <= self.spike_prob <= 1:
            raise ValidationError("spike_prob must lie in [0, 1]")
        self.phase_imbalance = tuple(float(v) for v in self.phase_imbalance)

    @property
    def steps_per_day(self):
        return int(round(24.0 / self.step_hours))

    def to_dict(self):
        return asdict(self)


def line_admittance(zs=0.004 + 0.008j, zm=0.001 + 0.003j):
    """Admittance of a transposed overhead segment with self/mutual impedance."""
    z = np.full((PHASES, PHASES), zm, dtype=complex)
    np.fill_diagonal(z, zs)
    return np.linalg.inv(z)


def delta_wye_admittance(y_t=50.0 - 100.0j):
    """Singular delta-wye block: rows are phase differences."""
    d = np.array([[1, -1, 0], [0, 1, -1], [-1, 0, 1]], dtype=complex)
    return (y_t / np.sqrt(3)) * d


def solar_shape(steps_per_day):
    hours = (np.arange(steps_per_day) + 0.5) * 24.0 / steps_per_day
    return np.clip(np.sin(np.pi * (hours - 6.0) / 12.0), 0.0, None)


def default_network(spec=None):
    """Chain feeder ``0 -> 1 -> ... -> N-1``; the last line is a delta-wye
    transformer feeding a PV + storage bus with no load.

    Storage candidates: the middle bus, the second-to-last load bus and the
    PV bus.
    """
    spec = spec or ScenarioSpec()
    n = spec.n_buses
    rng = np.random.default_rng(spec.seed + 7919)
    pv_bus = n - 1
    candidates = {n // 2 - 1, n - 3, pv_bus}
    weights = rng.uniform(0.6, 1.4, size=(n, PHASES)) * np.array(spec.phase_imbalance)
    weights[0] = 0.0
    weights[pv_bus] = 0.0
    weights /= weights.sum(axis=0)
    pv = spec.pv_capacity * solar_shape(spec.steps_per_day)
    buses = [Bus(0, SLACK, s_min=np.full(3, -5 - 5j), s_max=np.full(3, 5 + 5j))]
    for j in range(1, n):
        if j == pv_bus:
            buses.append(Bus(j, LOAD, s_min=np.full(3, -1 - 0.3j), s_max=np.full(3, 1 + 0.3j),
                             pv_profile=np.repeat(pv[:, None], 3, axis=1).astype(complex),
                             bess_cost=spec.bess_cost, bess_candidate=True,
                             load_weight=weights[j]))
        else:
            buses.append(Bus(j, LOAD, s_min=np.full(3, -2 - 0.05j), s_max=np.full(3, 1 + 0.05j),
                             bess_cost=spec.bess_cost * (1 + 0.1 * j), bess_candidate=j in candidates,
                             load_weight=weights[j]))
    y = line_admittance()
    lines = [Line(j, j + 1, y) for j in range(n - 2)]
    yt = delta_wye_admittance()
    lines.append(Line(n - 2, n - 1, yt, yt.T.copy(), is_transformer=True))
    return Network(tuple(buses), tuple(lines), name=f"synthetic-{n}")


def _weather(spec, rng, n_steps):
    spd = spec.steps_per_day
    hours = (np.arange(n_steps) % spd + 0.5) * spec.step_hours
    day = np.arange(n_steps) // spd
    drift = np.cumsum(rng.normal(0.0, spec.temp_day_drift, size=spec.days))
    drift -= drift.mean()
    temp = (spec.temp_mean + drift[day]
            + spec.temp_amplitude * np.sin(2 * np.pi * (hours - 9.0) / 24.0)
            + rng.normal(0.0, spec.temp_noise, n_steps))
    cloud = rng.uniform(0.5, 1.0, size=spec.days)
    solar = np.clip(solar_shape(spd)[np.arange(n_steps) % spd] * cloud[day]
                    + rng.normal(0.0, spec.solar_noise, n_steps), 0.0, None)
    wind = np.empty(n_steps)
    w = spec.wind_mean
    for i in range(n_steps):
        w = spec.wind_mean + 0.8 * (w - spec.wind_mean) + rng.normal(0.0, spec.wind_noise)
        wind[i] = max(w, 0.0)
    humidity = np.clip(60.0 - 1.5 * (temp - spec.temp_mean)
                       + rng.normal(0.0, spec.humidity_noise, n_steps), 0.0, 100.0)
    return dict(windspeed=wind, temperature=temp, humidity=humidity, solar=solar)


def _daily_load_shape(hours):
    return (0.75 + 0.15 * np.sin(2 * np.pi * (hours - 10.0) / 24.0)
            + 0.25 * np.exp(-0.5 * ((hours - 19.0) / 2.0) ** 2))


def generate(spec=None):
    """Generate ``(network, frame)``.

    ``frame`` has the time-series file columns: ``timestamp``, ``price_a/b/c``,
    weather channels and ``load_bus<k>_a/b/c`` for every bus (demand
    positive).  Deterministic in ``spec.seed``.
    """
    spec = spec or ScenarioSpec()
    network = default_network(spec)
    rng = np.random.default_rng(spec.seed)
    n_steps = spec.days * spec.steps_per_day
    weather = _weather(spec, rng, n_steps)
    hours = (np.arange(n_steps) % spec.steps_per_day + 0.5) * spec.step_hours
    shape = _daily_load_shape(hours)
    temp_dev = (weather["temperature"] - spec.temp_mean) / 10.0
    weights = network.load_weights()
    # (steps, buses, phases); each bus's mean share follows its weight
    base = spec.load_base * weights * (network.n_buses - 2)
    level = shape[:, None, None] * (1.0 + spec.load_temp_coupling * temp_dev)[:, None, None]
    loads = base[None] * level + rng.normal(0.0, spec.load_noise, (n_steps,) + base.shape) * (base[None] > 0)
    loads = np.clip(loads, 0.0, None)
    agg = loads.sum(axis=1)
    agg_mean = agg.mean(axis=0)
    phase_factor = np.array([1.0, 1.02, 0.98])
    price = (spec.price_base + spec.price_temp_coef * (weather["temperature"] - spec.temp_mean))[:, None] \
        + spec.price_load_coef * (agg - agg_mean) + rng.normal(0.0, spec.price_noise, (n_steps, 1))
    price = np.clip(price * phase_factor, 0.005, None)
    spikes = rng.random(n_steps) < spec.spike_prob
    price[spikes] *= spec.spike_mult

    start = pd.Timestamp("2024-01-01T00:00:00")
    stamps = start + pd.to_timedelta(np.arange(n_steps) * spec.step_hours, unit="h")
    cols = {"timestamp": stamps}
    for p, ph in enumerate("abc"):
        cols[f"price_{ph}"] = price[:, p]
    for name in WEATHER:
        cols[name] = weather[name]
    for k in range(network.n_buses):
        for p, ph in enumerate("abc"):
            cols[f"load_bus{k}_{ph}"] = loads[:, k, p]
    return network, pd.DataFrame(cols)
