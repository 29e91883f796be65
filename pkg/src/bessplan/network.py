"""Three-phase radial distribution network model.

All electrical quantities are per-unit.  Complex three-phase quantities are
``numpy`` arrays of shape ``(3,)`` (phases a, b, c) and 3x3 matrices are
``(3, 3)`` complex arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from collections import deque

import networkx as nx
import numpy as np

from .exceptions import (
    CycleDetected,
    Disconnected,
    InvalidBounds,
    MultipleSlack,
    NegativeVoltageSquare,
    UnknownBus,
    ValidationError,
)

PHASES = 3
ALPHA = np.exp(-2j * np.pi / 3)
ALPHA_PLUS = np.array([1.0, ALPHA, ALPHA**2])

SLACK = "slack"
LOAD = "load"


def _complex3(value, name):
    arr = np.asarray(value, dtype=complex)
    if arr.shape == ():
        arr = np.full(PHASES, arr)
    if arr.shape != (PHASES,):
        raise ValidationError(f"{name} must have 3 phase entries, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    return arr


def _matrix3(value, name):
    arr = np.asarray(value, dtype=complex)
    if arr.shape != (PHASES, PHASES):
        raise ValidationError(f"{name} must be 3x3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class Bus:
    """A network bus.

    ``s_min``/``s_max`` bound the net complex injection per phase (real and
    imaginary parts bounded separately).  ``pv_profile`` has shape ``(P, 3)``
    and is indexed periodically by time step.  ``load_weight`` is the share of
    the aggregate per-phase load assigned to this bus.
    """

    id: int
    kind: str = LOAD
    s_min: np.ndarray = field(default_factory=lambda: np.full(PHASES, -1 - 1j))
    s_max: np.ndarray = field(default_factory=lambda: np.full(PHASES, 1 + 1j))
    v_min: float = 0.95**2
    v_max: float = 1.05**2
    pv_profile: np.ndarray = field(default_factory=lambda: np.zeros((1, PHASES), complex))
    bess_cost: float = 0.0
    bess_candidate: bool = False
    load_weight: np.ndarray = field(default_factory=lambda: np.zeros(PHASES))

    def __post_init__(self):
        if self.kind not in (SLACK, LOAD):
            raise ValidationError(f"bus {self.id}: kind must be 'slack' or 'load', got {self.kind!r}")
        s_min = _complex3(self.s_min, f"bus {self.id} s_min")
        s_max = _complex3(self.s_max, f"bus {self.id} s_max")
        if np.any(s_min.real > s_max.real) or np.any(s_min.imag > s_max.imag):
            raise InvalidBounds(f"bus {self.id}: s_min exceeds s_max")
        if not (0 < self.v_min <= self.v_max):
            raise InvalidBounds(f"bus {self.id}: need 0 < v_min <= v_max")
        pv = np.asarray(self.pv_profile, dtype=complex)
        if pv.ndim == 1:
            pv = pv.reshape(1, PHASES)
        if pv.ndim != 2 or pv.shape[1] != PHASES or pv.shape[0] == 0:
            raise ValidationError(f"bus {self.id}: pv_profile must have shape (P, 3)")
        if self.bess_cost < 0:
            raise ValidationError(f"bus {self.id}: bess_cost must be nonnegative")
        w = np.asarray(self.load_weight, dtype=float)
        if w.shape == ():
            w = np.full(PHASES, float(w))
        if w.shape != (PHASES,) or np.any(w < 0):
            raise ValidationError(f"bus {self.id}: load_weight must be 3 nonnegative values")
        object.__setattr__(self, "s_min", s_min)
        object.__setattr__(self, "s_max", s_max)
        object.__setattr__(self, "pv_profile", pv)
        object.__setattr__(self, "load_weight", w)
        object.__setattr__(self, "v_min", float(self.v_min))
        object.__setattr__(self, "v_max", float(self.v_max))
        object.__setattr__(self, "bess_cost", float(self.bess_cost))
        object.__setattr__(self, "bess_candidate", bool(self.bess_candidate))

    def pv_at(self, step):
        """PV injection at absolute time step ``step`` (periodic profile)."""
        return self.pv_profile[step % len(self.pv_profile)]


@dataclass(frozen=True, eq=False)
class Line:
    """Directed series branch ``from_bus -> to_bus``."""

    from_bus: int
    to_bus: int
    y_fwd: np.ndarray
    y_rev: np.ndarray = None
    is_transformer: bool = False
    flow_cap: float | None = None

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise ValidationError(f"line ({self.from_bus},{self.to_bus}) is a self-loop")
        y_fwd = _matrix3(self.y_fwd, f"line ({self.from_bus},{self.to_bus}) y_fwd")
        y_rev = y_fwd.copy() if self.y_rev is None else _matrix3(
            self.y_rev, f"line ({self.from_bus},{self.to_bus}) y_rev")
        if not np.any(y_fwd) or not np.any(y_rev):
            raise ValidationError(f"line ({self.from_bus},{self.to_bus}) has a zero admittance")
        if self.flow_cap is not None and self.flow_cap < 0:
            raise ValidationError(f"line ({self.from_bus},{self.to_bus}) flow_cap must be >= 0")
        object.__setattr__(self, "y_fwd", y_fwd)
        object.__setattr__(self, "y_rev", y_rev)
        object.__setattr__(self, "is_transformer", bool(self.is_transformer))

    @property
    def key(self):
        return (self.from_bus, self.to_bus)


@dataclass(frozen=True)
class RootedTree:
    """Parent/children maps of a radial network rooted at the slack bus."""

    root: int
    parent: dict
    children: dict
    depth: dict
    order: tuple
    line_into: dict

    @property
    def height(self):
        return max(self.depth.values())

    def _check(self, j):
        if j not in self.parent:
            raise UnknownBus(f"bus {j} is not in the network")


@dataclass(frozen=True, eq=False)
class Network:
    buses: tuple
    lines: tuple
    base_kva: float = 1000.0
    base_kv: float = 12.47
    name: str = "network"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(sorted(self.buses, key=lambda b: b.id)))
        object.__setattr__(self, "lines", tuple(self.lines))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate bus ids")
        if ids != list(range(len(ids))):
            raise ValidationError("bus ids must be contiguous 0..N")

    @property
    def n_buses(self):
        return len(self.buses)

    def bus(self, j):
        if not 0 <= j < len(self.buses):
            raise UnknownBus(f"bus {j} is not in the network")
        return self.buses[j]

    @cached_property
    def tree(self):
        return validate_radial(self)

    @property
    def load_buses(self):
        return [b.id for b in self.buses if b.kind != SLACK]

    @property
    def candidates(self):
        return [b.id for b in self.buses if b.bess_candidate and b.kind != SLACK]

    def load_weights(self):
        return np.array([b.load_weight for b in self.buses])


def validate_radial(network):
    """Check the radial assumption and return the tree rooted at bus 0.

    Lines must be oriented away from the slack bus.  Children are ordered by
    ascending bus id so constraint rows come out in a reproducible order.
    """
    buses = network.buses
    if not buses:
        raise Disconnected("network has no buses")
    slack = [b.id for b in buses if b.kind == SLACK]
    if len(slack) > 1:
        raise MultipleSlack(f"buses {slack} are all marked slack")
    if slack != [0]:
        raise MultipleSlack("bus 0 must be the unique slack bus")

    n = len(buses)
    g = nx.MultiGraph()
    g.add_nodes_from(range(n))
    for line in network.lines:
        for j in line.key:
            if not 0 <= j < n:
                raise Disconnected(f"line {line.key} references unknown bus {j}")
        g.add_edge(*line.key)
    if len(network.lines) >= n:
        cycle = nx.find_cycle(g)
        path = " -> ".join(str(e[0]) for e in cycle) + f" -> {cycle[-1][1]}"
        raise CycleDetected(f"cycle {path}: {len(network.lines)} lines for {n} buses")
    if len(network.lines) < n - 1 or not nx.is_connected(g):
        missing = sorted(set(range(n)) - nx.node_connected_component(g, 0))
        raise Disconnected(f"buses {missing} are not connected to the slack bus")

    outgoing = {j: [] for j in range(n)}
    for line in network.lines:
        outgoing[line.from_bus].append(line)
    parent = {0: None}
    depth = {0: 0}
    line_into = {}
    order = []
    queue = deque([0])
    while queue:
        j = queue.popleft()
        order.append(j)
        for line in sorted(outgoing[j], key=lambda l: l.to_bus):
            k = line.to_bus
            if k in parent:
                raise CycleDetected(f"bus {k} reachable twice (line {line.key})")
            parent[k] = j
            depth[k] = depth[j] + 1
            line_into[k] = line
            queue.append(k)
    if len(parent) != n:
        missing = sorted(set(range(n)) - set(parent))
        raise Disconnected(
            f"no directed path from bus 0 to buses {missing}; lines must point away from the slack")
    children = {j: sorted(k for k, p in parent.items() if p == j) for j in range(n)}
    return RootedTree(root=0, parent=parent, children=children, depth=depth,
                      order=tuple(order), line_into=line_into)


def subtree(tree, j):
    """Buses of the subtree rooted at ``j``, including ``j``."""
    tree._check(j)
    out = {j}
    stack = [j]
    while stack:
        for k in tree.children[stack.pop()]:
            out.add(k)
            stack.append(k)
    return frozenset(out)


def path_to_root(tree, j):
    """Lines on the unique path from the slack bus to ``j``, slack end first."""
    tree._check(j)
    path = []
    while tree.parent[j] is not None:
        path.append(tree.line_into[j])
        j = tree.parent[j]
    return path[::-1]


def gamma_matrix():
    """Constant phase matrix relating branch power to per-phase flow."""
    a = ALPHA
    return np.array([[1, a**2, a],
                     [a, 1, a**2],
                     [a**2, a, 1]], dtype=complex)


def balanced_outer(v_c):
    """Voltage-square matrix ``v_c * alpha_+ alpha_+^H`` of a balanced bus."""
    if v_c < 0:
        raise NegativeVoltageSquare(f"v_c = {v_c} < 0")
    return v_c * np.outer(ALPHA_PLUS, ALPHA_PLUS.conj())


def is_invertible(y, tol=1e-9):
    """True iff the smallest singular value exceeds ``tol`` times the largest."""
    sv = np.linalg.svd(np.asarray(y, dtype=complex), compute_uv=False)
    return bool(sv[0] > 0 and sv[-1] > tol * sv[0])
