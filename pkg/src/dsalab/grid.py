"""Static network model: data types, Y-bus assembly, Newton-Raphson power flow.

Everything is per unit on a single system base. A GridModel is immutable;
topology variants are produced with :func:`dataclasses.replace` (see
``datagen.apply_topology_change``).
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

SLACK, PV, PQ = "slack", "PV", "PQ"

PF_TOLERANCE = 1e-8
PF_MAX_ITER = 30


class ModelRejectedError(ValueError):
    """The grid description violates a structural invariant."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    v_mag: float = 1.0
    v_ang: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0

    def __post_init__(self):
        if self.kind not in (SLACK, PV, PQ):
            raise ModelRejectedError(f"bus {self.id}: unknown kind {self.kind!r}")
        if not self.v_mag > 0:
            raise ModelRejectedError(f"bus {self.id}: v_mag must be positive")


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    rating_mva: float = 100.0
    in_service: bool = True
    id: str = ""

    def __post_init__(self):
        if self.x == 0:
            raise ModelRejectedError(f"line {self.id}: x must be nonzero")
        if self.r < 0:
            raise ModelRejectedError(f"line {self.id}: r must be nonnegative")
        if not self.rating_mva > 0:
            raise ModelRejectedError(f"line {self.id}: rating_mva must be positive")


@dataclass(frozen=True)
class Generator:
    bus: int
    p_set: float
    q_set: float = 0.0
    inertia_h: float = 5.0
    damping_d: float = 1.0
    xd_prime: float = 0.2
    p_max: float = 10.0
    q_min: float = -10.0
    q_max: float = 10.0

    def __post_init__(self):
        if not self.inertia_h > 0:
            raise ModelRejectedError(f"generator at bus {self.bus}: inertia_h must be positive")
        if not 0 <= self.p_set <= self.p_max:
            raise ModelRejectedError(f"generator at bus {self.bus}: p_set outside [0, p_max]")


@dataclass(frozen=True)
class Load:
    bus: int
    p: float
    q: float = 0.0


@dataclass(frozen=True)
class GridModel:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...] = ()
    loads: tuple[Load, ...] = ()
    base_mva: float = 100.0
    topology_id: str = "T0"
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("buses", "lines", "generators", "loads"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.base_mva > 0:
            raise ModelRejectedError("base_mva must be positive")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ModelRejectedError("duplicate bus ids")
        object.__setattr__(self, "index", {bid: i for i, bid in enumerate(ids)})
        if sum(b.kind == SLACK for b in self.buses) != 1:
            raise ModelRejectedError("grid must have exactly one slack bus")
        line_ids = [ln.id for ln in self.lines]
        if len(set(line_ids)) != len(line_ids):
            raise ModelRejectedError("duplicate line ids")
        for ln in self.lines:
            if ln.from_bus not in self.index or ln.to_bus not in self.index:
                raise ModelRejectedError(f"line {ln.id} references an unknown bus")
        gen_buses = [g.bus for g in self.generators]
        if len(set(gen_buses)) != len(gen_buses):
            raise ModelRejectedError("at most one generator per bus")
        for g in self.generators:
            if g.bus not in self.index:
                raise ModelRejectedError(f"generator references unknown bus {g.bus}")
        for ld in self.loads:
            if ld.bus not in self.index:
                raise ModelRejectedError(f"load references unknown bus {ld.bus}")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == SLACK)

    def line_index(self, line_id: str) -> int:
        for i, ln in enumerate(self.lines):
            if ln.id == line_id:
                return i
        raise KeyError(f"unknown line id {line_id!r}")

    def bus_load(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-bus aggregated load (P, Q)."""
        p = np.zeros(self.n_bus)
        q = np.zeros(self.n_bus)
        for ld in self.loads:
            p[self.index[ld.bus]] += ld.p
            q[self.index[ld.bus]] += ld.q
        return p, q

    def is_connected(self) -> bool:
        if not self.buses:
            return False
        adj: dict[int, list[int]] = {i: [] for i in range(self.n_bus)}
        for ln in self.lines:
            if ln.in_service:
                a, b = self.index[ln.from_bus], self.index[ln.to_bus]
                adj[a].append(b)
                adj[b].append(a)
        seen = {0}
        todo = deque([0])
        while todo:
            for nb in adj[todo.popleft()]:
                if nb not in seen:
                    seen.add(nb)
                    todo.append(nb)
        return len(seen) == self.n_bus

    def check_connected(self) -> None:
        if not self.is_connected():
            raise ModelRejectedError(f"topology {self.topology_id}: in-service network is disconnected")

    def feature_counts(self) -> dict[str, int]:
        """Counts g, l, f, v, theta behind the feature length m = 2(g+l+f)+v+theta."""
        counts = {
            "g": len(self.generators),
            "l": len(self.loads),
            "f": len(self.lines),
            "v": self.n_bus,
            "theta": self.n_bus,
        }
        counts["m"] = 2 * (counts["g"] + counts["l"] + counts["f"]) + counts["v"] + counts["theta"]
        return counts


@dataclass(frozen=True)
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    line_flows: np.ndarray  # (n_lines, 2) complex: sending end, receiving end
    converged: bool
    iterations: int
    mismatch: float
    message: str = ""

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


# --------------------------------------------------------------------------
# JSON I/O


def grid_from_dict(doc: dict) -> GridModel:
    lines = []
    for i, rec in enumerate(doc["lines"]):
        rec = dict(rec)
        rec.setdefault("id", f"L{i}")
        # the file schema spells endpoints "from"/"to"
        rec["from_bus"] = rec.pop("from", rec.get("from_bus"))
        rec["to_bus"] = rec.pop("to", rec.get("to_bus"))
        lines.append(Line(**rec))
    return GridModel(
        buses=[Bus(**b) for b in doc["buses"]],
        lines=lines,
        generators=[Generator(**g) for g in doc.get("generators", [])],
        loads=[Load(**ld) for ld in doc.get("loads", [])],
        base_mva=doc.get("base_mva", 100.0),
        topology_id=str(doc.get("topology_id", "T0")),
    )


def grid_to_dict(grid: GridModel) -> dict:
    def line_rec(ln: Line) -> dict:
        return {
            "id": ln.id, "from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x,
            "b_charging": ln.b_charging, "rating_mva": ln.rating_mva, "in_service": ln.in_service,
        }

    return {
        "topology_id": grid.topology_id,
        "base_mva": grid.base_mva,
        "buses": [vars(b) for b in grid.buses],
        "lines": [line_rec(ln) for ln in grid.lines],
        "generators": [vars(g) for g in grid.generators],
        "loads": [vars(ld) for ld in grid.loads],
    }


def load_grid(path: str | Path) -> GridModel:
    with open(path) as fh:
        grid = grid_from_dict(json.load(fh))
    grid.check_connected()
    return grid


def bundled_grid_path(name: str) -> Path:
    return Path(__file__).parent / "data" / f"{name}.json"


# --------------------------------------------------------------------------
# Admittance


def branch_admittances(line: Line) -> tuple[complex, complex]:
    """Series admittance and half line-charging susceptance (as admittance)."""
    return 1.0 / complex(line.r, line.x), 0.5j * line.b_charging


def build_admittance(grid: GridModel) -> np.ndarray:
    """Complex bus admittance matrix; out-of-service lines contribute nothing."""
    n = grid.n_bus
    if n == 0:
        raise ModelRejectedError("empty grid")
    Y = np.zeros((n, n), dtype=complex)
    for ln in grid.lines:
        if not ln.in_service:
            continue
        f, t = grid.index[ln.from_bus], grid.index[ln.to_bus]
        ys, ysh = branch_admittances(ln)
        Y[f, f] += ys + ysh
        Y[t, t] += ys + ysh
        Y[f, t] -= ys
        Y[t, f] -= ys
    for i, b in enumerate(grid.buses):
        Y[i, i] += complex(b.shunt_g, b.shunt_b)
    return Y


def line_flows(grid: GridModel, V: np.ndarray) -> np.ndarray:
    """Complex power entering each line at its sending and receiving ends."""
    flows = np.zeros((len(grid.lines), 2), dtype=complex)
    for k, ln in enumerate(grid.lines):
        if not ln.in_service:
            continue
        f, t = grid.index[ln.from_bus], grid.index[ln.to_bus]
        ys, ysh = branch_admittances(ln)
        i_f = (ys + ysh) * V[f] - ys * V[t]
        i_t = (ys + ysh) * V[t] - ys * V[f]
        flows[k, 0] = V[f] * np.conj(i_f)
        flows[k, 1] = V[t] * np.conj(i_t)
    return flows


# --------------------------------------------------------------------------
# Power flow


def specified_injections(grid: GridModel) -> tuple[np.ndarray, np.ndarray]:
    p_load, q_load = grid.bus_load()
    p = -p_load
    q = -q_load
    for g in grid.generators:
        i = grid.index[g.bus]
        p[i] += g.p_set
        q[i] += g.q_set
    return p, q


def _jacobian(Y, V, pvpq, pq):
    I = Y @ V
    Vnorm = V / np.abs(V)
    diagV = np.diag(V)
    dS_dVm = diagV @ np.conj(Y * Vnorm[None, :]) + np.diag(np.conj(I) * Vnorm)
    dS_dVa = 1j * diagV @ np.conj(np.diag(I) - Y * V[None, :])
    return np.block([
        [dS_dVa[np.ix_(pvpq, pvpq)].real, dS_dVm[np.ix_(pvpq, pq)].real],
        [dS_dVa[np.ix_(pq, pvpq)].imag, dS_dVm[np.ix_(pq, pq)].imag],
    ])


def solve_power_flow(
    grid: GridModel,
    tolerance: float = PF_TOLERANCE,
    max_iter: int = PF_MAX_ITER,
    warm_start: tuple[np.ndarray, np.ndarray] | None = None,
) -> PowerFlowSolution:
    """Full Newton-Raphson AC power flow in polar coordinates.

    Non-convergence (iteration cap, singular Jacobian, blow-up) is reported
    through ``converged=False`` and ``message`` rather than raised.
    """
    grid.check_connected()
    Y = build_admittance(grid)
    kinds = [b.kind for b in grid.buses]
    pv = np.array([i for i, k in enumerate(kinds) if k == PV], dtype=int)
    pq = np.array([i for i, k in enumerate(kinds) if k == PQ], dtype=int)
    pvpq = np.r_[pv, pq]

    vm = np.array([b.v_mag if b.kind != PQ else 1.0 for b in grid.buses])
    va = np.zeros(grid.n_bus)
    va[grid.slack_index] = grid.buses[grid.slack_index].v_ang
    if warm_start is not None:
        vm0, va0 = warm_start
        vm[pq] = np.asarray(vm0)[pq]
        va[pvpq] = np.asarray(va0)[pvpq]
    p_spec, q_spec = specified_injections(grid)

    def mismatch(V):
        S = V * np.conj(Y @ V)
        return np.r_[S.real[pvpq] - p_spec[pvpq], S.imag[pq] - q_spec[pq]]

    V = vm * np.exp(1j * va)
    F = mismatch(V)
    norm = float(np.max(np.abs(F))) if F.size else 0.0
    it = 0
    message = ""
    converged = norm <= tolerance
    npvpq = len(pvpq)
    while not converged and it < max_iter:
        it += 1
        J = _jacobian(Y, V, pvpq, pq)
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            message = "singular Jacobian"
            break
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        if not np.all(np.isfinite(vm)) or np.any(vm <= 0) or np.any(vm > 10):
            message = "voltage iterate left the physical range"
            break
        V = vm * np.exp(1j * va)
        F = mismatch(V)
        norm = float(np.max(np.abs(F)))
        converged = norm <= tolerance
    if not converged and not message:
        message = f"no convergence in {max_iter} iterations (mismatch {norm:.3e})"

    S = V * np.conj(Y @ V)
    return PowerFlowSolution(
        v_mag=np.abs(V),
        v_ang=np.angle(V),
        p_inj=S.real,
        q_inj=S.imag,
        line_flows=line_flows(grid, V),
        converged=bool(converged),
        iterations=it,
        mismatch=norm,
        message=message,
    )


def generator_output(grid: GridModel, sol: PowerFlowSolution) -> tuple[np.ndarray, np.ndarray]:
    """Per-generator (P, Q) implied by the solved bus injections."""
    p_load, q_load = grid.bus_load()
    idx = [grid.index[g.bus] for g in grid.generators]
    return sol.p_inj[idx] + p_load[idx], sol.q_inj[idx] + q_load[idx]


def within_generation_limits(grid: GridModel, sol: PowerFlowSolution, slack: float = 1e-6) -> bool:
    pg, qg = generator_output(grid, sol)
    for g, p, q in zip(grid.generators, pg, qg):
        if p < -slack or p > g.p_max + slack or q < g.q_min - slack or q > g.q_max + slack:
            return False
    return True


# --------------------------------------------------------------------------
# Static security


def line_loading(grid: GridModel, sol: PowerFlowSolution) -> np.ndarray:
    """S_mean / S_max per line: mean of the two end apparent powers over the rating."""
    ratios = np.zeros(len(grid.lines))
    for k, ln in enumerate(grid.lines):
        if ln.rating_mva <= 0:
            raise ModelRejectedError(f"line {ln.id}: zero rating")
        s_mean = 0.5 * (abs(sol.line_flows[k, 0]) + abs(sol.line_flows[k, 1]))
        ratios[k] = s_mean / (ln.rating_mva / grid.base_mva)
    return ratios


def overload_index(ratios: Sequence[float], weights: Sequence[float] | None = None, exponent: int = 2) -> float:
    """f_x = sum_i w_i * ratio_i ** p."""
    ratios = np.asarray(ratios, dtype=float)
    if not np.all(np.isfinite(ratios)):
        raise ModelRejectedError("non-finite loading ratio (zero rating?)")
    w = np.ones_like(ratios) if weights is None else np.asarray(weights, dtype=float)
    if exponent < 1 or int(exponent) != exponent:
        raise ValueError("exponent must be a positive integer")
    return float(np.sum(w * ratios ** int(exponent)))


def static_overload_index(
    grid: GridModel, sol: PowerFlowSolution, weights: Sequence[float] | None = None, exponent: int = 2
) -> float:
    if not sol.converged:
        raise ValueError("static_overload_index needs a converged solution")
    return overload_index(line_loading(grid, sol), weights, exponent)


def with_loads(grid: GridModel, p: Sequence[float], q: Sequence[float]) -> GridModel:
    loads = tuple(replace(ld, p=float(pi), q=float(qi)) for ld, pi, qi in zip(grid.loads, p, q))
    return replace(grid, loads=loads)
