"""Classical-model time-domain simulation and the four security criteria.

Machines are constant EMFs behind transient reactance, loads are constant
impedances, and the network is Kron-reduced to the generator internal nodes
for each of the pre-fault, fault-on and post-fault configurations. Many
operating conditions that share a topology and contingency are integrated
together in one vectorized fixed-step RK4 pass (``simulate_batch``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import (
    GridModel,
    PowerFlowSolution,
    build_admittance,
    generator_output,
    line_loading,
    overload_index,
    solve_power_flow,
)

OMEGA_S = 2 * math.pi * 60.0
FAULT_ADMITTANCE = 1e4
ANGLE_LIMIT_DEG = 1e4
TSI_LIMIT = 10.0
DAMPING_MIN = 0.03
MODE_BAND_HZ = (0.25, 1.0)
V_BAND = (0.8, 1.1)
V_MAX_DURATION = 0.5


@dataclass(frozen=True)
class ContingencySpec:
    id: str
    faulted_bus: int
    t_fault: float
    t_clear: float
    tripped_line: str | None
    contingency_index: int

    def __post_init__(self):
        if not self.t_clear > self.t_fault:
            raise ValueError(f"contingency {self.id}: t_clear must exceed t_fault")


def load_contingencies(path: str | Path) -> list[ContingencySpec]:
    with open(path) as fh:
        specs = [ContingencySpec(**rec) for rec in json.load(fh)]
    if sorted(c.contingency_index for c in specs) != list(range(len(specs))):
        raise ValueError("contingency_index values must enumerate 0..C-1")
    return sorted(specs, key=lambda c: c.contingency_index)


def check_contingency(grid: GridModel, cont: ContingencySpec) -> None:
    """The tripped line must touch the faulted bus or one of its neighbours."""
    if cont.faulted_bus not in grid.index:
        raise ValueError(f"contingency {cont.id}: unknown bus {cont.faulted_bus}")
    if cont.tripped_line is None:
        return
    ln = grid.lines[grid.line_index(cont.tripped_line)]
    near = {cont.faulted_bus}
    for other in grid.lines:
        if cont.faulted_bus in (other.from_bus, other.to_bus):
            near.update((other.from_bus, other.to_bus))
    if ln.from_bus not in near and ln.to_bus not in near:
        raise ValueError(f"contingency {cont.id}: tripped line is not near the faulted bus")


@dataclass
class SimulationResult:
    time_grid: np.ndarray
    rotor_angles: np.ndarray  # (T, n_gen) degrees
    bus_voltages: np.ndarray  # (T, n_bus) magnitude, pu
    delta_max: float
    tsi: float
    modal_damping: list = field(default_factory=list)
    voltage_violation: bool = False
    converged: bool = True


@dataclass(frozen=True)
class SecurityLabel:
    transient_ok: bool
    small_signal_ok: bool
    voltage_ok: bool
    static_ok: bool
    reasons: tuple[str, ...] = ()
    tsi: float = 100.0
    f_x: float = 0.0

    @property
    def secure(self) -> bool:
        return self.transient_ok and self.small_signal_ok and self.voltage_ok and self.static_ok


@dataclass(frozen=True)
class StaticConfig:
    """Labeling knobs. ``fx_cutoff=None`` disables the aggregate overload cutoff."""

    horizon: float = 5.0
    step: float = 0.01
    loading_limit: float = 1.0
    fx_cutoff: float | None = None
    weights: tuple[float, ...] | None = None
    exponent: int = 2


# --------------------------------------------------------------------------
# Machine model and network reduction


def transient_index(delta_max: float) -> float:
    if delta_max < 0:
        raise ValueError("delta_max must be nonnegative")
    return (360.0 - delta_max) / (360.0 + delta_max) * 100.0


def machine_states(grid: GridModel, sol: PowerFlowSolution) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Internal EMF magnitude, rotor angle (rad) and mechanical power per machine."""
    pg, qg = generator_output(grid, sol)
    V = sol.voltage[[grid.index[g.bus] for g in grid.generators]]
    xd = np.array([g.xd_prime for g in grid.generators])
    E = V + 1j * xd * np.conj((pg + 1j * qg) / V)
    return np.abs(E), np.angle(E), pg


def load_admittance(grid: GridModel, v_mag: np.ndarray) -> np.ndarray:
    p, q = grid.bus_load()
    return (p - 1j * q) / v_mag ** 2


def reduced_network(
    grid: GridModel, y_load: np.ndarray, fault_bus: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Kron reduction onto internal machine nodes.

    ``y_load`` may be (n_bus,) or (N, n_bus). Returns ``Yred`` of shape
    (..., n_gen, n_gen) and ``Kv`` of shape (..., n_bus, n_gen) such that the
    bus voltages are ``Kv @ E``.
    """
    y_load = np.asarray(y_load)
    Ybus = build_admittance(grid)
    gidx = np.array([grid.index[g.bus] for g in grid.generators])
    yg = 1.0 / (1j * np.array([g.xd_prime for g in grid.generators]))
    ng, nb = len(gidx), grid.n_bus
    Ybb = np.broadcast_to(Ybus, y_load.shape[:-1] + (nb, nb)).copy()
    diag = np.arange(nb)
    Ybb[..., diag, diag] += y_load
    Ybb[..., gidx, gidx] += yg
    if fault_bus is not None:
        fb = grid.index[fault_bus]
        Ybb[..., fb, fb] += FAULT_ADMITTANCE
    Ybg = np.zeros((nb, ng), dtype=complex)
    Ybg[gidx, np.arange(ng)] = -yg
    Kv = -np.linalg.solve(Ybb, np.broadcast_to(Ybg, Ybb.shape[:-1] + (ng,)))
    Yred = np.diag(yg) + Ybg.T @ Kv
    return Yred, Kv


def trip_line(grid: GridModel, line_id: str | None) -> GridModel:
    if line_id is None:
        return grid
    k = grid.line_index(line_id)
    lines = list(grid.lines)
    lines[k] = replace(lines[k], in_service=False)
    return replace(grid, lines=tuple(lines))


# --------------------------------------------------------------------------
# Integration


@dataclass
class BatchResult:
    time_grid: np.ndarray
    angles: np.ndarray  # (N, T, n_gen) degrees
    v_mag: np.ndarray  # (N, T, n_bus)
    delta_max: np.ndarray
    converged: np.ndarray
    n_steps: np.ndarray  # steps recorded before divergence


def _segments(cont: ContingencySpec, horizon: float) -> list[tuple[float, float, str]]:
    segs = []
    tf, tc = min(cont.t_fault, horizon), min(cont.t_clear, horizon)
    for t0, t1, tag in ((0.0, tf, "pre"), (tf, tc, "fault"), (tc, horizon, "post")):
        if t1 > t0:
            segs.append((t0, t1, tag))
    return segs


def _as_grids(grids: GridModel | Sequence[GridModel], n: int) -> list[GridModel]:
    if isinstance(grids, GridModel):
        return [grids] * n
    grids = list(grids)
    if len(grids) != n:
        raise ValueError("one grid variant per initial condition expected")
    ref = grids[0]
    for g in grids[1:]:
        if g.lines != ref.lines or g.n_bus != ref.n_bus:
            raise ValueError("batched operating conditions must share one topology")
    return grids


def simulate_batch(
    grids: GridModel | Sequence[GridModel],
    initials: Sequence[PowerFlowSolution],
    contingency: ContingencySpec,
    horizon: float = 5.0,
    step: float = 0.01,
) -> BatchResult:
    """Integrate N operating conditions of one topology under one contingency.

    ``grids`` is either a single grid shared by all members or one load/dispatch
    variant per member (all with identical lines and machines).
    """
    for s in initials:
        if not s.converged:
            raise ValueError("simulation needs converged initial power flows")
    N = len(initials)
    variants = _as_grids(grids, N)
    grid = variants[0]
    ng = len(grid.generators)
    H = np.array([g.inertia_h for g in grid.generators])
    D = np.array([g.damping_d for g in grid.generators])
    states = [machine_states(g, s) for g, s in zip(variants, initials)]
    Emag = np.array([s[0] for s in states])
    delta = np.array([s[1] for s in states])
    Pm = np.array([s[2] for s in states])
    y_load = np.array([load_admittance(g, s.v_mag) for g, s in zip(variants, initials)])
    post_grid = trip_line(grid, contingency.tripped_line)
    networks = {
        "pre": reduced_network(grid, y_load),
        "fault": reduced_network(grid, y_load, contingency.faulted_bus),
        "post": reduced_network(post_grid, y_load),
    }

    omega = np.zeros((N, ng))
    alive = np.ones(N, dtype=bool)
    limit = math.radians(ANGLE_LIMIT_DEG)

    def deriv(d, w, Y):
        E = Emag * np.exp(1j * d)
        Pe = (E * np.conj((Y @ E[..., None])[..., 0])).real
        dw = (Pm - Pe - D * w) / (2 * H)
        a = alive[:, None]
        return np.where(a, OMEGA_S * w, 0.0), np.where(a, dw, 0.0)

    times, angle_rec, v_rec = [], [], []
    n_rec = np.zeros(N, dtype=int)
    segs = _segments(contingency, horizon)
    for k, (t0, t1, tag) in enumerate(segs):
        Y, Kv = networks[tag]
        n = max(1, int(math.ceil((t1 - t0) / step - 1e-9)))
        dt = (t1 - t0) / n
        last = k == len(segs) - 1
        for i in range(n + (1 if last else 0)):
            E = Emag * np.exp(1j * delta)
            times.append(t0 + i * dt)
            angle_rec.append(delta.copy())
            v_rec.append(np.abs((Kv @ E[..., None])[..., 0]))
            n_rec += alive
            if i == n:
                break
            k1d, k1w = deriv(delta, omega, Y)
            k2d, k2w = deriv(delta + 0.5 * dt * k1d, omega + 0.5 * dt * k1w, Y)
            k3d, k3w = deriv(delta + 0.5 * dt * k2d, omega + 0.5 * dt * k2w, Y)
            k4d, k4w = deriv(delta + dt * k3d, omega + dt * k3w, Y)
            delta = delta + dt / 6 * (k1d + 2 * k2d + 2 * k3d + k4d)
            omega = omega + dt / 6 * (k1w + 2 * k2w + 2 * k3w + k4w)
            blown = alive & (np.max(np.abs(delta), axis=1) > limit)
            alive &= ~blown
            if not alive.any():
                break
        if not alive.any():
            break

    angles = np.degrees(np.stack(angle_rec, axis=1))
    spread = angles.max(axis=2) - angles.min(axis=2)
    delta_max = np.where(alive, spread.max(axis=1), ANGLE_LIMIT_DEG)
    return BatchResult(
        time_grid=np.array(times),
        angles=angles,
        v_mag=np.stack(v_rec, axis=1),
        delta_max=np.minimum(delta_max, ANGLE_LIMIT_DEG),
        converged=alive.copy(),
        n_steps=n_rec,
    )


def simulate(
    grid: GridModel,
    initial: PowerFlowSolution,
    contingency: ContingencySpec,
    horizon: float = 5.0,
    step: float = 0.01,
) -> SimulationResult:
    """Time-domain simulation of one operating condition under one contingency."""
    if contingency.t_clear < horizon < contingency.t_clear + 3.0:
        raise ValueError("horizon must extend at least 3 s past fault clearing")
    b = simulate_batch(grid, [initial], contingency, horizon, step)
    n = int(b.n_steps[0])
    t = b.time_grid[:n]
    vm = b.v_mag[0, :n]
    dmax = float(b.delta_max[0])
    return SimulationResult(
        time_grid=t,
        rotor_angles=b.angles[0, :n],
        bus_voltages=vm,
        delta_max=dmax,
        tsi=transient_index(dmax),
        voltage_violation=voltage_violation(t, vm),
        converged=bool(b.converged[0]),
    )


# --------------------------------------------------------------------------
# Criteria


def voltage_violation(time_grid: np.ndarray, v_mag: np.ndarray,
                      band: tuple[float, float] = V_BAND, max_duration: float = V_MAX_DURATION) -> bool:
    """True when some bus stays outside ``band`` for longer than ``max_duration``.

    ``v_mag`` is (T, n_bus) or (N, T, n_bus); for the batched form a boolean
    array of length N is returned. An excursion lasts from its first
    out-of-band sample to the first sample back in band (or the end).
    """
    v = np.asarray(v_mag)
    single = v.ndim == 2
    if single:
        v = v[None]
    t = np.asarray(time_grid)
    out = (v < band[0]) | (v > band[1])
    N, T, nb = v.shape
    start = np.full((N, nb), np.nan)
    worst = np.zeros((N, nb))
    for j in range(T):
        o = out[:, j, :]
        opening = o & np.isnan(start)
        start[opening] = t[j]
        closing = ~o & ~np.isnan(start)
        worst[closing] = np.maximum(worst[closing], t[j] - start[closing])
        start[closing] = np.nan
    still = ~np.isnan(start)
    worst[still] = np.maximum(worst[still], t[-1] - start[still])
    viol = (worst > max_duration).any(axis=1)
    return bool(viol[0]) if single else viol


def voltage_criterion(result: SimulationResult) -> bool:
    return not voltage_violation(result.time_grid, result.bus_voltages)


def linearized_modes(grid: GridModel, eq: PowerFlowSolution) -> np.ndarray:
    """Eigenvalues of the linearized classical swing model at ``eq``."""
    Emag, delta, _ = machine_states(grid, eq)
    Yred, _ = reduced_network(grid, load_admittance(grid, eq.v_mag))
    G, B = Yred.real, Yred.imag
    dd = delta[:, None] - delta[None, :]
    K = Emag[:, None] * Emag[None, :] * (G * np.sin(dd) - B * np.cos(dd))
    np.fill_diagonal(K, 0.0)
    np.fill_diagonal(K, -K.sum(axis=1))
    # K[i, j] = dPe_i / d delta_j
    H = np.array([g.inertia_h for g in grid.generators])
    D = np.array([g.damping_d for g in grid.generators])
    ng = len(H)
    A = np.zeros((2 * ng, 2 * ng))
    A[:ng, ng:] = OMEGA_S * np.eye(ng)
    A[ng:, :ng] = -K / (2 * H[:, None])
    A[ng:, ng:] = -np.diag(D / (2 * H))
    return np.linalg.eigvals(A)


def small_signal_damping(
    grid: GridModel, post_fault_equilibrium: PowerFlowSolution, band: tuple[float, float] = MODE_BAND_HZ
) -> list[tuple[float, float]]:
    """(frequency Hz, damping ratio) of the oscillatory modes inside ``band``."""
    if not post_fault_equilibrium.converged:
        raise ValueError("no post-fault equilibrium")
    modes = []
    for lam in linearized_modes(grid, post_fault_equilibrium):
        if lam.imag <= 1e-9:
            continue
        freq = lam.imag / (2 * math.pi)
        if band[0] <= freq <= band[1]:
            modes.append((float(freq), float(-lam.real / abs(lam))))
    return sorted(modes)


def _static_check(post_grid: GridModel, post: PowerFlowSolution, config: StaticConfig) -> tuple[bool, float]:
    ratios = line_loading(post_grid, post)
    f_x = overload_index(ratios, config.weights, config.exponent)
    ok = bool(np.all(ratios <= config.loading_limit))
    if config.fx_cutoff is not None and f_x > config.fx_cutoff:
        ok = False
    return ok, f_x


def label_batch(
    grids: GridModel | Sequence[GridModel],
    initials: Sequence[PowerFlowSolution],
    contingency: ContingencySpec,
    config: StaticConfig = StaticConfig(),
) -> list[SecurityLabel]:
    """Security labels for many operating conditions under one contingency."""
    if not initials:
        return []
    variants = _as_grids(grids, len(initials))
    sim = simulate_batch(variants, initials, contingency, config.horizon, config.step)
    v_viol = voltage_violation(sim.time_grid, sim.v_mag)
    labels = []
    for k, (grid, init) in enumerate(zip(variants, initials)):
        post_grid = trip_line(grid, contingency.tripped_line)
        reasons = []
        tsi = transient_index(float(sim.delta_max[k]))
        transient_ok = tsi >= TSI_LIMIT and bool(sim.converged[k])
        if not transient_ok:
            reasons.append("transient")
        if not sim.converged[k]:
            reasons.append("simulation divergence")
        voltage_ok = not bool(v_viol[k])
        if not voltage_ok:
            reasons.append("voltage")
        post = solve_power_flow(post_grid, warm_start=(init.v_mag, init.v_ang))
        if post.converged:
            modes = small_signal_damping(post_grid, post)
            small_ok = all(z >= DAMPING_MIN for _, z in modes)
            static_ok, f_x = _static_check(post_grid, post, config)
        else:
            small_ok = static_ok = False
            f_x = float("inf")
            reasons.append("no post-fault equilibrium")
        if not small_ok:
            reasons.append("small_signal")
        if not static_ok:
            reasons.append("static")
        labels.append(SecurityLabel(transient_ok, small_ok, voltage_ok, static_ok, tuple(reasons), tsi, f_x))
    return labels


def label(
    grid: GridModel,
    initial: PowerFlowSolution,
    contingency: ContingencySpec,
    config: StaticConfig = StaticConfig(),
) -> SecurityLabel:
    return label_batch(grid, [initial], contingency, config)[0]
