"""Independent checks: Newton power flow, explicit Jacobians, gradient-flow refinement,
brute-force OPF on tiny systems and the evaluation report."""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn_opf, pf_core
from .case_io import Network
from .pf_core import Dispatch, SystemState

VIOLATION_TOL = 1e-6


class SingularJacobianError(np.linalg.LinAlgError):
    pass


class NoFeasiblePointError(RuntimeError):
    pass


def _zero_scenario(network: Network) -> np.ndarray:
    return np.zeros(network.input_dim)


def _slack_balanced(network: Network, dispatch: Dispatch, state: SystemState, scenario) -> Dispatch:
    """Dispatch whose slack generator(s) cover the slack-bus injection of ``state``."""
    p_calc, _ = pf_core.trig_injections(state, network.ybus)
    pd, _ = pf_core.scenario_loads(scenario, network)
    p_g = np.array(dispatch.p_g, dtype=float)
    gens = network.gens_at_bus.get(network.slack, [])
    if not gens:
        return Dispatch(p_g)
    others = sum(p_g[k] for k in gens[1:])
    p_g[gens[0]] = p_calc[network.slack] + pd[network.slack] - others
    return Dispatch(p_g)


# ----------------------------------------------------------------------------
# Newton-Raphson power flow


@dataclass
class PfSolution:
    state: SystemState
    dispatch: Dispatch  # input dispatch with the slack generator set to balance the slack bus
    iterations: int
    max_residual: float
    converged: bool
    history: list[float] = field(default_factory=list)


def _mismatch(v, th, p_spec, q_spec, network, pvpq, pq):
    p, q = pf_core.trig_injections(SystemState(v, th), network.ybus)
    return np.concatenate([p[pvpq] - p_spec[pvpq], q[pq] - q_spec[pq]])


def _newton_jacobian(v, th, ybus_dense, pvpq, pq):
    vc = v * np.exp(1j * th)
    ibus = ybus_dense @ vc
    diag_v = np.diag(vc)
    ds_dth = 1j * diag_v @ np.conj(np.diag(ibus) - ybus_dense @ diag_v)
    vnorm = np.diag(vc / np.abs(vc))
    ds_dvm = diag_v @ np.conj(ybus_dense @ vnorm) + np.conj(np.diag(ibus)) @ vnorm
    j11 = ds_dth.real[np.ix_(pvpq, pvpq)]
    j12 = ds_dvm.real[np.ix_(pvpq, pq)]
    j21 = ds_dth.imag[np.ix_(pq, pvpq)]
    j22 = ds_dvm.imag[np.ix_(pq, pq)]
    return np.block([[j11, j12], [j21, j22]])


def newton_pf(network: Network, dispatch: Dispatch, pv_v_setpoints=None, scenario=None, *,
              warm_start: SystemState | None = None, tol: float = 1e-8, max_iter: int = 30) -> PfSolution:
    """Polar Newton-Raphson on PV (P) and PQ (P, Q) mismatches.

    Slack (V, theta) and PV magnitudes are held fixed; the slack generator
    absorbs the balance.  Raises :class:`SingularJacobianError` on a singular
    Jacobian; returns ``converged=False`` when the iteration cap is reached.
    """
    scenario = _zero_scenario(network) if scenario is None else np.asarray(scenario, dtype=float)
    pv, pq = list(network.pv_set), list(network.pq_set)
    pvpq = pv + pq
    pd, qd = pf_core.scenario_loads(scenario, network)
    p_g = np.asarray(dispatch.p_g, dtype=float)
    p_spec = p_g @ network.gen_incidence - pd
    q_spec = -qd
    if warm_start is not None:
        v = np.array(warm_start.v, dtype=float)
        th = np.array(warm_start.theta, dtype=float)
    else:
        v = np.ones(network.n)
        th = np.zeros(network.n)
    slack = network.buses[network.slack]
    v[network.slack], th[network.slack] = slack.v_init, slack.theta_init
    if pv_v_setpoints is not None:
        v[pv] = np.broadcast_to(np.asarray(pv_v_setpoints, dtype=float), (len(pv),))
    elif warm_start is None:
        v[pv] = [network.generators[network.gens_at_bus[b][0]].v_set for b in pv]
    ybus = network.ybus.dense()
    npvpq = len(pvpq)
    f = _mismatch(v, th, p_spec, q_spec, network, pvpq, pq)
    history = [float(np.max(np.abs(f), initial=0.0))]
    it = 0
    while history[-1] >= tol and it < max_iter:
        jac = _newton_jacobian(v, th, ybus, pvpq, pq)
        try:
            lu_ok = np.linalg.cond(jac) < 1e14
            dx = np.linalg.solve(jac, -f) if lu_ok else None
        except np.linalg.LinAlgError:
            dx = None
        if dx is None:
            raise SingularJacobianError(f"singular power-flow Jacobian at iteration {it}")
        th[pvpq] += dx[:npvpq]
        v[pq] += dx[npvpq:]
        it += 1
        f = _mismatch(v, th, p_spec, q_spec, network, pvpq, pq)
        history.append(float(np.max(np.abs(f), initial=0.0)))
        if not np.isfinite(history[-1]):
            break
    state = SystemState(v, th)
    return PfSolution(
        state=state,
        dispatch=_slack_balanced(network, Dispatch(p_g), state, scenario),
        iterations=it,
        max_residual=history[-1],
        converged=bool(history[-1] < tol),
        history=history,
    )


# ----------------------------------------------------------------------------
# explicit Jacobian of the residual


def _residual_vector(z, network: Network, scenario):
    """Residual (all-bus P, PQ-bus Q) at packed ``z = [theta, V, P_g]``; complex-safe."""
    n = network.n
    th, v, p_g = z[:n], z[n : 2 * n], z[2 * n :]
    p, q = pf_core.trig_injections(SystemState(v, th), network.ybus)
    pd, qd = pf_core.scenario_loads(scenario, network)
    pq = list(network.pq_set)
    p_spec = p_g @ network.gen_incidence - pd
    return np.concatenate([p_spec - p, -qd[pq] - q[pq]])


def pack(state: SystemState, dispatch: Dispatch) -> np.ndarray:
    return np.concatenate([np.asarray(ad.value(state.theta), float), np.asarray(ad.value(state.v), float),
                           np.asarray(ad.value(dispatch.p_g), float)])


def unpack(z, network: Network) -> tuple[SystemState, Dispatch]:
    n = network.n
    return SystemState(v=z[n : 2 * n].copy(), theta=z[:n].copy()), Dispatch(z[2 * n :].copy())


def residual_vector(state: SystemState, dispatch: Dispatch, scenario, network: Network) -> np.ndarray:
    return _residual_vector(pack(state, dispatch), network, scenario)


def explicit_jacobian(state: SystemState, dispatch: Dispatch, scenario, network: Network) -> np.ndarray:
    """Dense ``dF/d(theta, V, P_g)`` with columns ordered ``[theta (n), V (n), P_g (n_g)]``.

    Built one column at a time by complex-step probing, which is exact to
    rounding because the residual is analytic in its inputs.  Slack columns are zero.
    """
    z = pack(state, dispatch)
    h = 1e-30
    cols = []
    frozen = {network.slack, network.n + network.slack}
    rows = network.n + len(network.pq_set)
    for k in range(z.size):
        if k in frozen:
            cols.append(np.zeros(rows))
            continue
        zc = z.astype(complex)
        zc[k] += 1j * h
        cols.append(_residual_vector(zc, network, scenario).imag / h)
    return np.column_stack(cols)


def analytic_jacobian(state: SystemState, dispatch: Dispatch, network: Network) -> np.ndarray:
    """Closed-form counterpart of :func:`explicit_jacobian` (same layout); used by the flow."""
    n = network.n
    v = np.asarray(ad.value(state.v), float)
    th = np.asarray(ad.value(state.theta), float)
    allb = list(range(n))
    pq = list(network.pq_set)
    ybus = network.ybus.dense()
    vc = v * np.exp(1j * th)
    ibus = ybus @ vc
    diag_v = np.diag(vc)
    ds_dth = 1j * diag_v @ np.conj(np.diag(ibus) - ybus @ diag_v)
    vnorm = np.diag(vc / np.abs(vc))
    ds_dvm = diag_v @ np.conj(ybus @ vnorm) + np.conj(np.diag(ibus)) @ vnorm
    top = np.hstack([-ds_dth.real[allb], -ds_dvm.real[allb], network.gen_incidence.T])
    bottom = np.hstack([-ds_dth.imag[pq], -ds_dvm.imag[pq], np.zeros((len(pq), network.n_gen))])
    jac = np.vstack([top, bottom])
    jac[:, [network.slack, n + network.slack]] = 0.0
    return jac


# ----------------------------------------------------------------------------
# gradient flow


@dataclass
class RefineResult:
    state: SystemState
    dispatch: Dispatch
    energy_trace: list[float]
    iterations: int
    converged: bool
    step_underflow: bool


def gradient_flow_refine(start_state: SystemState, start_dispatch: Dispatch, scenario, network: Network,
                         step: float = 1.0, max_iters: int = 50000, tol: float = 1e-10,
                         min_step: float = 1e-16, grow: float = 1.2) -> RefineResult:
    """Explicit Euler on ``dz/dt = -J^T F`` with backtracking.

    The step is halved until the energy decreases and multiplied by ``grow``
    after each accepted iterate.  Slack (V, theta) stay frozen.  Stops when the
    energy drops below ``tol`` or after ``max_iters`` accepted iterates; a step
    below ``min_step`` ends the run flagged, keeping the best point found.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    scenario = np.asarray(scenario, dtype=float)
    z = pack(start_state, start_dispatch)
    f = _residual_vector(z, network, scenario)
    e = 0.5 * float(f @ f)
    trace = [e]
    it = 0
    underflow = False
    while e >= tol and it < max_iters:
        jac = analytic_jacobian(*unpack(z, network), network)
        g = jac.T @ f
        while True:
            z_new = z - step * g
            f_new = _residual_vector(z_new, network, scenario)
            e_new = 0.5 * float(f_new @ f_new)
            if e_new < e:
                break
            step *= 0.5
            if step < min_step:
                underflow = True
                break
        if underflow:
            break
        z, f, e = z_new, f_new, e_new
        trace.append(e)
        it += 1
        step *= grow
    state, dispatch = unpack(z, network)
    return RefineResult(state, dispatch, trace, it, e < tol, underflow)


# ----------------------------------------------------------------------------
# brute-force OPF


@dataclass
class OpfResult:
    dispatch: Dispatch
    cost: float  # $/h
    state: SystemState
    grid_points: int
    feasible_points: int


def _grid_axis(lo: float, hi: float, resolution: float) -> np.ndarray:
    # anchored at zero so finer resolutions that divide coarser ones nest
    k0 = math.ceil(lo / resolution - 1e-9)
    k1 = math.floor(hi / resolution + 1e-9)
    if k1 < k0:
        return np.array([lo])
    return np.clip(np.arange(k0, k1 + 1) * resolution, lo, hi)


def point_cost(network: Network, p_g) -> float:
    return float(sum(c.a * p_g[c.gen] ** 2 + c.b * p_g[c.gen] + c.c for c in network.costs))


def violations(network: Network, state: SystemState, dispatch: Dispatch, scenario, tol: float = VIOLATION_TOL):
    """Boolean arrays ``(voltage per bus, P per generator, Q per generator)``."""
    v = np.asarray(ad.value(state.v), float)
    p_g = np.asarray(ad.value(dispatch.p_g), float)
    _, q = pf_core.trig_injections(state, network.ybus)
    q_g = np.asarray(pf_core.implied_reactive(state, network, scenario, q_calc=q), float)
    gen = lambda k: network.array(k, "generators")  # noqa: E731
    v_bad = (v < network.array("v_min") - tol) | (v > network.array("v_max") + tol)
    p_bad = (p_g < gen("p_min") - tol) | (p_g > gen("p_max") + tol)
    q_bad = (q_g < gen("q_min") - tol) | (q_g > gen("q_max") + tol)
    return v_bad, p_bad, q_bad


def brute_force_opf(network: Network, resolution: float, *, pv_setpoint: float = 1.0,
                    scenario=None, max_gens: int = 3) -> OpfResult:
    """Exhaustive OPF over a dispatch grid with a Newton power flow per point.

    Every generator except the first one at the slack bus is gridded over
    ``[p_min, p_max]``; that slack generator is set by the power flow and must
    land inside its own limits.  PV magnitudes are held at ``pv_setpoint``.
    """
    if network.n_gen > max_gens:
        raise ValueError(f"brute force supports at most {max_gens} generators, got {network.n_gen}")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    scenario = _zero_scenario(network) if scenario is None else np.asarray(scenario, dtype=float)
    slack_gens = network.gens_at_bus.get(network.slack, [])
    free = [k for k in range(network.n_gen) if not slack_gens or k != slack_gens[0]]
    axes = [_grid_axis(network.generators[k].p_min, network.generators[k].p_max, resolution) for k in free]
    best = None
    n_points = n_feasible = 0
    for combo in itertools.product(*axes):
        n_points += 1
        p_g = np.zeros(network.n_gen)
        p_g[free] = combo
        # flat start every time so a grid point's outcome never depends on its neighbours
        try:
            sol = newton_pf(network, Dispatch(p_g), pv_setpoint, scenario)
        except SingularJacobianError:
            continue
        if not sol.converged:
            continue
        if any(np.any(b) for b in violations(network, sol.state, sol.dispatch, scenario)):
            continue
        n_feasible += 1
        cost = point_cost(network, sol.dispatch.p_g)
        if best is None or cost < best[0]:
            best = (cost, sol)
    if best is None:
        raise NoFeasiblePointError(f"no feasible point among {n_points} grid points")
    cost, sol = best
    return OpfResult(sol.dispatch, cost, sol.state, n_points, n_feasible)


# ----------------------------------------------------------------------------
# evaluation report


@dataclass
class EvalReport:
    residual_norm_metric: float
    energy: float
    cost_dollars: float
    voltage_violation_rate: float
    pg_violation_rate: float
    qg_violation_rate: float
    max_dv_pu: float | None
    max_dtheta_deg: float | None
    max_dpg_mw: float | None
    inference_seconds: float
    n_scenarios: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def report_for_points(states: SystemState, dispatch: Dispatch, scenarios, network: Network,
                      reference: dict | None = None, inference_seconds: float = 0.0) -> EvalReport:
    """Metrics for a batch of already decoded points; arrays have a leading scenario axis."""
    u = np.atleast_2d(np.asarray(scenarios, dtype=float))
    v = np.atleast_2d(np.asarray(ad.value(states.v), float))
    th = np.atleast_2d(np.asarray(ad.value(states.theta), float))
    p_g = np.atleast_2d(np.asarray(ad.value(dispatch.p_g), float))
    st, dp = SystemState(v, th), Dispatch(p_g)
    res = pf_core.residual(st, dp, u, network)
    rn = pf_core.residual_norm_metric(res, network)
    en = np.asarray(pf_core.energy(res))
    dollars = np.array([point_cost(network, row) for row in p_g])
    v_bad, p_bad, q_bad = violations(network, st, dp, u)
    dv = dth = dpg = None
    if reference is not None:
        dv = float(np.max(np.abs(v - np.asarray(reference["v"], float))))
        dth = float(np.degrees(np.max(np.abs(th - np.asarray(reference["theta"], float)))))
        dpg = float(np.max(np.abs(p_g - np.asarray(reference["p_g"], float))) * network.base_mva)
    return EvalReport(
        residual_norm_metric=float(np.mean(rn)),
        energy=float(np.mean(en)),
        cost_dollars=float(np.mean(dollars)),
        voltage_violation_rate=float(np.mean(v_bad)),
        pg_violation_rate=float(np.mean(p_bad)),
        qg_violation_rate=float(np.mean(q_bad)),
        max_dv_pu=dv,
        max_dtheta_deg=dth,
        max_dpg_mw=dpg,
        inference_seconds=inference_seconds,
        n_scenarios=int(u.shape[0]),
    )


def predict(params: nn_opf.MlpParams, network: Network, scenarios):
    """Decoded network output for a batch as plain numpy arrays."""
    return nn_opf.decode(nn_opf.forward(params, np.atleast_2d(np.asarray(scenarios, float))), network)


def evaluate(params: nn_opf.MlpParams, network: Network, scenarios, reference: dict | None = None) -> EvalReport:
    t0 = time.perf_counter()
    state, dispatch = predict(params, network, scenarios)
    elapsed = time.perf_counter() - t0
    return report_for_points(state, dispatch, scenarios, network, reference, elapsed)


def reference_from_points(state: SystemState, dispatch: Dispatch) -> dict:
    return {
        "v": np.asarray(ad.value(state.v), float).tolist(),
        "theta": np.asarray(ad.value(state.theta), float).tolist(),
        "p_g": np.asarray(ad.value(dispatch.p_g), float).tolist(),
    }
