"""Power injections, residuals, the energy function and the residual-norm metric.

All functions accept numpy arrays or autodiff ``Var`` objects; leading batch
dimensions are allowed (``v`` and ``theta`` of shape ``(..., n)``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .case_io import AdmittanceMatrix, Network

DEFAULT_DELTA = 0.1


@dataclass
class SystemState:
    v: object
    theta: object


@dataclass
class Dispatch:
    p_g: object


@dataclass
class Residual:
    p_res: object  # all buses, slack included
    q_res: object  # PQ buses only


def complex_injections(state: SystemState, ybus: AdmittanceMatrix):
    """``S = V conj(Y V)`` with ``V = v e^{i theta}``, carried as real/imaginary pairs."""
    v, th = state.v, state.theta
    vr = ad.mul(v, ad.cos(th))
    vi = ad.mul(v, ad.sin(th))
    gt, bt = ybus.G.T, ybus.B.T
    # I = Y V
    ir = ad.sub(ad.matvec(vr, gt), ad.matvec(vi, bt))
    ii = ad.add(ad.matvec(vr, bt), ad.matvec(vi, gt))
    # S = V conj(I)
    p = ad.add(ad.mul(vr, ir), ad.mul(vi, ii))
    q = ad.sub(ad.mul(vi, ir), ad.mul(vr, ii))
    return p, q


def trig_injections(state: SystemState, ybus: AdmittanceMatrix):
    """Direct ``G cos + B sin`` expansion; works on complex input (complex-step probing)."""
    v = np.asarray(ad.value(state.v))
    th = np.asarray(ad.value(state.theta))
    G, B = ybus.G, ybus.B
    dth = th[..., :, None] - th[..., None, :]
    c, s = np.cos(dth), np.sin(dth)
    vv = v[..., :, None] * v[..., None, :]
    p = np.sum(vv * (G * c + B * s), axis=-1)
    q = np.sum(vv * (G * s - B * c), axis=-1)
    return p, q


def scenario_loads(scenario, network: Network):
    """Per-bus ``(P_d, Q_d)`` under multiplicative perturbation ``base (1 + u)``.

    Slack-bus load (not part of the scenario vector) stays at its base value.
    """
    u = np.asarray(scenario, dtype=float)
    if u.shape[-1] != network.input_dim:
        raise ValueError(f"scenario has {u.shape[-1]} entries, network expects {network.input_dim}")
    scaled = network.base_load * (1.0 + u)
    pd = np.broadcast_to(network.array("p_load"), u.shape[:-1] + (network.n,)).copy()
    qd = np.broadcast_to(network.array("q_load"), u.shape[:-1] + (network.n,)).copy()
    npq = len(network.pq_set)
    pq = list(network.pq_set)
    pd[..., pq] = scaled[..., 0 : 2 * npq : 2]
    qd[..., pq] = scaled[..., 1 : 2 * npq : 2]
    pd[..., list(network.pv_set)] = scaled[..., 2 * npq :]
    return pd, qd


def update_pspec(dispatch: Dispatch, scenario, network: Network):
    """Bus injection specs: ``p_spec = -P_d(u) + sum of generator outputs at the bus``."""
    pd, qd = scenario_loads(scenario, network)
    p_spec = ad.add(-pd, ad.matvec(dispatch.p_g, network.gen_incidence))
    q_spec = -qd[..., list(network.pq_set)]
    return p_spec, q_spec


def residual(state: SystemState, dispatch: Dispatch, scenario, network: Network) -> Residual:
    p_calc, q_calc = complex_injections(state, network.ybus)
    p_spec, q_spec = update_pspec(dispatch, scenario, network)
    pq = np.array(network.pq_set, dtype=int)
    return Residual(
        p_res=ad.sub(p_spec, p_calc),
        q_res=ad.sub(q_spec, ad.take(q_calc, (Ellipsis, pq))),
    )


def energy(res: Residual):
    """``0.5 (|p_res|^2 + |q_res|^2)``, reduced over the last axis."""
    return ad.mul(0.5, ad.add(ad.sum_(ad.square(res.p_res), -1), ad.sum_(ad.square(res.q_res), -1)))


def residual_norm_metric(res: Residual, network: Network):
    """Root of the mean-square non-slack P residual plus mean-square PQ Q residual."""
    npq = len(network.pq_set)
    if npq == 0:
        raise ValueError("residual-norm metric needs at least one PQ bus")
    if network.n < 2:
        raise ValueError("residual-norm metric needs n >= 2")
    p = np.asarray(ad.value(res.p_res))
    q = np.asarray(ad.value(res.q_res))
    keep = np.ones(network.n, dtype=bool)
    keep[network.slack] = False
    ms = np.sum(p[..., keep] ** 2, axis=-1) / (network.n - 1) + np.sum(q**2, axis=-1) / npq
    return np.sqrt(ms)


def reactive_split(network: Network) -> np.ndarray:
    """(n, n_gen) matrix sharing a bus's reactive output equally among its generators."""
    m = np.zeros((network.n, network.n_gen))
    for bus, gens in network.gens_at_bus.items():
        for k in gens:
            m[bus, k] = 1.0 / len(gens)
    return m


def implied_reactive(state: SystemState, network: Network, scenario, q_calc=None):
    """Generator reactive outputs implied by the state: ``Q_g = q_calc + Q_d`` at the bus."""
    if q_calc is None:
        _, q_calc = complex_injections(state, network.ybus)
    _, qd = scenario_loads(scenario, network)
    return ad.matvec(ad.add(q_calc, qd), reactive_split(network))


def stored_state(network: Network) -> SystemState:
    return SystemState(v=network.array("v_init"), theta=network.array("theta_init"))


def stored_dispatch(network: Network) -> Dispatch:
    return Dispatch(p_g=network.array("p_init", "generators"))
