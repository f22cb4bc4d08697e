"""Augmented-Lagrangian loss assembly and the multiplier / penalty update rules."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import pf_core
from .case_io import Network

COST_REF = 1e4  # $/h


@dataclass(frozen=True)
class MultiplierState:
    lambda_f: float = 100.0
    lambda_p: float = 0.0
    lambda_q: float = 0.0
    mu_p: float = 1e3
    mu_q: float = 1e3
    dual_lr: float = 0.01
    beta: float = 1.5
    mu_init: float = 1e3
    mu_max: float = 1e6
    satisfied_tol: float = 1e-4
    late_epoch_threshold: int = 15000
    near_convergence_tol: float = 1e-4
    near_convergence_factor: float = 50.0
    late_factor: float = 10.0
    min_late_increment: float = 0.01

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    """Batch-mean loss terms; ``total`` may be an autodiff variable."""

    total: object
    economic: float
    physics: float
    constraint: float
    cost_dollars_per_hour: float
    h_p: float
    h_q: float
    per_scenario: dict = field(default_factory=dict, repr=False)


def _cost_arrays(costs, n_gen: int):
    if len(costs) != n_gen:
        raise ValueError(f"need one cost curve per generator ({len(costs)} for {n_gen})")
    by_gen = sorted(costs, key=lambda c: c.gen)
    if [c.gen for c in by_gen] != list(range(n_gen)):
        raise ValueError("cost curves do not cover every generator")
    return (np.array([getattr(c, k) for c in by_gen]) for k in "abc")


def economic_potential(p_g, costs):
    """Return ``(C / C_ref, C)`` with ``C = sum a P^2 + b P + c`` in $/h."""
    n_gen = np.shape(ad.value(p_g))[-1]
    a, b, c = _cost_arrays(costs, n_gen)
    per_gen = ad.add(ad.add(ad.mul(a, ad.square(p_g)), ad.mul(b, p_g)), c)
    dollars = ad.sum_(per_gen, -1)
    return ad.mul(dollars, 1.0 / COST_REF), dollars


def constraint_violation(p_g, q_g, network: Network):
    """ReLU violations of the generator P and Q limits, summed over generators."""
    pmin, pmax = network.array("p_min", "generators"), network.array("p_max", "generators")
    qmin, qmax = network.array("q_min", "generators"), network.array("q_max", "generators")
    h_p = ad.sum_(ad.add(ad.relu(ad.sub(p_g, pmax)), ad.relu(ad.sub(pmin, p_g))), -1)
    h_q = ad.sum_(ad.add(ad.relu(ad.sub(q_g, qmax)), ad.relu(ad.sub(qmin, q_g))), -1)
    return h_p, h_q


def constraint_potential(h_p, h_q, mult: MultiplierState):
    return ad.add(
        ad.add(ad.mul(mult.lambda_p, h_p), ad.mul(0.5 * mult.mu_p, ad.square(h_p))),
        ad.add(ad.mul(mult.lambda_q, h_q), ad.mul(0.5 * mult.mu_q, ad.square(h_q))),
    )


def total_loss(decoded, scenario, network: Network, mult: MultiplierState, squared_economic=False):
    """Economic + lambda_F * physics + constraint potential, averaged over the batch.

    ``decoded`` is the ``(SystemState, Dispatch)`` pair from :func:`nn_opf.decode`.
    With ``squared_economic`` the economic term is ``(C / C_ref)^2`` instead of
    the default linear normalisation.
    """
    state, dispatch = decoded
    p_calc, q_calc = pf_core.complex_injections(state, network.ybus)
    p_spec, q_spec = pf_core.update_pspec(dispatch, scenario, network)
    pq = np.array(network.pq_set, dtype=int)
    res = pf_core.Residual(
        p_res=ad.sub(p_spec, p_calc),
        q_res=ad.sub(q_spec, ad.take(q_calc, (Ellipsis, pq))),
    )
    physics = pf_core.energy(res)
    q_g = pf_core.implied_reactive(state, network, scenario, q_calc=q_calc)
    h_p, h_q = constraint_violation(dispatch.p_g, q_g, network)
    econ, dollars = economic_potential(dispatch.p_g, network.costs)
    if squared_economic:
        econ = ad.square(econ)
    cons = constraint_potential(h_p, h_q, mult)
    per = ad.add(ad.add(econ, ad.mul(mult.lambda_f, physics)), cons)
    total = ad.mean(per) if np.ndim(ad.value(per)) else per

    def m(x):
        return float(np.mean(ad.value(x)))

    return LossBreakdown(
        total=total,
        economic=m(econ),
        physics=m(physics),
        constraint=m(cons),
        cost_dollars_per_hour=m(dollars),
        h_p=m(h_p),
        h_q=m(h_q),
        per_scenario={
            "loss": np.asarray(ad.value(per)),
            "cost": np.asarray(ad.value(dollars)),
            "energy": np.asarray(ad.value(physics)),
            "residual_norm": pf_core.residual_norm_metric(res, network),
            "h_p": np.asarray(ad.value(h_p)),
            "h_q": np.asarray(ad.value(h_q)),
        },
    )


def update_multipliers(
    mult: MultiplierState,
    batch_mean_v: float,
    batch_mean_h_p: float,
    batch_mean_h_q: float,
    epoch: int,
    total_epochs: int | None = None,
) -> MultiplierState:
    """One dual-ascent step on lambda_F, lambda_P, lambda_Q plus the penalty growth rule."""
    late = epoch >= mult.late_epoch_threshold
    eff = mult.dual_lr
    if batch_mean_v < mult.near_convergence_tol:
        eff *= mult.near_convergence_factor
    if late:
        eff *= mult.late_factor
    step = eff * batch_mean_v
    if late:
        step = max(step, mult.min_late_increment)
    step = max(step, 0.0)

    def grow(mu, h):
        return min(mult.mu_max, mult.beta * mu) if h < mult.satisfied_tol else mu

    return replace(
        mult,
        lambda_f=mult.lambda_f + step,
        lambda_p=mult.lambda_p + mult.mu_p * batch_mean_h_p,
        lambda_q=mult.lambda_q + mult.mu_q * batch_mean_h_q,
        mu_p=grow(mult.mu_p, batch_mean_h_p),
        mu_q=grow(mult.mu_q, batch_mean_h_q),
    )


def shadow_price_diagnostic(v_series, cost_series, window: int | None = None):
    """Least-squares slope of the change in normalised cost against ``-dV``.

    Logged beside lambda_F for comparison only.  Returns ``None`` when the window
    is degenerate (fewer than two points or no variation in V).
    """
    v = np.asarray(v_series, dtype=float)
    c = np.asarray(cost_series, dtype=float)
    if window is not None:
        v, c = v[-window:], c[-window:]
    if v.size < 2:
        return None
    x = -np.diff(v)
    y = np.diff(c)
    sxx = float(x @ x)
    if sxx == 0.0:
        return None
    return float(x @ y) / sxx
