"""End-to-end acceptance checks, one test per criterion.

Every test records a PASS/FAIL line with the measured value and its tolerance;
the lines are printed together at the end of the session.
"""

import math

import numpy as np
import pytest

from gridflow import autodiff as ad
from gridflow import energy_landscape as el
from gridflow import nn_opf, pf_core
from gridflow import oracle_eval as oe
from gridflow import sampler as sm
from gridflow.trainer import LrState, TrainConfig, Trainer, detect_stagnation_and_restart, lr_schedule

from conftest import random_network, random_state

RESULTS: list[str] = []


def verdict(number, title, ok, detail):
    RESULTS.append(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    assert ok, detail


def test_c01_architecture(case14, case39, case118):
    want = {"case14": 211_231, "case39": 1_392_214, "case118": 1_554_208}
    got = {net.name: nn_opf.auto_config(net).n_params for net in (case14, case39, case118)}
    verdict(1, "parameter counts (exact)", got == want, f"{got}")


def test_c02_residual_paths(case14, case39):
    rng = np.random.default_rng(2024)
    worst, count = 0.0, 0
    for net in (case14, case39):
        base = pf_core.stored_state(net)
        for _ in range(333):
            s = pf_core.SystemState(base.v + rng.normal(0, 0.03, net.n), base.theta + rng.normal(0, 0.2, net.n))
            pc, qc = pf_core.complex_injections(s, net.ybus)
            pt, qt = pf_core.trig_injections(s, net.ybus)
            worst = max(worst, np.abs(pc - pt).max(), np.abs(qc - qt).max())
            count += 1
    for _ in range(334):
        net = random_network(rng, 5)
        s = random_state(rng, net, 0.3)
        pc, qc = pf_core.complex_injections(s, net.ybus)
        pt, qt = pf_core.trig_injections(s, net.ybus)
        worst = max(worst, np.abs(pc - pt).max(), np.abs(qc - qt).max())
        count += 1
    verdict(2, "complex vs trig injections", count == 1000 and worst < 1e-10,
            f"max |diff| {worst:.2e} over {count} states (tol 1e-10)")


def test_c03_gradient(case14):
    cfg = nn_opf.auto_config(case14)
    params = nn_opf.init_params(cfg, case14, 0).as_dict()
    u = sm.lhs_batch(case14.input_dim, 64, np.random.default_rng(0))
    mult = el.MultiplierState()

    def program(**p):
        return el.total_loss(nn_opf.decode(nn_opf.forward(p, u), case14), u, case14, mult).total

    rng = np.random.default_rng(1)
    names = sorted(params)
    coords = {}
    for _ in range(32):
        k = names[rng.integers(len(names))]
        coords.setdefault(k, []).append(int(rng.integers(params[k].size)))
    err = ad.finite_diff_check(program, params, h=1e-6, coords=coords, fd_dtype=np.longdouble)
    verdict(3, "loss gradient vs central differences", err < 1e-6,
            f"max rel err {err:.2e} on 32 coordinates, h=1e-6 (tol 1e-6)")


def test_c04_oracles(case14):
    sol = oe.newton_pf(case14, pf_core.stored_dispatch(case14))
    u = np.zeros(case14.input_dim)
    res = pf_core.residual(sol.state, sol.dispatch, u, case14)
    cross = max(np.abs(res.p_res).max(), np.abs(res.q_res).max())
    th = sol.state.theta + 1e-3
    th[case14.slack] = sol.state.theta[case14.slack]
    rr = oe.gradient_flow_refine(pf_core.SystemState(sol.state.v.copy(), th), sol.dispatch, u, case14, tol=1e-8)
    decreasing = all(b < a for a, b in zip(rr.energy_trace, rr.energy_trace[1:]))
    ok = sol.converged and sol.iterations <= 10 and sol.max_residual < 1e-8 and cross < 1e-8
    ok = ok and rr.energy_trace[-1] < 1e-8 and decreasing
    verdict(4, "Newton / residual / gradient flow", ok,
            f"NR {sol.iterations} it, mismatch {sol.max_residual:.1e}; residual {cross:.1e}; "
            f"flow V {rr.energy_trace[-1]:.1e} after {rr.iterations} it, strictly decreasing={decreasing}")


def test_c05_bounds(case14, case39, case118):
    rng = np.random.default_rng(5)
    bad = 0
    for net in (case14, case39, case118):
        raw = rng.normal(0, 1, (100_000, nn_opf.output_dim(net))) * rng.choice([0.01, 1, 10, 1e3], (100_000, 1))
        v = np.asarray(nn_opf.decode(raw, net)[0].v)
        bad += int(np.sum((v < net.array("v_min")) | (v > net.array("v_max"))))
    verdict(5, "decoded voltages inside bounds", bad == 0, f"{bad} violations in 3 x 1e5 decodes")


def test_c06_multipliers():
    upd = el.update_multipliers
    m0 = el.MultiplierState(lambda_f=100.0, late_epoch_threshold=15000)
    checks = {
        "early": upd(m0, 1.0, 0, 0, 0).lambda_f == 100.0 + 0.01 * 1.0,
        "near-convergence x50": upd(m0, 5e-5, 0, 0, 0).lambda_f == 100.0 + 0.01 * 50 * 5e-5,
        "late x10": upd(m0, 0.5, 0, 0, 15000).lambda_f == 100.0 + 0.01 * 10 * 0.5,
        "late floor 0.01": upd(m0, 1e-9, 0, 0, 15000).lambda_f == 100.0 + 0.01,
        "lambda_P ascent": upd(el.MultiplierState(lambda_p=1.0, mu_p=1e3), 0, 0.2, 0, 0).lambda_p == 1.0 + 1e3 * 0.2,
        "lambda_Q ascent": upd(el.MultiplierState(lambda_q=1.0, mu_q=1e3), 0, 0, 0.3, 0).lambda_q == 1.0 + 1e3 * 0.3,
        "beta 1.5": upd(el.MultiplierState(mu_p=1e3), 0, 1e-5, 0, 0).mu_p == 1.5e3,
        "no growth when violated": upd(el.MultiplierState(mu_p=1e3), 0, 0.1, 0, 0).mu_p == 1e3,
        "cap 1e6": upd(el.MultiplierState(mu_q=9e5), 0, 0, 0, 0).mu_q == 1e6,
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(6, "multiplier arithmetic (exact)", not failed, f"{len(checks) - len(failed)}/{len(checks)} rules exact"
            + (f", failed: {failed}" if failed else ""))


def test_c07_restarts():
    cfg = TrainConfig(epochs=60000)
    mult = el.MultiplierState(lambda_f=100.0, lambda_p=4.0, lambda_q=2.0)
    st = LrState()
    fired = []
    for epoch in range(6000):
        lr_before = lr_schedule(cfg, epoch + 1, st)
        before = mult
        restarted, mult, st = detect_stagnation_and_restart(1.0, epoch, mult, st, cfg)
        if restarted:
            fired.append((epoch, before, mult, lr_before, lr_schedule(cfg, epoch + 1, st)))
    e0, b0, a0, lr0, lr1 = fired[0]
    halved = (a0.lambda_f, a0.lambda_p, a0.lambda_q) == (b0.lambda_f / 2, b0.lambda_p / 2, b0.lambda_q / 2)
    doubled = math.isclose(lr1, min(2 * lr0, 5e-3), rel_tol=1e-12)
    epochs = [f[0] for f in fired]
    spaced = all(b - a >= 2000 for a, b in zip(epochs, epochs[1:]))
    capped = TrainConfig(epochs=60000, lr_init=4e-3)
    st2 = LrState()
    for epoch in range(1001):
        _, _, st2 = detect_stagnation_and_restart(1.0, epoch, mult, st2, capped)
    cap_ok = math.isclose(lr_schedule(capped, 1001, st2), 5e-3, rel_tol=1e-12)
    ok = e0 == 1000 and halved and doubled and spaced and cap_ok and epochs[1] == 3000
    verdict(7, "warm-restart mechanics", ok,
            f"restarts at {epochs}, multipliers halved={halved}, lr x2={doubled}, cap 5e-3={cap_ok}")


@pytest.mark.slow
def test_c08_desk_training(case14, tmp_path):
    cfg = TrainConfig.desk(case14, epochs=5000, batch_size=64, seed=0)
    result = Trainer(case14, cfg).run(tmp_path)
    recs = result.records
    final_rn = recs[-1].residual_norm_metric
    improvement = recs[0].total_loss / min(r.best_loss for r in recs)
    u = sm.lhs_batch(case14.input_dim, 256, np.random.default_rng(123))
    rep = oe.evaluate(result.params, case14, u)
    ok = final_rn < 1e-2 and rep.voltage_violation_rate == 0 and rep.pg_violation_rate < 0.01 and improvement >= 100
    verdict(8, "IEEE14 desk-scale training", ok,
            f"final residual {final_rn:.3e} (tol 1e-2), V viol {rep.voltage_violation_rate:.0%}, "
            f"Pg viol {rep.pg_violation_rate:.2%} (tol 1%), best-loss gain {improvement:.1f}x (tol 100x), "
            f"{len(recs)} epochs, stop={result.stop_reason}")


@pytest.mark.slow
def test_c09_fixture_optimality(fixture3):
    oracle = oe.brute_force_opf(fixture3, 0.01)
    cfg = TrainConfig.desk(fixture3, epochs=3000, seed=0)
    result = Trainer(fixture3, cfg).run()
    u = np.zeros((1, fixture3.input_dim))
    state, dispatch = oe.predict(result.params, fixture3, u)
    s0 = pf_core.SystemState(np.asarray(state.v)[0], np.asarray(state.theta)[0])
    d0 = pf_core.Dispatch(np.asarray(dispatch.p_g)[0])
    rr = oe.gradient_flow_refine(s0, d0, u[0], fixture3)
    cost = oe.point_cost(fixture3, rr.dispatch.p_g)
    gap = abs(cost - oracle.cost) / oracle.cost
    v_bad, p_bad, q_bad = oe.violations(fixture3, rr.state, rr.dispatch, u[0])
    feasible = not (v_bad.any() or p_bad.any() or q_bad.any())
    ok = gap < 0.02 and rr.converged and feasible
    verdict(9, "3-bus fixture vs brute-force optimum", ok,
            f"refined cost {cost:.2f} vs oracle {oracle.cost:.2f} $/h, gap {gap:.2%} (tol 2%), "
            f"flow converged={rr.converged}, feasible={feasible}")


def test_c10_sampling():
    ref = np.array([
        [0, 0, 0, 0, 0, 0], [0.5] * 6, [0.75, 0.25, 0.25, 0.25, 0.75, 0.75], [0.25, 0.75, 0.75, 0.75, 0.25, 0.25],
        [0.375, 0.375, 0.625, 0.875, 0.375, 0.125], [0.875, 0.875, 0.125, 0.375, 0.875, 0.625],
        [0.625, 0.125, 0.875, 0.625, 0.625, 0.875], [0.125, 0.625, 0.375, 0.125, 0.125, 0.375],
        [0.1875, 0.3125, 0.9375, 0.4375, 0.5625, 0.3125], [0.6875, 0.8125, 0.4375, 0.9375, 0.0625, 0.8125],
    ])
    sobol_ok = np.array_equal(sm.sobol_unit(6, 10), ref)
    rng = np.random.default_rng(10)
    strat_ok = True
    for _ in range(1000):
        dim, count = int(rng.integers(1, 50)), int(rng.integers(1, 300))
        x = sm.lhs_unit(dim, count, np.random.default_rng(int(rng.integers(2**32))))
        bins = np.sort(np.floor(x * count).astype(int), axis=0)
        strat_ok &= bool(np.all(bins == np.arange(count)[:, None]))
    schedule = sm.StageSchedule(200, guided_refresh_interval=20)

    def draw():
        r = np.random.default_rng(7)
        s = sm.ScenarioSampler(5, schedule)
        out = []
        for e in range(200):
            b = s.batch(e, 16, r)
            s.record(b, np.abs(b).sum(1), b.sum(1), np.abs(b).max(1), e)
            out.append(b)
        return np.vstack(out)

    det_ok = np.array_equal(draw(), draw())
    verdict(10, "Sobol reference, LHS strata, determinism", sobol_ok and strat_ok and det_ok,
            f"Joe-Kuo dims 1-6 exact={sobol_ok}, 1000 LHS stratified={strat_ok}, deterministic={det_ok}")


@pytest.mark.slow
def test_c11_determinism_and_resume(case14, tmp_path):
    cfg = TrainConfig.desk(case14, epochs=5000, checkpoint_every=100)
    Trainer(case14, cfg).run(tmp_path / "a", max_epochs=300)
    Trainer(case14, cfg).run(tmp_path / "b", max_epochs=300)
    same_logs = (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    original = Trainer(case14, cfg)
    original.run(max_epochs=200)
    resumed = Trainer.resume(case14, tmp_path / "a" / "ckpt_000100.gfck")
    resumed.run(max_epochs=100)
    same_resume = resumed.records == original.records[100:200]
    verdict(11, "bit-identical reruns and resume", same_logs and same_resume,
            f"identical logs over 300 epochs={same_logs}, resume at 100 reproduces epochs 100-199={same_resume}")
