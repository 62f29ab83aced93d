import numpy as np
import pytest

from spikedrf import detequiv as de
from spikedrf import generror as ge
from spikedrf import simulate as sim
from spikedrf.model import ExperimentConfig, VocabularySpec, get_activation, get_link
from spikedrf.simulate import TauSet


def problem(alpha=1.5, beta=1.2, activation="tanh", link="sin", zeta=(0.6, -0.3), pi=(0.7, 0.3)):
    return de.build_problem(get_activation(activation), get_link(link), zeta, pi, alpha=alpha, beta=beta)


def test_alpha_zero_schur_is_ridge_identity():
    prob = problem(alpha=0.0)
    lam = 0.3
    state = de.solve_fixed_point(prob, complex(-lam, 0.0))
    schur = ge.schur_C_inverse(prob, state)
    assert np.max(np.abs(schur.Cinv - lam * np.eye(3))) < 1e-10
    assert np.max(np.abs(ge.tau0(schur, lam))) < 1e-10
    t1 = ge.tau1(prob, de.blocks(prob, state), np.zeros(2))
    assert np.max(np.abs(t1)) < 1e-12
    t2, t3 = ge.tau2_tau3(prob, lam, np.zeros(2), state)
    assert abs(t2) < 1e-8 and abs(t3) < 1e-8


def test_zero_link_label_row():
    import dataclasses

    prob = dataclasses.replace(problem(), g=np.zeros(len(problem().g)))
    lam = 0.2
    state = de.solve_fixed_point(prob, complex(-lam, 0.0))
    schur = ge.schur_C_inverse(prob, state)
    # with g = 0 the label row collapses to lambda on the diagonal, 0 off
    assert abs(schur.Cinv[0, 0] - lam) < 1e-12
    assert np.max(np.abs(schur.Cinv[0, 1:])) < 1e-12
    assert np.max(np.abs(ge.tau0(schur, lam))) < 1e-12


def test_schur_symmetry_fig2_config():
    cfg = ExperimentConfig(
        d=1365, p=2048, n=2730, eta_tilde=0.5, lam=0.01, seed=0, activation="relu", link="tanh",
        vocab=VocabularySpec(zeta=(1.0, -0.5, 1.5, -2.0), pi=(0.7, 0.1, 0.1, 0.1)),
    )
    prob = de.problem_from_config(cfg)
    state = de.solve_fixed_point(prob, complex(-cfg.lam, 0.0))
    schur = ge.schur_C_inverse(prob, state)
    assert np.max(np.abs(schur.Cinv - schur.Cinv.T)) < 1e-10


def test_lambda_kappa_trivial_and_realizable():
    prob = de.build_problem(get_activation("identity"), get_link("identity"), [0.0], [1.0], alpha=2.0, beta=1.0)
    null = TauSet(tau0=np.zeros(1), tau1=np.zeros(1), tau2=0.0, tau3=0.0, provenance="asymptotic")
    kappas = np.array([-1.3, 0.2, 2.0])
    vals = ge.lambda_kappa(null, kappas, prob)
    assert np.max(np.abs(vals - kappas**2)) < 1e-12  # g(kappa)^2 for the identity link
    # realizable linear fit: tau1 = 1, tau2 = 1 cancel exactly; error 0
    fit = TauSet(tau0=np.zeros(1), tau1=np.ones(1), tau2=1.0, tau3=0.0, provenance="asymptotic")
    assert np.max(np.abs(ge.lambda_kappa(fit, kappas, prob))) < 1e-12
    assert abs(ge.expected_lambda(fit, prob)) < 1e-12


def test_null_predictor_expected_lambda():
    prob = problem(link="sin")
    null = TauSet(tau0=np.zeros(2), tau1=np.zeros(2), tau2=0.0, tau3=0.0, provenance="asymptotic")
    assert abs(ge.expected_lambda(null, prob) - prob.link_second_moment) < 1e-12


def test_rho_derivative_step_controls():
    prob = problem()
    lam = 0.05
    state = de.solve_fixed_point(prob, complex(-lam, 0.0))
    t0 = ge.tau0(ge.schur_C_inverse(prob, state), lam)
    with pytest.raises(ValueError):
        ge.tau2_tau3(prob, lam, t0, state, step=1e-2)
    a2, a3 = ge.tau2_tau3(prob, lam, t0, state, step=1e-4)
    b2, b3 = ge.tau2_tau3(prob, lam, t0, state, step=5e-5)
    assert abs(a2 - b2) / max(abs(a2), 1e-12) < 1e-5
    assert abs(a3 - b3) / max(abs(a3), 1e-12) < 1e-5
    # 4-point stencil agreement (symmetric steps)
    c2, c3 = ge.tau2_tau3(prob, lam, t0, state, step=1e-4, check_step_halving=True)
    assert abs(c2 - a2) / max(abs(a2), 1e-12) < 1e-4


def test_ridge_kills_fit_when_means_vanish():
    # eta = 0 with an odd activation: the mean basis is empty, so large lambda
    # drives tau0 -> 0 and the error to the null value E[g^2]
    prob = de.build_problem(get_activation("erf"), get_link("sin"), [0.0], [1.0], alpha=1.5, beta=1.2)
    errs = [ge.asymptotic_generror(prob, lam) for lam in (0.1, 1.0, 10.0, 1e3)]
    assert all(np.diff(errs) > -1e-10)  # monotone toward the null
    assert abs(errs[-1] - prob.link_second_moment) < 1e-3
    state = de.solve_fixed_point(prob, complex(-1e3, 0.0))
    t0 = ge.tau0(ge.schur_C_inverse(prob, state), 1e3)
    assert np.max(np.abs(t0)) < 1e-8


def test_vocabulary_split_invariance_of_generror():
    base = problem()
    split = de.build_problem(get_activation("tanh"), get_link("sin"), [0.6, 0.6, -0.3], [0.35, 0.35, 0.3], alpha=1.5, beta=1.2)
    for lam in (0.05, 0.7):
        assert abs(ge.asymptotic_generror(base, lam) - ge.asymptotic_generror(split, lam)) < 1e-6


def test_tau_matches_simulation_k1():
    # Fig-2-style k=1 configuration at moderate size: tau0/tau1/tau2/tau3 and
    # the error itself against a 4-seed Monte Carlo oracle
    cfg = ExperimentConfig(
        d=683, p=1024, n=1366, eta_tilde=0.5, lam=0.01, seed=3, activation="relu", link="tanh",
        vocab=VocabularySpec(zeta=(1.0,), pi=(1.0,)),
    )
    prob = de.problem_from_config(cfg)
    tau_th = ge.asymptotic_tau(prob, cfg.lam)
    runs = [sim.run_experiment(cfg, s, include_init_output=False) for s in range(4)]

    def se(vals):
        vals = np.asarray(vals, dtype=float)
        return vals.std(ddof=1) / np.sqrt(len(vals))

    for name, th, emp, slack in [
        # tau0 is a small intercept-like coordinate with an O(1/sqrt(d)) bias at
        # this reduced size; the 3-SE check at the full p=2048 scale is in the
        # acceptance suite (criterion 5)
        ("tau0", tau_th.tau0[0], [r.tau.tau0[0] for r in runs], 0.05),
        ("tau1", tau_th.tau1[0], [r.tau.tau1[0] for r in runs], 0.0),
        ("tau2", tau_th.tau2, [r.tau.tau2 for r in runs], 0.0),
        ("tau3", tau_th.tau3, [r.tau.tau3 for r in runs], 0.0),
    ]:
        gap = abs(th - np.mean(emp))
        assert gap < 3 * max(se(emp), 1e-4) + slack, f"{name}: theory {th} vs emp {np.mean(emp)} +- {se(emp)}"
    err_th = ge.expected_lambda(tau_th, prob)
    errs = [r.gen_error for r in runs]
    assert abs(err_th - np.mean(errs)) / np.mean(errs) < 0.05


def test_plugin_consistency_smoke():
    cfg = ExperimentConfig(
        d=640, p=960, n=960, n0=20 * 640, eta_tilde=1.5, lam=0.05, seed=11, activation="tanh", link="sin",
        vocab=VocabularySpec(zeta=(1.0, -1.0), pi=(0.8, 0.2)),
    )
    prob = de.problem_from_config(cfg)
    diffs, ses = [], []
    for s in range(3):
        res = sim.run_experiment(cfg, s)
        diffs.append(ge.expected_lambda(res.tau, prob) - res.gen_error)
        ses.append(res.gen_error_stderr)
    mean_diff = np.mean(diffs)
    se_comb = np.sqrt(np.mean(ses) ** 2 / len(diffs) + np.var(diffs, ddof=1) / len(diffs))
    assert abs(mean_diff) < 3 * se_comb


def test_asymptotic_tau_rejects_bad_lambda():
    with pytest.raises(ValueError):
        ge.asymptotic_tau(problem(), -0.1)
