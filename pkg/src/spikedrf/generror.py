"""Asymptotic test error of the ridge readout from the deterministic equivalent.

At z = -lambda the (k+1)-dimensional Schur block of the equivalent resolvent,

    C^{-1} = A11 + lambda I - A21t^T (psi^{-1} + (alpha/beta) S)^{-1} A21t,

yields the mean order parameters (tau0 from its label/mean rows, tau1 through
the cross block), while the variance parameters tau2 and tau3 are rho-derivatives
of C^{-1} at rho = 0, taken by warm-started central finite differences.  The
test error is then the Gaussian average of

    Lambda(kappa) = (g(kappa) - sum_q c0(kappa,zeta_q) tau0_q
                              - kappa sum_q c1(kappa,zeta_q) tau1_q)^2
                    - (sum_q c1(kappa,zeta_q) tau1_q)^2 + tau2 + tau3,

with each of tau2, tau3 appearing exactly once; the subtracted square is the
target-direction part of the bulk variance, and cancels tau2 exactly in the
realizable linear case.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detequiv import (
    DerivedKernels,
    DetEquivProblem,
    FixedPointState,
    blocks,
    solve_fixed_point,
)
from .quadrature import shifted_coeffs
from .simulate import TauSet

DEFAULT_RHO_STEP = 1e-4


class DerivativeInstability(RuntimeError):
    pass


@dataclass
class SchurBlock:
    """C^{-1}: index 0 is the label row, 1..k the group-mean rows."""

    Cinv: np.ndarray

    def __post_init__(self):
        asym = np.max(np.abs(self.Cinv - self.Cinv.T))
        if asym > 1e-8 * max(1.0, np.max(np.abs(self.Cinv))):
            raise RuntimeError(f"Schur block lost symmetry: asymmetry {asym:.3e}")


def _variance_kernel_inverse(problem: DetEquivProblem, kern: DerivedKernels) -> np.ndarray:
    """H = (psi^{-1} + sf*S)^{-1}, computed without forming psi^{-1}."""
    sf = problem.sample_factor
    Sp = sf * kern.S
    k = problem.k
    return np.linalg.solve(np.eye(k, dtype=complex) + kern.psi @ Sp, kern.psi)


def schur_C_inverse(problem: DetEquivProblem, state: FixedPointState, kern: DerivedKernels | None = None) -> SchurBlock:
    """The (k+1)-square Schur block of the deterministic equivalent at state.z."""
    kern = kern or blocks(problem, state)
    H = _variance_kernel_inverse(problem, kern)
    A21t = kern.A21t.astype(complex)
    Cinv = kern.A11 - state.z * np.eye(problem.k + 1) - A21t.T @ H @ A21t
    if np.max(np.abs(Cinv.imag)) > 1e-8 * max(1.0, np.max(np.abs(Cinv.real))):
        raise RuntimeError(f"Schur block at z={state.z} is not real; max imag {np.max(np.abs(Cinv.imag)):.3e}")
    return SchurBlock(Cinv=0.5 * (Cinv.real + Cinv.real.T))


def tau0(schur: SchurBlock, lam: float) -> np.ndarray:
    """Mean-fit coefficients: the lambda-corrected mean block solved against the label row.

    The asymptotic mean fit is unpenalized, so the bare Gram (C^{-1} block
    minus lambda I) appears; the finite-p diag(1/pi)/p correction is dropped.
    """
    k = schur.Cinv.shape[0] - 1
    M = schur.Cinv[1:, 1:] - lam * np.eye(k)
    rhs = schur.Cinv[1:, 0]
    try:
        out = np.linalg.solve(M, rhs)
        if np.linalg.norm(M @ out - rhs) <= 1e-8 * (1.0 + np.linalg.norm(rhs)):
            return out
    except np.linalg.LinAlgError:
        pass
    # degenerate mean basis (duplicated vocabulary entries): minimum-norm fit
    return np.linalg.lstsq(M, rhs, rcond=None)[0]


def tau1(problem: DetEquivProblem, kern: DerivedKernels, tau0_vec: np.ndarray) -> np.ndarray:
    """Target-direction coefficients (psi^{-1} + sf*S)^{-1} A21t [1; -tau0]."""
    H = _variance_kernel_inverse(problem, kern)
    r = np.concatenate([[1.0], -tau0_vec]).astype(complex)
    out = H @ kern.A21t.astype(complex) @ r
    return out.real


def tau2_tau3(
    problem: DetEquivProblem,
    lam: float,
    tau0_vec: np.ndarray,
    base_state: FixedPointState,
    step: float = DEFAULT_RHO_STEP,
    check_step_halving: bool = False,
    tol: float = 1e-10,
):
    """Variance parameters by central finite differences of C^{-1} in rho.

    Warm-starts every perturbed solve from the unperturbed solution.  With
    check_step_halving=True the derivative is recomputed at step/2 and a
    relative change above 1e-4 raises DerivativeInstability.
    """
    if not (1e-6 <= step <= 1e-3):
        raise ValueError(f"rho step must lie in [1e-6, 1e-3], got {step}")
    r = np.concatenate([[1.0], -tau0_vec])

    def quad_form(rho) -> float:
        state = solve_fixed_point(problem, base_state.z, rho=rho, warm_start=base_state, tol=tol)
        schur = schur_C_inverse(problem, state)
        return float(r @ schur.Cinv @ r)

    def derivative(h: float, which: int) -> float:
        plus = quad_form((h, 0.0) if which == 0 else (0.0, h))
        minus = quad_form((-h, 0.0) if which == 0 else (0.0, -h))
        return (plus - minus) / (2 * h)

    t2 = derivative(step, 0)
    t3 = derivative(step, 1)
    if check_step_halving:
        t2h = derivative(step / 2, 0)
        t3h = derivative(step / 2, 1)
        for name, a, b in (("tau2", t2, t2h), ("tau3", t3, t3h)):
            denom = max(abs(a), abs(b), 1e-12)
            if abs(a - b) / denom > 1e-4:
                raise DerivativeInstability(f"{name} changed by {abs(a - b) / denom:.2e} under step halving")
        t2, t3 = t2h, t3h
    return t2, t3


def asymptotic_tau(
    problem: DetEquivProblem,
    lam: float,
    step: float = DEFAULT_RHO_STEP,
    tol: float = 1e-10,
    check_step_halving: bool = False,
) -> TauSet:
    """Solve at z = -lambda and assemble the full asymptotic TauSet."""
    if lam <= 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    state = solve_fixed_point(problem, complex(-lam, 0.0), tol=tol)
    kern = blocks(problem, state)
    schur = schur_C_inverse(problem, state, kern)
    t0 = tau0(schur, lam)
    t1 = tau1(problem, kern, t0)
    t2, t3 = tau2_tau3(problem, lam, t0, state, step=step, check_step_halving=check_step_halving, tol=tol)
    return TauSet(tau0=t0, tau1=t1, tau2=t2, tau3=t3, provenance="asymptotic")


def lambda_kappa(tau: TauSet, kappa, problem: DetEquivProblem) -> np.ndarray:
    """Test-error integrand at arbitrary kappa."""
    if problem.sigma is None or problem.link is None:
        raise ValueError("lambda_kappa needs a problem built with activation and link specs")
    kappa = np.atleast_1d(np.asarray(kappa, dtype=float))
    k = problem.k
    c0 = np.empty((len(kappa), k))
    c1 = np.empty((len(kappa), k))
    for q, z in enumerate(problem.zeta_u):
        coeffs = shifted_coeffs(problem.sigma.fn, kappa * z, 1)
        c0[:, q], c1[:, q] = coeffs[:, 0], coeffs[:, 1]
    g = problem.link.fn(kappa)
    mean_part = g - c0 @ tau.tau0 - kappa * (c1 @ tau.tau1)
    spike_var = c1 @ tau.tau1
    return mean_part**2 - spike_var**2 + tau.tau2 + tau.tau3


def expected_lambda(tau: TauSet, problem: DetEquivProblem) -> float:
    """E_kappa[Lambda_kappa] by the outer quadrature rule."""
    mean_part = problem.g - problem.c0 @ tau.tau0 - problem.kappa * (problem.c1 @ tau.tau1)
    spike_var = problem.c1 @ tau.tau1
    return float(problem.kappa_w @ (mean_part**2 - spike_var**2)) + tau.tau2 + tau.tau3


def asymptotic_generror(
    problem: DetEquivProblem,
    lam: float,
    step: float = DEFAULT_RHO_STEP,
    tol: float = 1e-10,
) -> float:
    """Deterministic test-error prediction: fixed point at -lambda, tau, then E[Lambda]."""
    tau = asymptotic_tau(problem, lam, step=step, tol=tol)
    return expected_lambda(tau, problem)
