"""Finite-size Monte Carlo of the two-step training pipeline and its observables.

Pipeline: sample Gaussian single-index data, take one full-batch gradient
step on the first layer at learning rate eta = eta_tilde * d, fit the second
layer by ridge regression on fresh data, then measure everything the theory
predicts: the bulk spectrum of the centered feature covariance, extended
resolvent traces, the scalar order parameters (tau), and the test error.

All randomness flows from a counter-based generator, so identical seeds give
bit-identical runs regardless of thread schedule.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .model import ActivationSpec, ExperimentConfig, LinkSpec, SecondLayer, make_rng, sample_second_layer
from .quadrature import cached_rule, residual_table, shifted_coeffs

DEFAULT_TEST_POINTS = 10_000


class SimulationError(RuntimeError):
    pass


# --------------------------------------------------------------------------- #
# data and training
# --------------------------------------------------------------------------- #


def sample_data(n: int, d: int, w_star: np.ndarray, link: LinkSpec, rng: np.random.Generator):
    """Draw (X, y, kappa): rows x ~ N(0, I_d), kappa = x^T w*, y = g(kappa)."""
    X = rng.standard_normal((n, d))
    kappa = X @ w_star
    return X, link.fn(kappa), kappa


def sample_first_layer(p: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Rows uniform on the unit sphere (normalized Gaussians)."""
    W = rng.standard_normal((p, d))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    return W


def network_output(X: np.ndarray, W: np.ndarray, a: np.ndarray, sigma: ActivationSpec) -> np.ndarray:
    return sigma.fn(X @ W.T) @ a / np.sqrt(len(a))


def gradient_step(
    W0: np.ndarray,
    a0: np.ndarray,
    X0: np.ndarray,
    y0: np.ndarray,
    eta: float,
    sigma: ActivationSpec,
    include_init_output: bool = True,
    chunk: int = 16_384,
) -> np.ndarray:
    """One square-loss gradient step on the first layer, second layer frozen.

    g_j = (1/(n0 sqrt(p))) sum_mu (f(x_mu) - y_mu) a_j x_mu sigma'(w_j^T x_mu).

    include_init_output=False drops the f(x_mu; W0, a0) term, i.e. takes the
    step against the bare labels.  For odd activations the two coincide up to
    O(1/sqrt(d)); for activations with E[sigma] != 0 and a non-centered second
    layer the init output has an O(1) mean that shrinks every weight row, an
    effect outside the spiked description, so figure reproductions use the
    label-only protocol (see README).  Batches of `chunk` rows keep memory flat.
    """
    n0, p = X0.shape[0], W0.shape[0]
    grad = np.zeros_like(W0)
    for start in range(0, n0, chunk):
        sl = slice(start, min(start + chunk, n0))
        pre = X0[sl] @ W0.T
        if include_init_output:
            resid = sigma.fn(pre) @ a0 / np.sqrt(p) - y0[sl]
        else:
            resid = -y0[sl]
        R = resid[:, None] * sigma.deriv(pre)
        grad += (R * a0[None, :]).T @ X0[sl]
    grad /= n0 * np.sqrt(p)
    return W0 - eta * grad


def spike_vector(a0: np.ndarray, eta: float, c1: float, cstar1: float) -> np.ndarray:
    """u = eta c1 c1* a0 / sqrt(p), the rank-one spike amplitude per neuron."""
    return eta * c1 * cstar1 * a0 / np.sqrt(len(a0))


def spike_directions(X0: np.ndarray, y0: np.ndarray, cstar1: float):
    """Raw first-batch spike direction v = X0^T y0 / n0 and its unit normalization.

    The raw vector concentrates on c1* w*; only the c1* scale is used (never
    E[g], which vanishes for centered links), and the unit form is what the
    trained direction should be compared against.
    """
    v_raw = X0.T @ y0 / len(y0)
    scaled = v_raw / cstar1
    return v_raw, scaled / np.linalg.norm(scaled)


def spiked_approximation(W0: np.ndarray, a0: np.ndarray, eta: float, w_star: np.ndarray, c1: float, cstar1: float) -> np.ndarray:
    """W0 + u w*^T, the rank-one surrogate for the trained first layer."""
    u = spike_vector(a0, eta, c1, cstar1)
    return W0 + np.outer(u, w_star)


def operator_norm(M: np.ndarray, tol: float = 1e-8, max_iter: int = 500, rng_seed: int = 7) -> float:
    """Largest singular value by power iteration on M^T M."""
    rng = np.random.default_rng(rng_seed)
    v = rng.standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    sigma_prev = 0.0
    for _ in range(max_iter):
        w = M @ v
        v = M.T @ w
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
        sigma = np.sqrt(nv)
        if abs(sigma - sigma_prev) <= tol * max(sigma, 1.0):
            return float(sigma)
        sigma_prev = sigma
    raise SimulationError(f"power iteration did not converge within {max_iter} iterations (last sigma {sigma_prev:.6g})")


def spike_deviation(W1: np.ndarray, W_tilde: np.ndarray, tol: float = 1e-8) -> float:
    """Operator norm of W1 - W_tilde."""
    if W1.shape != W_tilde.shape:
        raise ValueError("shape mismatch")
    return operator_norm(W1 - W_tilde, tol=tol)


# --------------------------------------------------------------------------- #
# features, ridge, observables
# --------------------------------------------------------------------------- #


@dataclass
class ExtendedFeatureMatrix:
    """Raw features plus their split into group means and centered bulk."""

    phi: np.ndarray        # (n, p)
    y: np.ndarray          # (n,)
    kappa: np.ndarray      # (n,)
    groups: np.ndarray     # (p,) vocabulary index per neuron (contiguous groups)
    group_sizes: np.ndarray
    phi_bar: np.ndarray = field(init=False)    # (n, k)
    phi_tilde: np.ndarray = field(init=False)  # (n, p)

    def __post_init__(self):
        k = len(self.group_sizes)
        if np.any(self.group_sizes < 1):
            raise SimulationError("every group must contain at least one neuron")
        n = self.phi.shape[0]
        self.phi_bar = np.empty((n, k))
        self.phi_tilde = self.phi.copy()
        start = 0
        for q, size in enumerate(self.group_sizes):
            sl = slice(start, start + size)
            self.phi_bar[:, q] = self.phi[:, sl].mean(axis=1)
            self.phi_tilde[:, sl] -= self.phi_bar[:, q][:, None]
            start += size

    @property
    def k(self) -> int:
        return len(self.group_sizes)

    def assembled(self) -> np.ndarray:
        """Column order (y, mean_1..mean_k, centered features)."""
        return np.concatenate([self.y[:, None], self.phi_bar, self.phi_tilde], axis=1)


def features(W: np.ndarray, X: np.ndarray, sigma: ActivationSpec) -> np.ndarray:
    return sigma.fn(X @ W.T)


def extended_features(
    phi: np.ndarray,
    y: np.ndarray,
    kappa: np.ndarray,
    groups: np.ndarray,
    group_sizes: np.ndarray,
) -> ExtendedFeatureMatrix:
    return ExtendedFeatureMatrix(phi=phi, y=y, kappa=kappa, groups=groups, group_sizes=group_sizes)


def ridge_fit(phi: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Minimizer of sum_mu (y_mu - phi_mu^T a / sqrt(p))^2 + lam ||a||^2.

    Solved through the smaller of the primal (p x p) and dual (n x n) normal
    equations; the two are identical by the push-through identity.
    """
    if lam <= 0:
        raise ValueError(f"ridge penalty must be > 0, got {lam}")
    n, p = phi.shape
    try:
        if p <= n:
            G = phi.T @ phi / p + lam * np.eye(p)
            rhs = phi.T @ y / np.sqrt(p)
            cf = scipy.linalg.cho_factor(G, check_finite=False)
            return scipy.linalg.cho_solve(cf, rhs, check_finite=False)
        G = phi @ phi.T / p + lam * np.eye(n)
        cf = scipy.linalg.cho_factor(G, check_finite=False)
        return phi.T @ scipy.linalg.cho_solve(cf, y, check_finite=False) / np.sqrt(p)
    except np.linalg.LinAlgError as exc:
        G = (phi.T @ phi / p if p <= n else phi @ phi.T / p)
        raise SimulationError(f"ridge solve failed: cond(Gram)={np.linalg.cond(G):.3e}, lam={lam}") from exc


def empirical_generror(
    a_hat: np.ndarray,
    W1: np.ndarray,
    link: LinkSpec,
    w_star: np.ndarray,
    sigma: ActivationSpec,
    rng: np.random.Generator,
    n_test: int = DEFAULT_TEST_POINTS,
):
    """Monte Carlo estimate of E[(y_new - f(x_new))^2] with its standard error."""
    if n_test < 10_000:
        raise ValueError(f"need n_test >= 10^4 for a stable estimate, got {n_test}")
    X, y, _ = sample_data(n_test, W1.shape[1], w_star, link, rng)
    resid = (y - network_output(X, W1, a_hat, sigma)) ** 2
    return float(resid.mean()), float(resid.std(ddof=1) / np.sqrt(n_test))


@dataclass
class TauSet:
    """Scalar order parameters of the test-error formula."""

    tau0: np.ndarray
    tau1: np.ndarray
    tau2: float
    tau3: float
    provenance: str = "empirical"

    def __post_init__(self):
        vals = [*np.atleast_1d(self.tau0), *np.atleast_1d(self.tau1), self.tau2, self.tau3]
        if not np.all(np.isfinite(vals)):
            raise SimulationError(f"non-finite tau set: {vals}")
        if self.provenance == "empirical" and (self.tau2 < -1e-8 or self.tau3 < -1e-8):
            raise SimulationError(f"empirical tau2/tau3 must be nonnegative quadratic forms, got {self.tau2}, {self.tau3}")


def group_sums(values: np.ndarray, groups: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros(k, dtype=values.dtype)
    np.add.at(out, groups, values)
    return out


def empirical_tau(
    a_hat: np.ndarray,
    groups: np.ndarray,
    theta: np.ndarray,
    W: np.ndarray,
    sigma: ActivationSpec,
    zeta_u: np.ndarray,
    n_kappa: int = 201,
) -> TauSet:
    """Measured order parameters of a fitted readout.

    tau0_q = sum_{j in group q} a_j / sqrt(p)       (group-mean coefficient)
    tau1_q = sum_{j in group q} a_j theta_j / sqrt(p)
    tau2   = a^T (Cbar_e o W W^T) a / p,  Cbar = E_kappa[c1 c1^T]
    tau3   = a^T diag(E_kappa[r]) a / p
    """
    p = len(a_hat)
    k = len(zeta_u)
    rule = cached_rule(n_kappa)
    c1 = np.empty((len(rule.nodes), k))
    resid = np.empty((len(rule.nodes), k))
    for q, z in enumerate(zeta_u):
        c1[:, q] = shifted_coeffs(sigma.fn, rule.nodes * z, 1)[:, 1]
        resid[:, q] = residual_table(sigma.fn, rule.nodes * z)
    cbar = c1.T @ (c1 * rule.weights[:, None])
    rbar = resid.T @ rule.weights

    tau0 = group_sums(a_hat, groups, k) / np.sqrt(p)
    tau1 = group_sums(a_hat * theta, groups, k) / np.sqrt(p)
    # a^T (Cbar_e o WW^T) a = sum_{qq'} Cbar_qq' s_q^T s_q' with s_q = sum_{j in q} a_j w_j
    s = np.zeros((k, W.shape[1]))
    np.add.at(s, groups, a_hat[:, None] * W)
    tau2 = float(np.einsum("qr,qi,ri->", cbar, s, s) / p)
    tau3 = float(np.sum(rbar[groups] * a_hat**2) / p)
    return TauSet(tau0=tau0, tau1=tau1, tau2=tau2, tau3=tau3, provenance="empirical")


# --------------------------------------------------------------------------- #
# spectra and resolvent traces
# --------------------------------------------------------------------------- #


def bulk_spectrum(phi_tilde: np.ndarray) -> np.ndarray:
    """All p eigenvalues of phi_tilde^T phi_tilde / p (zeros included)."""
    n, p = phi_tilde.shape
    try:
        if n < p:
            nz = np.linalg.eigvalsh(phi_tilde @ phi_tilde.T / p)
            eigs = np.concatenate([np.zeros(p - n), nz])
        else:
            eigs = np.linalg.eigvalsh(phi_tilde.T @ phi_tilde / p)
    except np.linalg.LinAlgError as exc:
        raise SimulationError("eigensolver failed on the bulk covariance") from exc
    return np.sort(np.clip(eigs, 0.0, None))


def empirical_stieltjes(eigs: np.ndarray, z: complex) -> complex:
    if z.imag == 0.0 and z.real >= 0.0:
        raise ValueError("z must lie off the positive real axis")
    return complex(np.mean(1.0 / (eigs - z)))


@dataclass(frozen=True)
class TraceFunctional:
    """Sparse rank-structured test matrix A for Tr(A G_e(z)).

    kind = "unit" (A = e_i e_i^T), "normalized_trace" (A = I/dim), or
    "rank_one" (A = u v^T).
    """

    kind: str
    index: int = 0
    u: np.ndarray | None = None
    v: np.ndarray | None = None


class EmpiricalExtendedResolvent:
    """Resolvent functionals of (Phi_e^T Phi_e / p - z I)^{-1}.

    One symmetric eigendecomposition serves every functional and every z; the
    rank structure (at most n nonzero eigenvalues) is used when n < dim.
    """

    def __init__(self, phi_e: np.ndarray, p: int):
        self.n, self.dim = phi_e.shape
        self.p = p
        if self.n < self.dim:
            # nonzero spectrum from the n x n Gram; eigenvectors lifted back
            small = phi_e @ phi_e.T / p
            vals, vecs = np.linalg.eigh(small)
            keep = vals > max(vals.max(), 1.0) * 1e-13
            lifted = phi_e.T @ vecs[:, keep]
            lifted /= np.linalg.norm(lifted, axis=0, keepdims=True)
            self.eigvals = vals[keep]
            self.eigvecs = lifted
        else:
            M = phi_e.T @ phi_e / p
            self.eigvals, self.eigvecs = np.linalg.eigh(M)
        self.rank = len(self.eigvals)

    def trace_functional(self, A: TraceFunctional, z: complex) -> complex:
        res = 1.0 / (self.eigvals - z)
        if A.kind == "normalized_trace":
            total = np.sum(res) + (self.dim - self.rank) * (-1.0 / z)
            return complex(total / self.dim)
        if A.kind == "unit":
            row = self.eigvecs[A.index]
            proj = np.sum(row**2 * res)
            leftover = 1.0 - np.sum(row**2)
            return complex(proj + leftover * (-1.0 / z))
        if A.kind == "rank_one":
            pu = self.eigvecs.T @ A.u
            pv = self.eigvecs.T @ A.v
            val = np.sum(pv * res * pu) + (A.v @ A.u - pv @ pu) * (-1.0 / z)
            return complex(val)
        raise ValueError(f"unknown functional kind {A.kind!r}")


def extended_resolvent_trace(phi_e: np.ndarray, p: int, A: TraceFunctional, z: complex) -> complex:
    """Tr(A G_e(z)) for one functional; build EmpiricalExtendedResolvent to reuse work."""
    return EmpiricalExtendedResolvent(phi_e, p).trace_functional(A, z)


# --------------------------------------------------------------------------- #
# bulk-weight covariance diagnostic
# --------------------------------------------------------------------------- #


@dataclass
class BulkCovarianceReport:
    empirical: float
    predicted: float

    @property
    def rel_gap(self) -> float:
        return abs(self.empirical - self.predicted) / abs(self.predicted)


def bulk_covariance_diagnostic(
    W0: np.ndarray,
    a0: np.ndarray,
    X0: np.ndarray,
    y0: np.ndarray,
    eta: float,
    sigma: ActivationSpec,
    link: LinkSpec,
) -> BulkCovarianceReport:
    """Mean squared row norm of the trained weights with the rank-one signal removed.

    Valid for odd sigma (c2 = 0) and uniform second layer sqrt(p) a_j = 1; the
    prediction is 1 + E[sigma'_{>1}(xi)^2] etatilde^2 (1/alpha0) E[g(xi)^2]
    with alpha0 = n0/d (width p = d is assumed by that scaling).
    """
    p, d = W0.shape
    n0 = X0.shape[0]
    rule = cached_rule(201)
    c = shifted_coeffs(sigma.fn, np.zeros(1), 2)[0]
    if abs(c[2]) > 1e-8:
        raise ValueError(f"diagnostic requires c2(sigma)=0 (odd activation), got c2={c[2]:.3g}")
    if not np.allclose(a0 * np.sqrt(p), 1.0, atol=1e-12):
        raise ValueError("diagnostic requires uniform second layer sqrt(p) a_j = 1")

    W1 = gradient_step(W0, a0, X0, y0, eta, sigma)
    u_raw = eta * c[1] * a0 / np.sqrt(p)
    v_raw = X0.T @ y0 / n0
    bulk = W1 - np.outer(u_raw, v_raw)
    empirical = float(np.mean(np.sum(bulk**2, axis=1)))

    eta_tilde = eta / d
    alpha0 = n0 / d
    dsig = sigma.deriv(rule.nodes)
    e_dsig2 = float(rule.weights @ dsig**2)
    sig_gt1 = e_dsig2 - c[1] ** 2
    e_g2 = float(rule.weights @ link.fn(rule.nodes) ** 2)
    predicted = 1.0 + sig_gt1 * eta_tilde**2 * (1.0 / alpha0) * e_g2
    return BulkCovarianceReport(empirical=empirical, predicted=predicted)


# --------------------------------------------------------------------------- #
# full pipeline
# --------------------------------------------------------------------------- #


@dataclass
class TrainedModel:
    """Everything the two training steps produce, plus the target."""

    W0: np.ndarray
    W1: np.ndarray
    a0: np.ndarray
    a_hat: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    w_star: np.ndarray
    second_layer: SecondLayer


@dataclass
class RunResult:
    config: ExperimentConfig
    seed_index: int
    model: TrainedModel
    feats: ExtendedFeatureMatrix
    gen_error: float
    gen_error_stderr: float
    tau: TauSet
    eigenvalues: np.ndarray | None = None
    spike_dev: float | None = None


def run_experiment(
    config: ExperimentConfig,
    seed_index: int = 0,
    compute_spectrum: bool = False,
    compute_spike_deviation: bool = False,
    n_test: int = DEFAULT_TEST_POINTS,
    zeta_u: np.ndarray | None = None,
    pretrained: tuple | None = None,
    include_init_output: bool = True,
) -> RunResult:
    """Run the full two-step pipeline for one seed.

    `pretrained` optionally injects (W0, W1, second_layer, w_star) from a
    previous run with the same seed so sweeps over n need not repeat the
    gradient step (the trained layer's law does not depend on n).
    """
    sigma = config.activation_spec()
    link = config.link_spec()
    c1, cstar1 = sigma.first_coeff(), link.first_coeff()

    if pretrained is None:
        rng = make_rng(config.seed, seed_index)
        w_star = rng.standard_normal(config.d)
        w_star /= np.linalg.norm(w_star)
        W0 = sample_first_layer(config.p, config.d, rng)
        layer = sample_second_layer(config.p, config.vocab, rng)
        X0, y0, _ = sample_data(config.n0, config.d, w_star, link, rng)
        W1 = gradient_step(W0, layer.a0, X0, y0, config.eta, sigma, include_init_output=include_init_output)
        del X0, y0
    else:
        W0, W1, layer, w_star = pretrained
        # fresh stream, disjoint from the one that trained the injected weights
        rng = make_rng(config.seed, 1_000_000 + seed_index)

    X, y, kappa = sample_data(config.n, config.d, w_star, link, rng)
    phi = features(W1, X, sigma)
    feats = extended_features(phi, y, kappa, layer.groups, layer.group_sizes)
    a_hat = ridge_fit(phi, y, config.lam)

    theta = W0 @ w_star
    u = spike_vector(layer.a0, config.eta, c1, cstar1)
    model = TrainedModel(W0=W0, W1=W1, a0=layer.a0, a_hat=a_hat, u=u, theta=theta, w_star=w_star, second_layer=layer)

    err, stderr = empirical_generror(a_hat, W1, link, w_star, sigma, rng, n_test=n_test)
    if zeta_u is None:
        zeta_a, _ = config.vocab.as_arrays()
        zeta_u = (config.eta_tilde / config.beta) * c1 * cstar1 * zeta_a
    tau = empirical_tau(a_hat, layer.groups, theta, W0, sigma, zeta_u)

    eigs = bulk_spectrum(feats.phi_tilde) if compute_spectrum else None
    dev = None
    if compute_spike_deviation:
        dev = spike_deviation(W1, spiked_approximation(W0, layer.a0, config.eta, w_star, c1, cstar1))
    return RunResult(
        config=config,
        seed_index=seed_index,
        model=model,
        feats=feats,
        gen_error=err,
        gen_error_stderr=stderr,
        tau=tau,
        eigenvalues=eigs,
        spike_dev=dev,
    )
