"""Experiment configuration: activations, links, vocabularies, assumption checks.

One experiment is a Gaussian single-index problem y = g(x^T w*) fit by a
two-layer network sigma(W x) with a p-dimensional readout, trained with one
aggressive gradient step on n0 samples followed by ridge regression on n
fresh samples.  The second layer is initialized i.i.d. from a finite
vocabulary {zeta_q} with probabilities {pi_q}, scaled by 1/sqrt(p).

Assumption violations that the theory is empirically robust to (sigma not
odd, E[sigma] != 0, slow n0 growth) are downgraded to warnings; structural
errors (pi not a distribution, lambda <= 0 for theory evaluation) fail hard.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np
from scipy.special import erf as _erf

from .quadrature import DEFAULT_INNER_NODES, QuadratureRule, cached_rule, shifted_coeffs


class ConfigError(ValueError):
    """Structural configuration error (hard failure)."""


# --------------------------------------------------------------------------- #
# activations and links
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ActivationSpec:
    """Pointwise activation sigma with derivative, for training and Hermite data."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    kink_points: tuple = ()

    def first_coeff(self, rule: QuadratureRule | None = None) -> float:
        """c1 = E[sigma(z) z]."""
        rule = rule or cached_rule(DEFAULT_INNER_NODES)
        return float(rule.weights @ (self.fn(rule.nodes) * rule.nodes))

    def mean(self, rule: QuadratureRule | None = None) -> float:
        rule = rule or cached_rule(DEFAULT_INNER_NODES)
        return float(rule.weights @ self.fn(rule.nodes))

    def is_odd(self, tol: float = 1e-8, rule: QuadratureRule | None = None) -> bool:
        rule = rule or cached_rule(DEFAULT_INNER_NODES)
        asym = self.fn(rule.nodes) + self.fn(-rule.nodes)
        return float(rule.weights @ asym**2) < tol

    def validate_derivative(self, rng: np.random.Generator | None = None, tol: float = 1e-6) -> None:
        """Central finite differences at 20 random points, away from kinks."""
        rng = rng or np.random.default_rng(0)
        pts = rng.normal(size=200)
        for kink in self.kink_points:
            pts = pts[np.abs(pts - kink) > 1e-2]
        pts = pts[:20]
        h = 1e-6
        fd = (self.fn(pts + h) - self.fn(pts - h)) / (2 * h)
        if not np.allclose(fd, self.deriv(pts), atol=tol, rtol=tol):
            raise ConfigError(f"derivative of activation '{self.name}' disagrees with finite differences")


@dataclass(frozen=True)
class LinkSpec:
    """Target link g; only pointwise evaluation is needed."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]

    def first_coeff(self, rule: QuadratureRule | None = None) -> float:
        """c1* = E[g(z) z] (= E[g'(z)] for differentiable g)."""
        rule = rule or cached_rule(DEFAULT_INNER_NODES)
        return float(rule.weights @ (self.fn(rule.nodes) * rule.nodes))

    def mean(self, rule: QuadratureRule | None = None) -> float:
        rule = rule or cached_rule(DEFAULT_INNER_NODES)
        return float(rule.weights @ self.fn(rule.nodes))

    def second_moment(self, rule: QuadratureRule | None = None) -> float:
        rule = rule or cached_rule(DEFAULT_INNER_NODES)
        return float(rule.weights @ self.fn(rule.nodes) ** 2)


_SQRT6 = math.sqrt(6.0)

ACTIVATIONS: Dict[str, ActivationSpec] = {}
LINKS: Dict[str, LinkSpec] = {}


def register_activation(spec: ActivationSpec) -> ActivationSpec:
    ACTIVATIONS[spec.name] = spec
    return spec


def register_link(spec: LinkSpec) -> LinkSpec:
    LINKS[spec.name] = spec
    return spec


register_activation(ActivationSpec("relu", lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(float), kink_points=(0.0,)))
register_activation(ActivationSpec("erf", _erf, lambda x: 2.0 / np.sqrt(np.pi) * np.exp(-(x**2))))
register_activation(ActivationSpec("tanh", np.tanh, lambda x: 1.0 / np.cosh(x) ** 2))
register_activation(ActivationSpec("sin", np.sin, np.cos))
register_activation(ActivationSpec("identity", lambda x: x, lambda x: np.ones_like(x)))
register_activation(
    ActivationSpec("hermite2", lambda x: (x**2 - 1.0) / math.sqrt(2.0), lambda x: x * math.sqrt(2.0))
)
register_activation(
    ActivationSpec("hermite3", lambda x: (x**3 - 3.0 * x) / _SQRT6, lambda x: (3.0 * x**2 - 3.0) / _SQRT6)
)

register_link(LinkSpec("tanh", np.tanh))
register_link(LinkSpec("sin", np.sin))
register_link(LinkSpec("sign_smooth", lambda x: np.tanh(5.0 * x)))
register_link(LinkSpec("identity", lambda x: x))


def get_activation(name: str) -> ActivationSpec:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation '{name}'; known: {sorted(ACTIVATIONS)}") from None


def get_link(name: str) -> LinkSpec:
    try:
        return LINKS[name]
    except KeyError:
        raise ConfigError(f"unknown link '{name}'; known: {sorted(LINKS)}") from None


# --------------------------------------------------------------------------- #
# vocabulary and config
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class VocabularySpec:
    """Second-layer vocabulary: k values zeta_q with probabilities pi_q."""

    zeta: tuple
    pi: tuple

    def __post_init__(self):
        zeta = tuple(float(z) for z in self.zeta)
        pi = tuple(float(w) for w in self.pi)
        object.__setattr__(self, "zeta", zeta)
        object.__setattr__(self, "pi", pi)
        if len(zeta) != len(pi) or len(zeta) == 0:
            raise ConfigError("vocabulary needs matching, non-empty zeta and pi lists")
        if any(w <= 0 for w in pi) or abs(sum(pi) - 1.0) > 1e-12:
            raise ConfigError(f"vocabulary probabilities must be positive and sum to 1, got {pi}")
        if len(set(zeta)) != len(zeta):
            raise ConfigError(f"vocabulary values must be pairwise distinct, got {zeta}")

    @property
    def k(self) -> int:
        return len(self.zeta)

    def as_arrays(self):
        return np.asarray(self.zeta, dtype=float), np.asarray(self.pi, dtype=float)


def default_n0(d: int) -> int:
    # the asymptotics need n0 = Omega(d^{1+eps}); exponent 1.2 keeps desk-scale cost sane
    return int(math.ceil(d**1.2))


_CONFIG_KEYS = {"d", "p", "n", "n0", "eta_tilde", "lambda", "seed", "activation", "link", "vocab"}
_VOCAB_KEYS = {"zeta", "pi"}


@dataclass(frozen=True)
class ExperimentConfig:
    """All scalar hyperparameters of one run; alpha and beta are derived, never stored."""

    d: int
    p: int
    n: int
    eta_tilde: float
    lam: float
    seed: int
    activation: str
    link: str
    vocab: VocabularySpec
    n0: int | None = None

    def __post_init__(self):
        for name in ("d", "p", "n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n0 is None:
            object.__setattr__(self, "n0", default_n0(self.d))
        if self.n0 < 1:
            raise ConfigError(f"n0 must be >= 1, got {self.n0}")
        get_activation(self.activation)
        get_link(self.link)

    @property
    def alpha(self) -> float:
        return self.n / self.d

    @property
    def beta(self) -> float:
        return self.p / self.d

    @property
    def eta(self) -> float:
        return self.eta_tilde * self.d

    def activation_spec(self) -> ActivationSpec:
        return get_activation(self.activation)

    def link_spec(self) -> LinkSpec:
        return get_link(self.link)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "p": self.p,
            "n": self.n,
            "n0": self.n0,
            "eta_tilde": self.eta_tilde,
            "lambda": self.lam,
            "seed": self.seed,
            "activation": self.activation,
            "link": self.link,
            "vocab": {"zeta": list(self.vocab.zeta), "pi": list(self.vocab.pi)},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = _CONFIG_KEYS - {"n0"} - set(data)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        vocab_raw = data["vocab"]
        unknown_v = set(vocab_raw) - _VOCAB_KEYS
        if unknown_v:
            raise ConfigError(f"unknown vocab keys: {sorted(unknown_v)}")
        vocab = VocabularySpec(zeta=tuple(vocab_raw["zeta"]), pi=tuple(vocab_raw["pi"]))
        return cls(
            d=int(data["d"]),
            p=int(data["p"]),
            n=int(data["n"]),
            n0=int(data["n0"]) if "n0" in data else None,
            eta_tilde=float(data["eta_tilde"]),
            lam=float(data["lambda"]),
            seed=int(data["seed"]),
            activation=str(data["activation"]),
            link=str(data["link"]),
            vocab=vocab,
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **kwargs) -> "ExperimentConfig":
        data = self.to_dict()
        vocab = kwargs.pop("vocab", None)
        lam = kwargs.pop("lam", None)
        if lam is not None:
            data["lambda"] = lam
        data.update(kwargs)
        cfg = ExperimentConfig.from_dict(data)
        if vocab is not None:
            cfg = ExperimentConfig.from_dict({**data, "vocab": {"zeta": list(vocab.zeta), "pi": list(vocab.pi)}})
        return cfg


# --------------------------------------------------------------------------- #
# validation
# --------------------------------------------------------------------------- #


@dataclass
class ValidationReport:
    errors: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.errors


def validate_config(config: ExperimentConfig, for_theory: bool = True) -> ValidationReport:
    """Check the working assumptions; soft violations become warnings.

    Hard failures: pi not a distribution (already rejected by VocabularySpec),
    lambda <= 0 when the theory engine will be evaluated at z = -lambda.
    """
    report = ValidationReport()
    sigma = config.activation_spec()
    link = config.link_spec()

    if for_theory and config.lam <= 0:
        report.errors.append(f"lambda must be > 0 for theory evaluation, got {config.lam}")

    try:
        sigma.validate_derivative()
    except ConfigError as exc:
        report.errors.append(str(exc))

    if not sigma.is_odd():
        report.warnings.append(f"activation '{sigma.name}' is not odd (assumption violated; results are empirical)")
    if abs(sigma.mean()) > 1e-8:
        report.warnings.append(f"activation '{sigma.name}' has E[sigma] = {sigma.mean():.3g} != 0")
    if abs(link.mean()) > 1e-8:
        report.warnings.append(f"link '{link.name}' has E[g] = {link.mean():.3g} != 0")
    if abs(link.first_coeff()) < 1e-8:
        report.warnings.append(f"link '{link.name}' has E[g'] = 0; the rank-one spike vanishes")
    if config.n0 < config.d**1.05:
        report.warnings.append(f"n0 = {config.n0} grows slower than d^(1+eps); spike approximation may be loose")
    return report


def check_nondegeneracy(
    vocab: VocabularySpec | Sequence[float],
    activation: ActivationSpec,
    m: int | None = None,
    sv_threshold: float = 1e-8,
) -> bool:
    """True iff the functions kappa -> c1(kappa, zeta_q) span R^k over the kappa grid.

    Sampled on m quadrature nodes; rank via the singular-value ratio.
    """
    zetas = np.asarray(vocab.zeta if isinstance(vocab, VocabularySpec) else vocab, dtype=float)
    k = len(zetas)
    m = m or max(DEFAULT_INNER_NODES, 4 * k)
    if m < k:
        raise ConfigError(f"need at least k={k} sample points, got {m}")
    kappas = cached_rule(m).nodes
    mat = np.empty((m, k))
    for q, z in enumerate(zetas):
        mat[:, q] = shifted_coeffs(activation.fn, kappas * z, 1)[:, 1]
    sv = np.linalg.svd(mat, compute_uv=False)
    return bool(sv[-1] > sv_threshold * sv[0])


# --------------------------------------------------------------------------- #
# second-layer sampling
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SecondLayer:
    """Second layer at init, neurons stably reordered so groups are contiguous.

    a0 carries the 1/sqrt(p) scaling; `groups[j]` is the vocabulary index of
    neuron j; group_sizes[q] = #{j : groups[j] = q}.
    """

    a0: np.ndarray
    groups: np.ndarray
    group_sizes: np.ndarray


def sample_second_layer(p: int, vocab: VocabularySpec, rng: np.random.Generator) -> SecondLayer:
    zeta, pi = vocab.as_arrays()
    raw = rng.choice(len(zeta), size=p, p=pi)
    order = np.argsort(raw, kind="stable")
    groups = raw[order]
    a0 = zeta[groups] / np.sqrt(p)
    sizes = np.bincount(groups, minlength=len(zeta))
    if np.any(sizes == 0):
        missing = [q for q, s in enumerate(sizes) if s == 0]
        raise ConfigError(f"vocabulary entries {missing} drew zero neurons at p={p}; increase p")
    return SecondLayer(a0=a0, groups=groups, group_sizes=sizes)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; (seed, stream) fully determines the draw."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))
