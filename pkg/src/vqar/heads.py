"""Parametric emission heads: projection, likelihood, sampling and rescaling.

Supported families and their parameters (positivity always via softplus):

* ``gaussian``      mu, sigma
* ``student_t``     df = 2 + softplus(.), loc, scale
* ``neg_binomial``  mean mu, shape alpha (count r = 1/alpha)
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError

FAMILIES = ("gaussian", "student_t", "neg_binomial")
ARITY = {"gaussian": 2, "student_t": 3, "neg_binomial": 2}
PARAM_NAMES = {
    "gaussian": ("mu", "sigma"),
    "student_t": ("df", "loc", "scale"),
    "neg_binomial": ("mu", "alpha"),
}
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def check_family(family: str) -> str:
    if family not in FAMILIES:
        raise ConfigError(f"unknown head family {family!r}; choose one of {', '.join(FAMILIES)}")
    return family


@dataclass
class DistributionParams:
    family: str
    params: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_values(cls, family: str, **values) -> "DistributionParams":
        check_family(family)
        return cls(family, {k: ag.as_tensor(values[k]) for k in PARAM_NAMES[family]})


class HeadProjection:
    """Linear map from the decoder state to raw distribution pre-activations."""

    def __init__(self, family: str, hidden_size: int, rng: np.random.Generator | None = None):
        self.family = check_family(family)
        self.hidden_size = hidden_size
        rng = rng if rng is not None else np.random.default_rng(0)
        k = ARITY[family]
        bound = 1.0 / math.sqrt(hidden_size)
        self.weight = Tensor(rng.uniform(-bound, bound, (hidden_size, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(k), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight.data, f"{prefix}.bias": self.bias.data}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str) -> None:
        self.weight.data = np.array(state[f"{prefix}.weight"], dtype=np.float64)
        self.bias.data = np.array(state[f"{prefix}.bias"], dtype=np.float64)

    def __call__(self, h_dec) -> DistributionParams:
        return project(self, h_dec)


def project(head: HeadProjection, h_dec) -> DistributionParams:
    h_dec = ag.as_tensor(h_dec)
    if h_dec.shape[-1] != head.hidden_size:
        raise ContractError(f"head expects hidden size {head.hidden_size}, got shape {h_dec.shape}")
    raw = ag.matmul(h_dec, head.weight) + head.bias
    lead = (slice(None),) * (raw.ndim - 1)
    col = [raw[lead + (i,)] for i in range(ARITY[head.family])]
    if head.family == "gaussian":
        params = {"mu": col[0], "sigma": ag.softplus(col[1])}
    elif head.family == "student_t":
        params = {"df": 2.0 + ag.softplus(col[0]), "loc": col[1], "scale": ag.softplus(col[2])}
    else:
        params = {"mu": ag.softplus(col[0]), "alpha": ag.softplus(col[1])}
    return DistributionParams(head.family, params)


def nll(p: DistributionParams, x) -> Tensor:
    """Elementwise negative log-density (continuous) or log-mass (counts)."""
    x = ag.as_tensor(x).data
    if p.family == "gaussian":
        mu, sigma = p["mu"], p["sigma"]
        z = (x - mu) / sigma
        return HALF_LOG_2PI + ag.log(sigma) + 0.5 * ag.square(z)
    if p.family == "student_t":
        df, loc, scale = p["df"], p["loc"], p["scale"]
        z = (x - loc) / scale
        half = 0.5 * (df + 1.0)
        return (ag.lgamma(0.5 * df) - ag.lgamma(half) + 0.5 * ag.log(math.pi * df)
                + ag.log(scale) + half * ag.log(1.0 + ag.square(z) / df))
    if p.family == "neg_binomial":
        if (x < 0).any() or (np.round(x) != x).any():
            raise ContractError("negative binomial likelihood needs non-negative integer observations")
        mu, alpha = p["mu"], p["alpha"]
        r = 1.0 / alpha
        log_r_mu = ag.log(r + mu)
        return (ag.lgamma(r) - ag.lgamma(x + r) + special.gammaln(x + 1.0)
                - r * (ag.log(r) - log_r_mu) - x * (ag.log(mu) - log_r_mu))
    raise ConfigError(f"unknown family {p.family!r}")


def _rngs(rng, n: int) -> list[np.random.Generator] | None:
    if isinstance(rng, np.random.Generator):
        return None
    rngs = list(rng)
    if len(rngs) != n:
        raise ContractError(f"need one generator per element: {n} elements, {len(rngs)} generators")
    return rngs


def sample(p: DistributionParams, rng: np.random.Generator | Sequence[np.random.Generator]) -> np.ndarray:
    """Draw one value per element.  ``rng`` may be a list holding one stream per element."""
    vals = p.values()
    shape = next(iter(vals.values())).shape
    n = int(np.prod(shape)) if shape else 1
    streams = _rngs(rng, n)

    def draw(fn):
        if streams is None:
            return np.asarray(fn(rng, shape if shape else None), dtype=np.float64).reshape(shape)
        return np.array([fn(g, None) for g in streams], dtype=np.float64).reshape(shape)

    if p.family == "gaussian":
        return vals["mu"] + vals["sigma"] * draw(lambda g, s: g.standard_normal(s))
    if p.family == "student_t":
        df = vals["df"].reshape(-1)
        if streams is None:
            t = rng.standard_t(vals["df"])
        else:
            t = np.array([g.standard_t(d) for g, d in zip(streams, df)]).reshape(shape)
        return vals["loc"] + vals["scale"] * t
    mu = vals["mu"].reshape(-1)
    r = 1.0 / vals["alpha"].reshape(-1)
    if streams is None:
        lam = rng.gamma(r, mu / r)
        out = rng.poisson(lam)
    else:
        out = np.array([g.poisson(g.gamma(ri, mi / ri)) for g, ri, mi in zip(streams, r, mu)])
    return np.asarray(out, dtype=np.float64).reshape(shape)


def rescale(p: DistributionParams, nu) -> DistributionParams:
    """Map a distribution over scaled values to one over raw values (x_raw = nu * x)."""
    nu_arr = np.asarray(nu, dtype=np.float64)
    if (nu_arr <= 0).any():
        raise ContractError("scale nu must be strictly positive")
    q = p.params
    if p.family == "gaussian":
        out = {"mu": q["mu"] * nu_arr, "sigma": q["sigma"] * nu_arr}
    elif p.family == "student_t":
        out = {"df": q["df"], "loc": q["loc"] * nu_arr, "scale": q["scale"] * nu_arr}
    else:
        out = {"mu": q["mu"] * nu_arr, "alpha": q["alpha"]}
    return DistributionParams(p.family, out)


def mean(p: DistributionParams) -> np.ndarray:
    v = p.values()
    return v["loc"] if p.family == "student_t" else v["mu"]
