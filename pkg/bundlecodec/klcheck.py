"""
KL divergence between a zero-mean Gaussian prior and a Gumbel noise law.

    p(x) = exp(-x^2 / 2 sigma^2) / sqrt(2 pi sigma^2)
    q(x) = exp(-x/beta - exp(-x/beta)) / beta

KL(p || q) = -1/2 ln(2 pi sigma^2) + ln beta - 1/2 + exp(sigma^2 / 2 beta^2),
a constant in (sigma, beta) that no latent sample enters. The numeric
routines below check that value independently.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import integrate

from .diffnum import Rng
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

HALF_WIDTH = 12.0


@dataclass(frozen=True)
class KlParams:
    sigma: float
    beta: float

    def __post_init__(self):
        if not (self.sigma > 0 and self.beta > 0):
            raise ConfigError(
                f"sigma and beta must be positive, got sigma={self.sigma}, beta={self.beta}",
                module='klcheck',
            )


def log_gaussian(x, sigma: float):
    return -0.5 * np.log(2.0 * np.pi * sigma * sigma) - x * x / (2.0 * sigma * sigma)


def log_gumbel(x, beta: float):
    return -np.log(beta) - x / beta - np.exp(-x / beta)


def kl_closed_form(params: KlParams) -> float:
    sigma, beta = params.sigma, params.beta
    return float(-0.5 * np.log(2.0 * np.pi * sigma * sigma) + np.log(beta) - 0.5
                 + np.exp(sigma * sigma / (2.0 * beta * beta)))


def _quad(integrand, params: KlParams) -> float:
    width = HALF_WIDTH * params.sigma
    # break points at the Gaussian mode and at the mode of p(x) exp(-x/beta)
    breaks = sorted({0.0, -params.sigma ** 2 / params.beta})
    value, abserr = integrate.quad(integrand, -width, width, points=breaks,
                                   epsabs=1e-13, epsrel=1e-13, limit=400)
    logger.debug(f"quadrature {value!r} (estimated error {abserr:.2e})")
    return float(value)


def kl_quadrature(params: KlParams) -> float:
    def integrand(x):
        return np.exp(log_gaussian(x, params.sigma)) * (
            log_gaussian(x, params.sigma) - log_gumbel(x, params.beta))

    return _quad(integrand, params)


def kl_monte_carlo(params: KlParams, n: int = 10 ** 6, rng: Optional[Rng] = None) -> Tuple[float, float]:
    """Sample mean of ln p - ln q under p, and its standard error"""
    if n < 1000:
        raise ConfigError(f"Monte Carlo needs n >= 1000, got {n}", module='klcheck')
    x = (rng or Rng(0)).normal(n, scale=params.sigma)
    values = log_gaussian(x, params.sigma) - log_gumbel(x, params.beta)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(n))


def kl_numeric(params: KlParams, method: str = 'quadrature', n: int = 10 ** 6, seed: int = 0) -> float:
    if method == 'quadrature':
        return kl_quadrature(params)
    if method == 'monte_carlo':
        return kl_monte_carlo(params, n, Rng(seed))[0]
    raise ConfigError(f"unknown KL method {method!r}", module='klcheck')


def gaussian_exp_moment(params: KlParams) -> float:
    """E_p[exp(-x / beta)] by quadrature; equals exp(sigma^2 / 2 beta^2)"""
    return _quad(lambda x: np.exp(log_gaussian(x, params.sigma) - x / params.beta), params)


def kl_grid(sigmas: Optional[Sequence[float]] = None, betas: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """Closed form against quadrature over a (sigma, beta) grid"""
    sigmas = np.linspace(0.5, 4.0, 10) if sigmas is None else sigmas
    betas = np.linspace(1.0, 20.0, 10) if betas is None else betas
    rows = []
    for sigma in sigmas:
        for beta in betas:
            params = KlParams(float(sigma), float(beta))
            closed = kl_closed_form(params)
            quad = kl_quadrature(params)
            rows.append({'sigma': params.sigma, 'beta': params.beta, 'closed_form': closed,
                         'quadrature': quad, 'abs_diff': abs(closed - quad)})
    return pd.DataFrame(rows)
