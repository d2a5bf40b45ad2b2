'''
Generalized extreme value kernels and the covariate links that map regression
coefficients to per-block GEV parameters.

All kernels are vectorized over z and the parameters. The shape parameter
follows the climatological sign convention: xi < 0 has a bounded upper tail.
'''

from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import DataError, NumericError

FAMILIES = ('mu', 'sigma', 'xi')
INTERCEPT = 'intercept'

# below this |xi| the kernels switch to the Gumbel series form
GUMBEL_TOL = 1e-8
_TINY = np.finfo(float).tiny


class InvalidParameterError(NumericError):
    ''' Signifies a non-positive or non-finite GEV scale, or non-finite parameters. '''


class UnknownGroupError(DataError):
    ''' Signifies a block whose group id is not part of the fitted model. '''


class MissingCovariateError(DataError):
    ''' Signifies a block lacking a covariate the coefficients refer to. '''


@dataclass(frozen=True)
class GevParams():
    mu: float
    sigma: float
    xi: float

    def __post_init__(self):
        _check_params(self.mu, self.sigma, self.xi)


@dataclass(frozen=True)
class CoefficientSet():
    '''
    Regression coefficients of the three GEV links. Fixed coefficients are keyed
    by covariate name ("intercept" for the constant); group-varying ones hold one
    value per group, aligned with `groups`. The sigma family is on the log scale.
    '''

    groups: Tuple[str, ...]
    mu: Dict[str, float] = field(default_factory=dict)
    sigma: Dict[str, float] = field(default_factory=dict)
    xi: Dict[str, float] = field(default_factory=dict)
    mu_random: Dict[str, np.ndarray] = field(default_factory=dict)
    sigma_random: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'groups', tuple(str(g) for g in self.groups))
        for family in FAMILIES:
            values = np.array(list(self.fixed(family).values()), dtype=float)
            if not np.all(np.isfinite(values)):
                raise InvalidParameterError(f"non-finite fixed {family} coefficient")

        for family in ('mu', 'sigma'):
            table = {name: np.asarray(values, dtype=float) for name, values in self.random(family).items()}
            for name, values in table.items():
                if values.shape != (len(self.groups),):
                    raise InvalidParameterError(
                        f"{family} random coefficient {name} needs one value per group", values.shape)
                if not np.all(np.isfinite(values)):
                    raise InvalidParameterError(f"non-finite {family} random coefficient {name}")
            object.__setattr__(self, f"{family}_random", table)

    @property
    def group_count(self) -> int:
        return len(self.groups)

    def fixed(self, family: str) -> Dict[str, float]:
        return getattr(self, family)

    def random(self, family: str) -> Dict[str, np.ndarray]:
        if family == 'xi':
            return {}
        return getattr(self, f"{family}_random")

    def group_index(self, group) -> int:
        try:
            return self.groups.index(str(group))
        except ValueError:
            raise UnknownGroupError(f"group {group!r} is not one of the {len(self.groups)} model groups")


#####################################
# KERNELS                           #
#####################################


def _check_params(mu, sigma, xi) -> None:
    mu, sigma, xi = (np.asarray(a, dtype=float) for a in (mu, sigma, xi))
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(xi)) and np.all(np.isfinite(sigma))):
        raise InvalidParameterError("GEV parameters must be finite")
    if not np.all(sigma > 0):
        raise InvalidParameterError("GEV scale must be positive")


def _reduced(z, mu, sigma, xi):
    '''
    Reduced variate y = log(1 + xi t) / xi with t = (z - mu) / sigma, so that
    the CDF is exp(-exp(-y)), plus the in-support mask and t.
    '''

    z, mu, sigma, xi = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (z, mu, sigma, xi)))
    t = (z - mu) / sigma
    gumbel = xi == 0.0
    with np.errstate(invalid='ignore'):
        xt = np.where(gumbel, 0.0, xi * t)
    # third-order series near the Gumbel limit, finite moderate t only
    series = (np.abs(xi) < GUMBEL_TOL) & np.isfinite(t) & (np.abs(xt) < 1e-4)

    with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
        general = np.log1p(xt) / np.where(gumbel, 1.0, xi)
        expansion = t * (1.0 - 0.5 * xt + xt * xt / 3.0)
    y = np.where(series, expansion, np.where(gumbel, t, general))
    valid = np.where(gumbel, ~np.isnan(t), (1.0 + xt) > 0.0)
    return y, valid, sigma, xi, t


def _logpdf(z, mu, sigma, xi) -> np.ndarray:
    y, valid, sigma, xi, _ = _reduced(z, mu, sigma, xi)
    with np.errstate(over='ignore', invalid='ignore'):
        out = -np.log(sigma) - (1.0 + xi) * y - np.exp(-y)
    # inf - inf at the lower tail is a zero density
    return np.where(valid & ~np.isnan(out), out, -np.inf)


def _cdf(z, mu, sigma, xi) -> np.ndarray:
    y, valid, sigma, xi, t = _reduced(z, mu, sigma, xi)
    with np.errstate(over='ignore', invalid='ignore'):
        inside = np.exp(-np.exp(-y))
    # outside the support: below the lower end (t < 0) or above the upper end
    return np.where(valid, inside, np.where(t < 0, 0.0, 1.0))


def _ppf(u, mu, sigma, xi) -> np.ndarray:
    u, mu, sigma, xi = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (u, mu, sigma, xi)))
    log_log = np.log(-np.log(u))
    small = np.abs(xi) < GUMBEL_TOL
    general = np.expm1(-xi * log_log) / np.where(small, 1.0, xi)
    reduced = np.where(small, -log_log + 0.5 * xi * log_log * log_log, general)
    return mu + sigma * reduced


def _unpack(p: GevParams):
    return p.mu, p.sigma, p.xi


def gev_logpdf(z, p: GevParams):
    '''
    Log-density of the GEV distribution. Out-of-support values yield -inf.

    :param z: Value(s) to evaluate.
    :param p: Location, scale and shape.
    '''

    out = _logpdf(z, *_unpack(p))
    return out if out.ndim else float(out)


def gev_cdf(z, p: GevParams):
    '''
    Cumulative distribution function exp(-(1 + xi (z - mu) / sigma) ** (-1 / xi)),
    clamped to 0 below the lower endpoint (xi > 0) and 1 above the upper
    endpoint (xi < 0).

    :param z: Value(s) to evaluate.
    :param p: Location, scale and shape.
    '''

    out = _cdf(z, *_unpack(p))
    return out if out.ndim else float(out)


def gev_logpdf_values(z, mu, sigma, xi) -> np.ndarray:
    '''
    Array form of gev_logpdf taking the parameters as arrays, without
    parameter validation. Used by the samplers, where a non-positive scale
    simply yields -inf.
    '''

    with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
        out = _logpdf(z, mu, sigma, xi)
    return np.where(np.asarray(sigma) > 0, out, -np.inf)


def gev_cdf_values(z, mu, sigma, xi) -> np.ndarray:
    ''' Array form of gev_cdf without parameter validation. '''

    return _cdf(z, mu, sigma, xi)


def gumbel_cdf(z, mu, sigma):
    '''
    Gumbel CDF exp(-exp(-(z - mu) / sigma)), the xi = 0 member of the family.

    :param z: Value(s) to evaluate.
    :param mu: Location.
    :param sigma: Scale (> 0).
    '''

    _check_params(mu, sigma, 0.0)
    out = np.exp(-np.exp(-(np.asarray(z, dtype=float) - mu) / sigma))
    return out if out.ndim else float(out)


def gev_ppf(u, p: GevParams):
    '''
    Quantile function mu + sigma ((-log u) ** (-xi) - 1) / xi.

    :param u: Probabilities in (0, 1).
    :param p: Location, scale and shape.
    '''

    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise InvalidParameterError("quantile probabilities must lie in (0, 1)")
    out = _ppf(u, *_unpack(p))
    return out if out.ndim else float(out)


def gev_ppf_values(u, mu, sigma, xi) -> np.ndarray:
    ''' Array form of gev_ppf without parameter validation. '''

    return _ppf(u, mu, sigma, xi)


def gev_sample(p: GevParams, n: int, seed) -> np.ndarray:
    '''
    Draw n values by inverse-CDF sampling. The same seed always yields the same
    draws.

    :param p: Location, scale and shape.
    :param n: Number of draws.
    :param seed: Seed, SeedSequence or Generator for numpy's default_rng.
    '''

    rng = np.random.default_rng(seed)
    u = np.clip(rng.random(int(n)), _TINY, 1.0 - np.finfo(float).eps)
    return _ppf(u, *_unpack(p))


#####################################
# COVARIATE LINKS                   #
#####################################


def _covariate(record, name: str) -> float:
    if name == INTERCEPT:
        return 1.0
    try:
        return float(record.covariates[name])
    except KeyError:
        raise MissingCovariateError(f"block has no covariate {name!r}")


def link_params(coeffs: CoefficientSet, record) -> GevParams:
    '''
    Per-block GEV parameters from the linear predictors
    mu = sum(beta x) + sum(gamma_k w), sigma = exp(same form on the log scale),
    xi = sum(beta x).

    :param coeffs: The regression coefficients.
    :param record: A block record with `group` and a `covariates` mapping.
    '''

    k = coeffs.group_index(record.group)
    linear = {}
    for family in FAMILIES:
        eta = sum(beta * _covariate(record, name) for name, beta in coeffs.fixed(family).items())
        eta += sum(gamma[k] * _covariate(record, name) for name, gamma in coeffs.random(family).items())
        linear[family] = float(eta)
    return GevParams(linear['mu'], float(np.exp(linear['sigma'])), linear['xi'])


def link_arrays(coeffs: CoefficientSet, covariates: Mapping[str, np.ndarray],
                group_index: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    '''
    Batch form of link_params over n blocks.

    :param coeffs: The regression coefficients.
    :param covariates: Covariate columns of length n keyed by name.
    :param group_index: 0-based group index per block.
    '''

    group_index = np.asarray(group_index, dtype=int)
    n = len(group_index)
    if n and (group_index.min() < 0 or group_index.max() >= coeffs.group_count):
        raise UnknownGroupError("group index outside the model's groups")

    def column(name):
        if name == INTERCEPT:
            return np.ones(n)
        if name not in covariates:
            raise MissingCovariateError(f"blocks have no covariate {name!r}")
        return np.asarray(covariates[name], dtype=float)

    linear = {}
    for family in FAMILIES:
        eta = np.zeros(n)
        for name, beta in coeffs.fixed(family).items():
            eta += beta * column(name)
        for name, gamma in coeffs.random(family).items():
            eta += gamma[group_index] * column(name)
        linear[family] = eta
    return linear['mu'], np.exp(linear['sigma']), linear['xi']
