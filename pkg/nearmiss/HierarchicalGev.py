'''
Hierarchical Bayesian GEV regression for block maxima.

The data layer is a GEV likelihood whose location, log-scale and shape are
linear in block covariates. Under the grouped-random-parameter variant
(HBSGRP) selected coefficients vary by spatial group: every group coefficient
is drawn from a normal population with its own mean and variance tau2. The
fixed-parameter variant (HBSFP) has no group-varying terms. Coefficients and
population means carry normal priors and every tau2 an inverse-gamma prior.

Posteriors are sampled with blocked adaptive random-walk Metropolis. Each
block proposes a multivariate normal step; during burn-in the step size is
tuned toward the target acceptance band and, for multi-parameter blocks, the
proposal shape follows the empirical covariance of the chain. After burn-in
the proposals are frozen.
'''

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import gammaln, logsumexp

from .errors import ConfigError, NumericError
from .gev import FAMILIES, INTERCEPT, CoefficientSet, gev_logpdf_values
from .logger import Logger
from .utils import read_csv, write_csv

logger = Logger("nearmiss.hbsgrp")

HBSFP, HBSGRP = 'HBSFP', 'HBSGRP'
VARIANTS = (HBSFP, HBSGRP)
MIN_KEPT_DRAWS = 1000
_LOG_2PI = np.log(2.0 * np.pi)


class ModelSpecError(ConfigError):
    ''' Signifies an inconsistent model specification or MCMC setting. '''


class InitializationError(NumericError):
    ''' Signifies a non-finite log-posterior at the starting values. '''


class InsufficientChainsError(NumericError):
    ''' Signifies a convergence diagnostic requested for fewer than two chains. '''


@dataclass(frozen=True)
class ModelSpec():
    '''
    Covariates per GEV parameter. The location, log-scale and shape always
    carry a fixed intercept unless "intercept" is listed as group-varying.
    Group-varying lists must be empty under HBSFP and not all empty under
    HBSGRP. An empty `groups` takes the sorted group ids of the records.
    '''

    variant: str = HBSGRP
    mu_fixed: Tuple[str, ...] = ()
    sigma_fixed: Tuple[str, ...] = ()
    xi_fixed: Tuple[str, ...] = ()
    mu_random: Tuple[str, ...] = ()
    sigma_random: Tuple[str, ...] = ()
    groups: Tuple[str, ...] = ()

    def __post_init__(self):
        for name in ('mu_fixed', 'sigma_fixed', 'xi_fixed', 'mu_random', 'sigma_random', 'groups'):
            object.__setattr__(self, name, tuple(str(v) for v in getattr(self, name)))

        if self.variant not in VARIANTS:
            raise ModelSpecError(f"variant must be one of {VARIANTS}", self.variant)
        has_random = bool(self.mu_random or self.sigma_random)
        if self.variant == HBSFP and has_random:
            raise ModelSpecError("HBSFP models cannot have group-varying coefficients")
        if self.variant == HBSGRP and not has_random:
            raise ModelSpecError("HBSGRP models need at least one group-varying coefficient")

        for family in ('mu', 'sigma'):
            both = set(self.fixed(family)) & set(self.random(family))
            if both:
                raise ModelSpecError(f"{family} covariates listed as both fixed and random: {sorted(both)}")
        for family in FAMILIES:
            names = self.fixed(family) + self.random(family)
            if len(set(names)) != len(names):
                raise ModelSpecError(f"duplicate {family} covariates", names)

    def fixed(self, family: str) -> Tuple[str, ...]:
        return tuple(c for c in getattr(self, f"{family}_fixed") if c != INTERCEPT)

    def random(self, family: str) -> Tuple[str, ...]:
        return () if family == 'xi' else getattr(self, f"{family}_random")

    def covariates(self) -> List[str]:
        names = []
        for family in FAMILIES:
            names.extend(self.fixed(family) + self.random(family))
        return sorted(set(names) - {INTERCEPT})


@dataclass(frozen=True)
class PriorConfig():
    coef_mean: float = 0.0
    coef_sd: float = 10.0
    tau2_shape: float = 0.01
    tau2_rate: float = 0.01
    xi_lower: float = -1.0
    xi_upper: float = 0.5

    def __post_init__(self):
        if not self.coef_sd > 0:
            raise ModelSpecError("prior sd must be positive", self.coef_sd)
        if not (self.tau2_shape > 0 and self.tau2_rate > 0):
            raise ModelSpecError("inverse-gamma prior parameters must be positive",
                                 self.tau2_shape, self.tau2_rate)
        if not self.xi_lower < self.xi_upper:
            raise ModelSpecError("shape bounds must satisfy xi_lower < xi_upper")


@dataclass(frozen=True)
class MCMCConfig():
    chains: int = 2
    iterations: int = 50000
    burn_in: int = 20000
    thin: int = 1
    adapt_interval: int = 100
    accept_low: float = 0.20
    accept_high: float = 0.40
    initial_scale: float = 0.1

    def __post_init__(self):
        if int(self.chains) < 1:
            raise ModelSpecError("at least one chain is required", self.chains)
        if not 0 <= int(self.burn_in) < int(self.iterations):
            raise ModelSpecError("burn-in must be shorter than the run", self.burn_in, self.iterations)
        if int(self.thin) < 1 or int(self.adapt_interval) < 1:
            raise ModelSpecError("thin and adapt_interval must be positive")
        if self.kept < MIN_KEPT_DRAWS:
            raise ModelSpecError(f"each chain must keep at least {MIN_KEPT_DRAWS} post-burn-in draws",
                                 self.kept)
        if not 0 < self.accept_low < self.accept_high < 1:
            raise ModelSpecError("acceptance band must satisfy 0 < low < high < 1")
        if not self.initial_scale > 0:
            raise ModelSpecError("initial proposal scale must be positive")

    @property
    def kept(self) -> int:
        return -(-(int(self.iterations) - int(self.burn_in)) // int(self.thin))


@dataclass
class PosteriorChain():
    '''
    Post-burn-in draws of shape (chains, draws, parameters) on the sampling
    scale (variances as log_tau2), plus run metadata.
    '''

    draws: np.ndarray
    names: List[str]
    burn_in: int
    thin: int
    seed: int
    acceptance: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ModelSpecError("parameter names must be unique")
        if self.draws.ndim != 3 or self.draws.shape[2] != len(self.names):
            raise ModelSpecError("draws must have shape (chains, draws, parameters)", self.draws.shape)

    @property
    def chains(self) -> int:
        return self.draws.shape[0]

    def pooled(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[2])

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.names.index(name)]


@dataclass
class FitMetrics():
    dic: float
    p_dic: float
    waic: float
    p_waic: float
    looic: float
    p_loo: float
    loglik: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {'DIC': self.dic, 'pD': self.p_dic, 'WAIC': self.waic, 'p_WAIC': self.p_waic,
                'LOOIC': self.looic, 'p_LOO': self.p_loo}


#####################################
# MODEL                             #
#####################################


@dataclass(frozen=True)
class _RandomTerm():
    covariate: str
    group_idx: np.ndarray  # parameter index per group
    mean_idx: int
    log_tau2_idx: int


@dataclass(frozen=True)
class Block():
    ''' Parameters updated jointly and the data rows their likelihood touches (None: all). '''

    name: str
    indices: np.ndarray
    rows: Optional[np.ndarray] = None


def _normal_logpdf(x, mean, sd):
    return -0.5 * _LOG_2PI - np.log(sd) - 0.5 * ((x - mean) / sd) ** 2


def _inv_gamma_logpdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) - (shape + 1.0) * np.log(x) - rate / x


class HierarchicalGevModel():
    '''
    Log-posterior of the GEV regression for one set of block records.

    Parameters live in one flat vector with names like "mu.intercept",
    "sigma.rel_speed", "mu.rel_speed[G3]", "mu.rel_speed.mean" and
    "mu.rel_speed.log_tau2".
    '''

    def __init__(self, records: Sequence, spec: ModelSpec, priors: PriorConfig = PriorConfig()):
        '''
        Create a new model.

        :param records: Block records (group, z and covariates).
        :param spec: Covariate layout and variant.
        :param priors: Prior settings.
        '''

        self.spec = spec
        self.priors = priors
        self.groups = spec.groups or tuple(sorted({str(r.group) for r in records}))
        if spec.variant == HBSGRP and not self.groups:
            raise ModelSpecError("HBSGRP models need at least one group")

        missing = sorted({c for r in records for c in spec.covariates() if c not in r.covariates})
        if missing:
            raise ModelSpecError(f"covariates missing from block records: {missing}")

        group_pos = {g: k for k, g in enumerate(self.groups)}
        unknown = sorted({str(r.group) for r in records} - set(group_pos))
        if unknown:
            raise ModelSpecError(f"records belong to groups outside the model: {unknown}")

        self.z = np.array([r.z for r in records], dtype=float)
        self.group_index = np.array([group_pos.get(str(r.group), 0) for r in records], dtype=int)
        self.group_rows = [np.flatnonzero(self.group_index == k) for k in range(len(self.groups))]

        def column(name):
            if name == INTERCEPT:
                return np.ones(len(records))
            return np.array([r.covariates[name] for r in records], dtype=float)

        self.names: List[str] = []
        self._fixed: Dict[str, np.ndarray] = {}
        self._design: Dict[str, np.ndarray] = {}
        self._random: Dict[str, List[_RandomTerm]] = {}
        self._random_columns: Dict[str, List[np.ndarray]] = {}

        for family in FAMILIES:
            random = spec.random(family)
            fixed = ([] if INTERCEPT in random else [INTERCEPT]) + list(spec.fixed(family))
            self._fixed[family] = np.array([self._add(f"{family}.{c}") for c in fixed], dtype=int)
            self._design[family] = np.column_stack([column(c) for c in fixed]) if fixed \
                else np.zeros((len(records), 0))

            terms, columns = [], []
            for c in random:
                group_idx = np.array([self._add(f"{family}.{c}[{g}]") for g in self.groups], dtype=int)
                terms.append(_RandomTerm(c, group_idx, self._add(f"{family}.{c}.mean"),
                                         self._add(f"{family}.{c}.log_tau2")))
                columns.append(column(c))
            self._random[family] = terms
            self._random_columns[family] = columns

        self._fixed_names = {family: [self.names[i].split('.', 1)[1] for i in self._fixed[family]]
                             for family in FAMILIES}
        self._xi_intercept = self.names.index('xi.intercept')

    def _add(self, name: str) -> int:
        self.names.append(name)
        return len(self.names) - 1

    @property
    def dimension(self) -> int:
        return len(self.names)

    def _linear(self, theta: np.ndarray, family: str, rows: Optional[np.ndarray]) -> np.ndarray:
        design = self._design[family] if rows is None else self._design[family][rows]
        eta = design @ theta[self._fixed[family]]
        groups = self.group_index if rows is None else self.group_index[rows]
        for term, col in zip(self._random[family], self._random_columns[family]):
            values = col if rows is None else col[rows]
            eta = eta + theta[term.group_idx][groups] * values
        return eta

    def gev_arrays(self, theta: np.ndarray, rows: Optional[np.ndarray] = None):
        ''' Per-record (mu, sigma, xi) under the parameter vector theta. '''

        theta = np.asarray(theta, dtype=float)
        with np.errstate(over='ignore'):
            sigma = np.exp(self._linear(theta, 'sigma', rows))
        return self._linear(theta, 'mu', rows), sigma, self._linear(theta, 'xi', rows)

    def loglik_terms(self, theta: np.ndarray, rows: Optional[np.ndarray] = None) -> np.ndarray:
        '''
        Per-record GEV log-likelihood; -inf for records outside the support or
        whose shape leaves the allowed range.

        :param theta: Parameter vector.
        :param rows: Record indices to evaluate (None: all).
        '''

        mu, sigma, xi = self.gev_arrays(theta, rows)
        z = self.z if rows is None else self.z[rows]
        terms = gev_logpdf_values(z, mu, sigma, xi)
        inside = (xi > self.priors.xi_lower) & (xi < self.priors.xi_upper)
        return np.where(inside, terms, -np.inf)

    def log_prior(self, theta: np.ndarray) -> float:
        '''
        Process layer plus priors: normal group coefficients around their
        population means, normal priors on fixed coefficients and population
        means, inverse-gamma priors on every tau2 (sampled as log tau2, with
        the Jacobian), and the shape truncation.

        :param theta: Parameter vector.
        '''

        theta = np.asarray(theta, dtype=float)
        p = self.priors
        xi0 = theta[self._xi_intercept]
        if not p.xi_lower < xi0 < p.xi_upper:
            return -np.inf

        total = 0.0
        for family in FAMILIES:
            total += float(np.sum(_normal_logpdf(theta[self._fixed[family]], p.coef_mean, p.coef_sd)))
            for term in self._random[family]:
                mean = theta[term.mean_idx]
                log_tau2 = theta[term.log_tau2_idx]
                if not np.isfinite(log_tau2) or abs(log_tau2) > 700:
                    return -np.inf
                tau2 = np.exp(log_tau2)
                total += float(np.sum(_normal_logpdf(theta[term.group_idx], mean, np.sqrt(tau2))))
                total += float(_normal_logpdf(mean, p.coef_mean, p.coef_sd))
                total += float(_inv_gamma_logpdf(tau2, p.tau2_shape, p.tau2_rate)) + log_tau2
        return total

    def log_posterior(self, theta) -> float:
        ''' Unnormalized log-posterior: data log-likelihood plus log_prior. '''

        theta = self.vector(theta)
        prior = self.log_prior(theta)
        if not np.isfinite(prior):
            return -np.inf
        return float(np.sum(self.loglik_terms(theta))) + prior

    def vector(self, params) -> np.ndarray:
        ''' Parameter vector from an array or a name -> value mapping. '''

        if isinstance(params, Mapping):
            unknown = sorted(set(params) - set(self.names))
            if unknown:
                raise ModelSpecError(f"unknown parameters: {unknown}")
            theta = np.zeros(self.dimension)
            for name, value in params.items():
                theta[self.names.index(name)] = value
            return theta

        theta = np.asarray(params, dtype=float)
        if theta.shape != (self.dimension,):
            raise ModelSpecError(f"parameter vector needs {self.dimension} entries", theta.shape)
        return theta

    def initial_values(self) -> np.ndarray:
        '''
        Method-of-moments Gumbel start: location intercept at mean(z), log-scale
        intercept at log(sd(z) sqrt(6) / pi), shape -0.1, other coefficients 0,
        log tau2 0. Group-varying intercepts and their means start at the same
        values as the fixed intercept would.
        '''

        theta = np.zeros(self.dimension)
        if len(self.z):
            mean = float(np.mean(self.z))
            sd = float(np.std(self.z, ddof=1)) if len(self.z) > 1 else 1.0
        else:
            mean, sd = 0.0, 1.0
        start = {'mu': mean, 'sigma': float(np.log(max(sd, 1e-3) * np.sqrt(6.0) / np.pi)), 'xi': -0.1}

        for family in FAMILIES:
            for i, name in zip(self._fixed[family], self._fixed_names[family]):
                if name == INTERCEPT:
                    theta[i] = start[family]
            for term in self._random[family]:
                if term.covariate == INTERCEPT:
                    theta[term.group_idx] = start[family]
                    theta[term.mean_idx] = start[family]
        return theta

    def blocks(self) -> List[Block]:
        '''
        Sampler blocks: fixed location, location by group, fixed log-scale,
        log-scale by group, shape, and the population means with their log
        variances per family.
        '''

        blocks = []
        for family in FAMILIES:
            if len(self._fixed[family]):
                blocks.append(Block(family if family == 'xi' else f"{family}_fixed", self._fixed[family]))
            terms = self._random[family]
            if not terms:
                continue
            for k, group in enumerate(self.groups):
                indices = np.array([t.group_idx[k] for t in terms], dtype=int)
                blocks.append(Block(f"{family}_random[{group}]", indices, self.group_rows[k]))
            hyper = np.array([i for t in terms for i in (t.mean_idx, t.log_tau2_idx)], dtype=int)
            blocks.append(Block(f"{family}_hyper", hyper, np.zeros(0, dtype=int)))
        return blocks

    def coefficients(self, theta) -> CoefficientSet:
        ''' The regression coefficients held in a parameter vector. '''

        theta = self.vector(theta)
        fixed, random = {}, {}
        for family in FAMILIES:
            fixed[family] = {name: float(theta[i])
                             for i, name in zip(self._fixed[family], self._fixed_names[family])}
            random[family] = {t.covariate: theta[t.group_idx].copy() for t in self._random[family]}
        return CoefficientSet(self.groups, fixed['mu'], fixed['sigma'], fixed['xi'],
                              random['mu'], random['sigma'])


#####################################
# SAMPLER                           #
#####################################


class AdaptiveMetropolis():
    '''
    Blocked random-walk Metropolis over any target exposing
    loglik_terms(theta, rows) and log_prior(theta).
    '''

    def __init__(self, target, blocks: Sequence[Block], config: MCMCConfig):
        '''
        Create a new sampler.

        :param target: The log-density target.
        :param blocks: Parameter blocks, updated in order every iteration.
        :param config: Run length and adaptation settings.
        '''

        self.target = target
        self.blocks = [b for b in blocks if len(b.indices)]
        self.config = config

    def run(self, theta0: np.ndarray, rng: np.random.Generator, chain: int = 0):
        '''
        Run one chain from theta0. Returns the kept draws (kept, dim) and the
        post-burn-in acceptance rate per block.

        :param theta0: Starting parameter vector.
        :param rng: The chain's random generator.
        :param chain: Chain number, for logging.
        '''

        cfg = self.config
        theta = np.array(theta0, dtype=float)
        terms = np.asarray(self.target.loglik_terms(theta), dtype=float)
        prior = float(self.target.log_prior(theta))
        if not np.isfinite(prior + np.sum(terms)):
            raise InitializationError(f"chain {chain}: log-posterior is not finite at the starting values")

        dims = [len(b.indices) for b in self.blocks]
        scales = [cfg.initial_scale] * len(self.blocks)
        shapes = [np.eye(d) for d in dims]
        adapted = [False] * len(self.blocks)
        batch = np.zeros(len(self.blocks), dtype=int)
        kept_accepts = np.zeros(len(self.blocks), dtype=int)

        history = np.empty((cfg.burn_in, len(theta)))
        draws = np.empty((cfg.kept, len(theta)))
        if cfg.burn_in == 0:
            self._freeze(chain, scales, batch, 1)

        for it in range(cfg.iterations):
            for b, block in enumerate(self.blocks):
                step = scales[b] * (shapes[b] @ rng.standard_normal(dims[b]))
                proposal = theta.copy()
                proposal[block.indices] += step
                log_u = np.log(rng.random())

                new_prior = float(self.target.log_prior(proposal))
                if not np.isfinite(new_prior):
                    continue
                new_terms = np.asarray(self.target.loglik_terms(proposal, block.rows), dtype=float)
                old_terms = terms if block.rows is None else terms[block.rows]
                with np.errstate(invalid='ignore'):
                    log_ratio = (np.sum(new_terms) - np.sum(old_terms)) + (new_prior - prior)
                if log_u < log_ratio:
                    theta = proposal
                    prior = new_prior
                    if block.rows is None:
                        terms = new_terms
                    else:
                        terms[block.rows] = new_terms
                    if it < cfg.burn_in:
                        batch[b] += 1
                    else:
                        kept_accepts[b] += 1

            if it < cfg.burn_in:
                history[it] = theta
                if (it + 1) % cfg.adapt_interval == 0:
                    self._adapt(it + 1, history, scales, shapes, adapted, batch)
                    if it + 1 == cfg.burn_in:
                        self._freeze(chain, scales, batch, cfg.adapt_interval)
                    batch[:] = 0
                elif it + 1 == cfg.burn_in:
                    self._freeze(chain, scales, batch, (it + 1) % cfg.adapt_interval)
            elif (it - cfg.burn_in) % cfg.thin == 0:
                draws[(it - cfg.burn_in) // cfg.thin] = theta

        post = cfg.iterations - cfg.burn_in
        acceptance = {b.name: float(kept_accepts[i] / post) for i, b in enumerate(self.blocks)}
        return draws, acceptance

    def _adapt(self, n: int, history: np.ndarray, scales: List[float], shapes: List[np.ndarray],
               adapted: List[bool], batch: np.ndarray) -> None:
        cfg = self.config
        for b, block in enumerate(self.blocks):
            rate = batch[b] / cfg.adapt_interval
            if rate < cfg.accept_low:
                scales[b] *= 0.8
            elif rate > cfg.accept_high:
                scales[b] *= 1.25

            d = len(block.indices)
            if d < 2 or n < 2 * cfg.adapt_interval:
                continue
            window = history[n // 2:n][:, block.indices]
            cov = np.cov(window, rowvar=False)
            if not np.all(np.diag(cov) > 0):
                continue
            try:
                shape = np.linalg.cholesky((2.4 ** 2 / d) * cov + 1e-10 * np.eye(d))
            except np.linalg.LinAlgError:
                continue
            shapes[b] = shape
            if not adapted[b]:
                # the empirical shape already carries the step size
                scales[b] = 1.0
                adapted[b] = True

    def _freeze(self, chain: int, scales: List[float], batch: np.ndarray, window: int) -> None:
        rates = {b.name: (float(batch[i] / window) if window else None) for i, b in enumerate(self.blocks)}
        logger.info("burn-in acceptance", {"chain": chain, "acceptance": rates})
        logger.info("proposal scales frozen", {
            "chain": chain, "scales": {b.name: scales[i] for i, b in enumerate(self.blocks)}})


def _jittered_start(target, theta0: np.ndarray, rng: np.random.Generator, scale: float) -> np.ndarray:
    candidate = theta0 + rng.normal(0.0, scale, size=len(theta0))
    value = float(target.log_prior(candidate)) + float(np.sum(target.loglik_terms(candidate)))
    return candidate if np.isfinite(value) else theta0


def _run_chain(args):
    target, blocks, cfg, theta0, seed_seq, chain = args
    rng = np.random.default_rng(seed_seq)
    start = theta0 if chain == 0 else _jittered_start(target, theta0, rng, 0.5 * cfg.initial_scale)
    return AdaptiveMetropolis(target, blocks, cfg).run(start, rng, chain)


def run_chains(target, theta0: np.ndarray, blocks: Sequence[Block], cfg: MCMCConfig, seed: int,
               names: Sequence[str], jobs: int = 1) -> PosteriorChain:
    '''
    Run cfg.chains independent chains. Chain c uses the c-th child of
    SeedSequence(seed); chains after the first start from a small random
    perturbation of theta0. Results do not depend on the worker count.

    :param target: The log-density target.
    :param theta0: Starting values.
    :param blocks: Sampler blocks.
    :param cfg: MCMC settings.
    :param seed: Seed of the run.
    :param names: Parameter names.
    :param jobs: Worker processes.
    '''

    children = np.random.SeedSequence(int(seed)).spawn(int(cfg.chains))
    work = [(target, list(blocks), cfg, np.asarray(theta0, dtype=float), children[c], c)
            for c in range(int(cfg.chains))]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            results = list(pool.map(_run_chain, work))
    else:
        results = [_run_chain(item) for item in work]

    acceptance = {}
    for c, (_, rates) in enumerate(results):
        for block, rate in rates.items():
            acceptance[f"{block}#{c}"] = rate
    draws = np.stack([d for d, _ in results])
    return PosteriorChain(draws, list(names), int(cfg.burn_in), int(cfg.thin), int(seed), acceptance)


def run_mcmc(records: Sequence, spec: ModelSpec, priors: PriorConfig = PriorConfig(),
             mcmc_cfg: MCMCConfig = MCMCConfig(), seed: int = 0, jobs: int = 1) -> PosteriorChain:
    '''
    Sample the posterior of the GEV regression over block records.

    :param records: Block records.
    :param spec: Model specification.
    :param priors: Prior settings.
    :param mcmc_cfg: Chain count, run length, burn-in, thinning and adaptation.
    :param seed: Seed of the run.
    :param jobs: Worker processes (one chain per worker).
    '''

    model = HierarchicalGevModel(records, spec, priors)
    theta0 = model.initial_values()
    if not np.isfinite(model.log_posterior(theta0)):
        raise InitializationError("log-posterior is not finite at the method-of-moments start")

    logger.info("sampling posterior", {
        "variant": spec.variant, "records": len(model.z), "groups": len(model.groups),
        "parameters": model.dimension, "chains": mcmc_cfg.chains, "iterations": mcmc_cfg.iterations})
    return run_chains(model, theta0, model.blocks(), mcmc_cfg, seed, model.names, jobs)


def log_posterior(params, records: Sequence, spec: ModelSpec, priors: PriorConfig = PriorConfig()) -> float:
    '''
    Unnormalized log-posterior of a parameter vector or name -> value mapping.

    :param params: Parameter values (see HierarchicalGevModel.names).
    :param records: Block records.
    :param spec: Model specification.
    :param priors: Prior settings.
    '''

    return HierarchicalGevModel(records, spec, priors).log_posterior(params)


#####################################
# DIAGNOSTICS AND FIT METRICS       #
#####################################


def bgr_diagnostic(chain: PosteriorChain) -> Dict[str, float]:
    '''
    Brooks-Gelman-Rubin potential scale reduction factor per parameter,
    sqrt(((n - 1) / n W + B / n) / W), with W the mean within-chain variance
    and B / n the variance of the chain means.

    :param chain: Posterior draws from at least two chains.
    '''

    if chain.chains < 2:
        raise InsufficientChainsError("the BGR diagnostic needs at least two chains", chain.chains)

    draws = chain.draws
    n = draws.shape[1]
    within = np.mean(np.var(draws, axis=1, ddof=1), axis=0)
    between_n = np.var(np.mean(draws, axis=1), axis=0, ddof=1)
    with np.errstate(divide='ignore', invalid='ignore'):
        psrf = np.sqrt(((n - 1.0) / n * within + between_n) / within)
    # constant parameters have converged trivially
    psrf = np.where(within > 0, psrf, 1.0)
    return dict(zip(chain.names, psrf.astype(float)))


def thinned_draws(chain: PosteriorChain, max_draws: int) -> np.ndarray:
    pooled = chain.pooled()
    if len(pooled) <= max_draws:
        return pooled
    idx = np.linspace(0, len(pooled) - 1, max_draws).round().astype(int)
    return pooled[idx]


def fit_metrics(chain: PosteriorChain, records: Sequence, spec: ModelSpec,
                priors: PriorConfig = PriorConfig(), max_draws: int = 2000) -> FitMetrics:
    '''
    DIC, WAIC and LOOIC from the per-record log-likelihood matrix of (up to
    max_draws evenly spaced) posterior draws.

    DIC = Dbar + pD with D = -2 log-likelihood and pD = Dbar - D(posterior mean).
    WAIC = -2 (lppd - p_WAIC), p_WAIC the summed per-record variances.
    LOOIC is importance-sampling leave-one-out with raw weights truncated at
    their 99.9th percentile per record.

    :param chain: Posterior draws.
    :param records: The block records the chain was fitted to.
    :param spec: Model specification.
    :param priors: Prior settings (only the shape bounds matter here).
    :param max_draws: Draw budget for the log-likelihood matrix.
    '''

    model = HierarchicalGevModel(records, spec, priors)
    thetas = thinned_draws(chain, max_draws)
    loglik = np.stack([model.loglik_terms(theta) for theta in thetas])
    s = loglik.shape[0]

    deviance = -2.0 * loglik.sum(axis=1)
    d_bar = float(np.mean(deviance))
    d_hat = -2.0 * float(np.sum(model.loglik_terms(thetas.mean(axis=0))))
    p_dic = d_bar - d_hat

    lppd_i = logsumexp(loglik, axis=0) - np.log(s)
    p_waic_i = np.var(loglik, axis=0, ddof=1) if s > 1 else np.zeros(loglik.shape[1])
    waic = -2.0 * float(np.sum(lppd_i - p_waic_i))

    log_w = -loglik - np.max(-loglik, axis=0)
    cap = np.log(np.percentile(np.exp(log_w), 99.9, axis=0))
    log_w = np.minimum(log_w, cap)
    elpd_i = logsumexp(log_w + loglik, axis=0) - logsumexp(log_w, axis=0)
    looic = -2.0 * float(np.sum(elpd_i))

    return FitMetrics(d_bar + p_dic, p_dic, waic, float(np.sum(p_waic_i)), looic,
                      float(np.sum(lppd_i - elpd_i)), loglik)


def _reporting_draws(chain: PosteriorChain) -> Tuple[List[str], np.ndarray]:
    names, columns = [], []
    pooled = chain.pooled()
    for i, name in enumerate(chain.names):
        names.append(name)
        columns.append(pooled[:, i])
        if name.endswith('.log_tau2'):
            names.append(name[:-len('.log_tau2')] + '.tau2')
            columns.append(np.exp(pooled[:, i]))
    return names, np.column_stack(columns)


def summary(chain: PosteriorChain) -> pd.DataFrame:
    '''
    Posterior table: mean, sd, 2.5 % and 97.5 % quantiles, BGR (NaN for a
    single chain) and whether the 95 % interval excludes 0. Every log_tau2
    row is followed by its tau2 on the natural scale.

    :param chain: Posterior draws.
    '''

    names, values = _reporting_draws(chain)
    bgr = bgr_diagnostic(chain) if chain.chains > 1 else {}
    lo, hi = np.percentile(values, [2.5, 97.5], axis=0)
    rows = []
    for i, name in enumerate(names):
        source = name[:-len('.tau2')] + '.log_tau2' if name.endswith('.tau2') else name
        rows.append({
            'parameter': name,
            'mean': float(np.mean(values[:, i])),
            'sd': float(np.std(values[:, i], ddof=1)),
            'q2.5': float(lo[i]),
            'q97.5': float(hi[i]),
            'bgr': float(bgr.get(source, np.nan)),
            'significant': bool(lo[i] > 0 or hi[i] < 0),
        })
    return pd.DataFrame(rows, columns=['parameter', 'mean', 'sd', 'q2.5', 'q97.5', 'bgr', 'significant'])


def compare_models(results: Mapping[str, FitMetrics]) -> pd.DataFrame:
    '''
    Side-by-side DIC, WAIC and LOOIC, best (lowest DIC) first.

    :param results: Fit metrics keyed by model label.
    '''

    rows = [dict(model=label, **metrics.to_dict()) for label, metrics in results.items()]
    frame = pd.DataFrame(rows, columns=['model', 'DIC', 'pD', 'WAIC', 'p_WAIC', 'LOOIC', 'p_LOO'])
    return frame.sort_values('DIC', kind='mergesort').reset_index(drop=True)


#####################################
# FILE INPUT AND OUTPUT             #
#####################################


def write_chain_csv(path, chain: PosteriorChain, comment: Optional[str] = None) -> None:
    '''
    Write draws in long form with columns iteration, chain, parameter, value;
    iteration counts from the start of the run (burn-in included).

    :param path: Output path.
    :param chain: Posterior draws.
    :param comment: Optional provenance line.
    '''

    c, s, p = chain.draws.shape
    iteration = chain.burn_in + np.arange(s) * chain.thin
    frame = pd.DataFrame({
        'iteration': np.tile(np.repeat(iteration, p), c),
        'chain': np.repeat(np.arange(c), s * p),
        'parameter': np.tile(np.array(chain.names, dtype=object), c * s),
        'value': chain.draws.reshape(-1),
    })
    write_csv(path, frame, comment)


def read_chain_csv(path, seed: int = 0) -> PosteriorChain:
    '''
    Read draws written by write_chain_csv.

    :param path: Path of the CSV file.
    :param seed: Seed recorded on the returned chain.
    '''

    frame = read_csv(path, dtype={'parameter': str})
    names = list(dict.fromkeys(frame['parameter']))
    chains = int(frame['chain'].max()) + 1
    iterations = np.sort(frame['iteration'].unique())
    draws = frame['value'].to_numpy(dtype=float).reshape(chains, len(iterations), len(names))
    thin = int(iterations[1] - iterations[0]) if len(iterations) > 1 else 1
    return PosteriorChain(draws, names, int(iterations[0]), thin, int(seed))


def write_summary_json(path, chain: PosteriorChain, spec: ModelSpec,
                       metrics: Optional[FitMetrics] = None, groups: Sequence[str] = ()) -> None:
    '''
    Write the posterior summary, fit metrics and run metadata as JSON.

    :param path: Output path.
    :param chain: Posterior draws.
    :param spec: Model specification.
    :param metrics: Optional fit metrics.
    :param groups: Group ids of the fitted model.
    '''

    table = summary(chain)
    document = {
        'variant': spec.variant,
        'seed': chain.seed,
        'chains': chain.chains,
        'draws_per_chain': int(chain.draws.shape[1]),
        'burn_in': chain.burn_in,
        'thin': chain.thin,
        'groups': list(groups),
        'acceptance': chain.acceptance,
        'parameters': table.to_dict(orient='records'),
        'metrics': metrics.to_dict() if metrics is not None else None,
    }
    with open(path, 'w') as fh:
        json.dump(document, fh, indent=2, sort_keys=True, default=float)
        fh.write('\n')
