'''
Crash-risk estimation from fitted block-maxima models.

Blocks are fitted on z = -ttc, so the probability that a block's minimum
2D-TTC falls at or below the critical threshold |omega| is the upper-tail
exceedance 1 - F(-|omega|). Group crash rates (COR) weight every block's
exceedance probability by its event count and divide by the group's
exposure time; the corridor crash frequency is their sum.
'''

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .errors import ConfigError, DataError
from .gev import CoefficientSet, GevParams, gev_cdf, gev_cdf_values, link_arrays
from .HierarchicalGev import HierarchicalGevModel, ModelSpec, ModelSpecError, PosteriorChain, \
    PriorConfig, thinned_draws
from .logger import Logger
from .utils import write_csv

logger = Logger("nearmiss.risk")

PLUGIN, POSTERIOR = 'plugin', 'posterior'
MODES = (PLUGIN, POSTERIOR)
DEFAULT_OMEGA_GRID = (-0.9, -0.8, -0.7, -0.6, -0.5, -0.4, -0.3, -0.2, -0.1)
BANDS = (2.5, 50.0, 97.5)
BAND_COLUMNS = ('q2.5', 'q50', 'q97.5')

COR_BLOCK_COLUMNS = ['group_id', 'block_index', 'scenario_id', 'window', 'z', 'y', 'p_crash']
COR_GROUP_COLUMNS = ['group_id', 'blocks', 'events', 'exposure', 'cor']
SWEEP_COLUMNS = ['omega', 'auc', 'cases', 'controls', 'skipped']


class CORConfigError(ConfigError):
    ''' Signifies an invalid threshold, exposure or estimation mode. '''


class UndefinedAUCError(DataError):
    ''' Signifies an ROC analysis over labels of a single class. '''


@dataclass(frozen=True)
class CORConfig():
    '''
    Crash-risk settings. `omega` is the critical threshold in seconds on the
    negated axis (-0.9 to -0.1 in practice). `exposure` fixes T for every
    group; when None each group uses its observed scenario time.
    '''

    omega: float = -0.5
    exposure: Optional[float] = None
    mode: str = PLUGIN
    omega_grid: Tuple[float, ...] = DEFAULT_OMEGA_GRID
    max_draws: int = 2000

    def __post_init__(self):
        object.__setattr__(self, 'omega_grid', tuple(float(w) for w in self.omega_grid))
        if not np.isfinite(self.omega):
            raise CORConfigError("omega must be finite", self.omega)
        if self.exposure is not None and not self.exposure > 0:
            raise CORConfigError("exposure T must be positive", self.exposure)
        if self.mode not in MODES:
            raise CORConfigError(f"mode must be one of {MODES}", self.mode)
        if int(self.max_draws) < 1:
            raise CORConfigError("max_draws must be positive", self.max_draws)


@dataclass
class GroupCOR():
    group_id: str
    cor: float
    exposure: float
    blocks: int
    events: int


@dataclass
class RocResult():
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    cases: int
    controls: int


@dataclass
class CORResult():
    '''
    Per-block exceedance probabilities, per-group COR and the corridor total.
    In full-posterior mode the tables also carry q2.5/q50/q97.5 bands and
    `total_band` holds the bands of the total.
    '''

    mode: str
    omega: float
    blocks: pd.DataFrame
    groups: pd.DataFrame
    total: float
    total_band: Optional[Tuple[float, float, float]] = None
    breakdown: Dict[str, float] = field(default_factory=dict)


#####################################
# EXCEEDANCE AND RATES              #
#####################################


def exceedance_prob(p: GevParams, omega):
    '''
    Probability that a block's minimum 2D-TTC is at most |omega|, i.e.
    1 - gev_cdf(-|omega|) on the negated axis. Exactly 0 or 1 outside the
    support.

    :param p: GEV parameters of the block.
    :param omega: Critical threshold(s) in seconds.
    '''

    out = 1.0 - np.asarray(gev_cdf(-np.abs(np.asarray(omega, dtype=float)), p))
    return out if out.ndim else float(out)


def exceedance_values(omega: float, mu, sigma, xi) -> np.ndarray:
    ''' Batch exceedance probabilities for per-block parameter arrays. '''

    return 1.0 - gev_cdf_values(-abs(float(omega)), mu, sigma, xi)


def _exposure(cfg: CORConfig, group_id: str, exposure: Optional[Mapping[str, float]]) -> float:
    if cfg.exposure is not None:
        return float(cfg.exposure)
    value = None if exposure is None else exposure.get(group_id)
    if value is None:
        raise CORConfigError(f"no exposure time for group {group_id!r}")
    if not value > 0:
        raise CORConfigError(f"exposure T of group {group_id!r} must be positive", value)
    return float(value)


def _param_arrays(params: Sequence[GevParams]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.array([p.mu for p in params], dtype=float),
            np.array([p.sigma for p in params], dtype=float),
            np.array([p.xi for p in params], dtype=float))


def group_cor(records: Sequence, params: Sequence[GevParams], cfg: CORConfig,
              exposure: Optional[Mapping[str, float]] = None) -> GroupCOR:
    '''
    Crash rate of one group: (1 / T) sum(y_i P_i) over its blocks.

    :param records: Block records of a single group.
    :param params: GEV parameters per block, aligned with records.
    :param cfg: Threshold and exposure settings.
    :param exposure: Exposure time per group id, used when cfg.exposure is None.
    '''

    if len(records) != len(params):
        raise DataError("records and parameters differ in length", len(records), len(params))
    groups = {str(r.group) for r in records}
    if len(groups) != 1:
        raise DataError("group_cor expects the blocks of exactly one group", sorted(groups))

    group_id = groups.pop()
    t = _exposure(cfg, group_id, exposure)
    y = np.array([r.y for r in records], dtype=float)
    prob = exceedance_values(cfg.omega, *_param_arrays(params))
    return GroupCOR(group_id, float(np.sum(y * prob) / t), t, len(records), int(y.sum()))


def total_cf(groups: Sequence[GroupCOR]) -> Tuple[float, Dict[str, float]]:
    '''
    Corridor crash frequency: the sum of group rates, with the per-group
    breakdown.

    :param groups: Group results.
    '''

    breakdown = {g.group_id: g.cor for g in sorted(groups, key=lambda g: g.group_id)}
    return float(sum(breakdown.values())), breakdown


#####################################
# VALIDATION                        #
#####################################


def severity_labels(records: Sequence, omega: float) -> np.ndarray:
    ''' 1 for blocks whose observed minimum 2D-TTC is at most |omega| (cases), else 0. '''

    ttc = -np.array([r.z for r in records], dtype=float)
    return (ttc <= abs(float(omega))).astype(int)


def roc_auc(scores, labels) -> RocResult:
    '''
    Area under the ROC curve by the Mann-Whitney rank formulation, ties
    counted as one half, plus the curve through every distinct score.

    :param scores: Risk scores (higher means riskier).
    :param labels: Binary labels, 1 for cases.
    '''

    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in shape", scores.shape, labels.shape)

    cases = int(labels.sum())
    controls = int(len(labels) - cases)
    if cases == 0 or controls == 0:
        raise UndefinedAUCError(f"AUC is undefined with {cases} cases and {controls} controls")

    ranks = rankdata(scores, method='average')
    u = float(np.sum(ranks[labels == 1])) - cases * (cases + 1) / 2.0
    auc = u / (cases * controls)

    thresholds = np.unique(scores)[::-1]
    order = np.argsort(-scores, kind='mergesort')
    ordered_scores, ordered_labels = scores[order], labels[order]
    # index of the last score >= each threshold
    last = np.searchsorted(-ordered_scores, -thresholds, side='right') - 1
    tp = np.cumsum(ordered_labels)[last]
    fp = (last + 1) - tp
    tpr = np.concatenate([[0.0], tp / cases])
    fpr = np.concatenate([[0.0], fp / controls])
    return RocResult(auc, fpr, tpr, thresholds, cases, controls)


def threshold_sweep(records: Sequence, params: Sequence[GevParams],
                    grid: Sequence[float] = DEFAULT_OMEGA_GRID) -> pd.DataFrame:
    '''
    ROC-AUC of the block exceedance probabilities against the observed
    severity labels at every threshold of the grid. Thresholds where all
    blocks fall in one class are kept as skipped rows with an empty AUC.

    :param records: Block records with observed z.
    :param params: GEV parameters per block.
    :param grid: Thresholds omega in seconds.
    '''

    if len(grid) == 0:
        raise CORConfigError("the omega grid is empty")

    arrays = _param_arrays(params)
    rows = []
    for omega in grid:
        labels = severity_labels(records, omega)
        scores = exceedance_values(omega, *arrays)
        try:
            result = roc_auc(scores, labels)
            rows.append({'omega': float(omega), 'auc': result.auc, 'cases': result.cases,
                         'controls': result.controls, 'skipped': False})
        except UndefinedAUCError as error:
            logger.warn("threshold skipped", {"omega": float(omega), "reason": str(error.args[0])})
            cases = int(labels.sum())
            rows.append({'omega': float(omega), 'auc': np.nan, 'cases': cases,
                         'controls': len(labels) - cases, 'skipped': True})
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


#####################################
# ESTIMATOR                         #
#####################################


def covariate_columns(records: Sequence) -> Dict[str, np.ndarray]:
    ''' Covariate arrays shared by every record, keyed by name. '''

    if not records:
        return {}
    names = set(records[0].covariates)
    for r in records[1:]:
        names &= set(r.covariates)
    return {name: np.array([r.covariates[name] for r in records], dtype=float) for name in sorted(names)}


def block_params(coeffs: CoefficientSet, records: Sequence) -> List[GevParams]:
    '''
    Linked GEV parameters of every block.

    :param coeffs: Regression coefficients.
    :param records: Block records.
    '''

    group_index = np.array([coeffs.group_index(r.group) for r in records], dtype=int)
    mu, sigma, xi = link_arrays(coeffs, covariate_columns(records), group_index)
    return [GevParams(float(m), float(s), float(x)) for m, s, x in zip(mu, sigma, xi)]


class RiskEstimator():
    '''
    Evaluates exceedance probabilities, group COR and the corridor total from a
    fitted posterior, either at the posterior mean (plug-in) or per posterior
    draw with percentile bands.
    '''

    def __init__(self, config: CORConfig = CORConfig(), exposure: Optional[Mapping[str, float]] = None):
        '''
        Create a new risk estimator.

        :param config: Threshold, exposure and mode settings.
        :param exposure: Exposure time per group id (seconds).
        '''

        self.config = config
        self.exposure = dict(exposure or {})

    def _model(self, records, chain: PosteriorChain, spec: ModelSpec, priors: PriorConfig):
        model = HierarchicalGevModel(records, spec, priors)
        if list(chain.names) != list(model.names):
            raise ModelSpecError("posterior parameters do not match the model specification")
        return model

    def _rates(self, records, group_ids: List[str], prob: np.ndarray) -> np.ndarray:
        ''' COR per group along the last axis of prob (..., n_blocks). '''

        y = np.array([r.y for r in records], dtype=float)
        labels = np.array([str(r.group) for r in records])
        rates = []
        for g in group_ids:
            t = _exposure(self.config, g, self.exposure)
            rates.append(np.sum((y * prob)[..., labels == g], axis=-1) / t)
        return np.stack(rates, axis=-1)

    def plugin(self, records: Sequence, coeffs: CoefficientSet) -> CORResult:
        '''
        COR from one coefficient set (normally the posterior mean).

        :param records: Block records.
        :param coeffs: Regression coefficients.
        '''

        params = block_params(coeffs, records)
        prob = exceedance_values(self.config.omega, *_param_arrays(params))
        group_ids = sorted({str(r.group) for r in records})
        groups = []
        for g in group_ids:
            idx = [i for i, r in enumerate(records) if str(r.group) == g]
            groups.append(group_cor([records[i] for i in idx], [params[i] for i in idx],
                                    self.config, self.exposure))
        total, breakdown = total_cf(groups)

        blocks = self._blocks_frame(records, prob)
        table = pd.DataFrame([{'group_id': g.group_id, 'blocks': g.blocks, 'events': g.events,
                               'exposure': g.exposure, 'cor': g.cor} for g in groups],
                             columns=COR_GROUP_COLUMNS)
        return CORResult(PLUGIN, self.config.omega, blocks, table, total, None, breakdown)

    def posterior(self, records: Sequence, chain: PosteriorChain, spec: ModelSpec,
                  priors: PriorConfig = PriorConfig()) -> CORResult:
        '''
        Plug-in estimates at the posterior mean plus q2.5/q50/q97.5 bands
        from evaluating every quantity per posterior draw.

        :param records: Block records.
        :param chain: Posterior draws.
        :param spec: Model specification of the chain.
        :param priors: Prior settings of the fit.
        '''

        model = self._model(records, chain, spec, priors)
        result = self.plugin(records, model.coefficients(chain.pooled().mean(axis=0)))

        draws = thinned_draws(chain, int(self.config.max_draws))
        prob = np.empty((len(draws), len(records)))
        for s, theta in enumerate(draws):
            mu, sigma, xi = model.gev_arrays(theta)
            prob[s] = exceedance_values(self.config.omega, mu, sigma, xi)

        group_ids = list(result.groups['group_id'])
        rates = self._rates(records, group_ids, prob)
        totals = rates.sum(axis=1)

        block_bands = np.percentile(prob, BANDS, axis=0)
        group_bands = np.percentile(rates, BANDS, axis=0)
        for column, b, g in zip(BAND_COLUMNS, block_bands, group_bands):
            result.blocks[f"p_{column}"] = b
            result.groups[f"cor_{column}"] = g

        result.mode = POSTERIOR
        result.total_band = tuple(float(v) for v in np.percentile(totals, BANDS))
        logger.info("posterior risk evaluated", {"draws": len(draws), "blocks": len(records),
                                                 "groups": len(group_ids)})
        return result

    def estimate(self, records: Sequence, chain: PosteriorChain, spec: ModelSpec,
                 priors: PriorConfig = PriorConfig()) -> CORResult:
        ''' Plug-in or full-posterior estimate according to the configured mode. '''

        if self.config.mode == POSTERIOR:
            return self.posterior(records, chain, spec, priors)
        model = self._model(records, chain, spec, priors)
        return self.plugin(records, model.coefficients(chain.pooled().mean(axis=0)))

    def sweep(self, records: Sequence, chain: PosteriorChain, spec: ModelSpec,
              priors: PriorConfig = PriorConfig()) -> pd.DataFrame:
        ''' threshold_sweep over the configured grid with posterior-mean parameters. '''

        model = self._model(records, chain, spec, priors)
        params = block_params(model.coefficients(chain.pooled().mean(axis=0)), records)
        return threshold_sweep(records, params, self.config.omega_grid)

    @staticmethod
    def _blocks_frame(records: Sequence, prob: np.ndarray) -> pd.DataFrame:
        return pd.DataFrame({
            'group_id': [str(r.group) for r in records],
            'block_index': [int(r.block_index) for r in records],
            'scenario_id': [str(r.scenario_id) for r in records],
            'window': [int(r.window) for r in records],
            'z': [float(r.z) for r in records],
            'y': [int(r.y) for r in records],
            'p_crash': prob,
        }, columns=COR_BLOCK_COLUMNS)


#####################################
# FILE OUTPUT                       #
#####################################


def write_cor(directory, result: CORResult, comment: Optional[str] = None) -> Tuple[str, str]:
    '''
    Write cor_blocks.csv and cor_groups.csv into a directory.

    :param directory: Output directory.
    :param result: Risk estimate.
    :param comment: Optional provenance line.
    '''

    blocks_path = f"{directory}/cor_blocks.csv"
    groups_path = f"{directory}/cor_groups.csv"
    write_csv(blocks_path, result.blocks, comment)
    write_csv(groups_path, result.groups, comment)
    return blocks_path, groups_path


def write_sweep(path, sweep: pd.DataFrame, comment: Optional[str] = None) -> None:
    ''' Write the threshold sweep (roc_sweep.csv). '''

    write_csv(path, sweep, comment)
