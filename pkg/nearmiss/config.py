'''
Pipeline configuration: one JSON document parsed into frozen dataclasses.

Every section is optional; missing keys take the dataclass defaults. Unknown
keys, duplicated output paths and invalid values are ConfigErrors. Relative
paths resolve against the directory of the configuration file.
'''

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from .BlockExtractor import BlockConfig
from .HierarchicalGev import MCMCConfig, ModelSpec, PriorConfig
from .NearMissDetector import VI, VV, DetectionConfig
from .RiskEstimator import DEFAULT_OMEGA_GRID, CORConfig
from .dynamics import IntegrationConfig
from .errors import ConfigError
from .kinematics import KinematicsConfig
from .synth import SyntheticCorridorSpec
from .utils import hash_config

DETECTED, SYNTHETIC = 'detected', 'synthetic'
SECTIONS = ('seed', 'jobs', 'paths', 'kinematics', 'detection', 'blocks', 'model', 'priors',
            'mcmc', 'risk', 'validate', 'synth')


@dataclass(frozen=True)
class PathConfig():
    tracks: Optional[str] = None
    vehicles: Optional[str] = None
    boundaries: Optional[str] = None
    site_map: Optional[str] = None
    processed: Optional[str] = None
    events: Optional[str] = None
    blocks: Optional[str] = None
    fit: Optional[str] = None
    risk: Optional[str] = None
    validate: Optional[str] = None
    truth: Optional[str] = None
    synthetic_blocks: Optional[str] = None


@dataclass(frozen=True)
class ModelConfig():
    ''' Which blocks are fitted (interaction kind and source) and the model layout. '''

    kind: str = VV
    source: str = DETECTED
    spec: ModelSpec = field(default_factory=lambda: ModelSpec(mu_random=('intercept',)))

    def __post_init__(self):
        if self.kind not in (VV, VI):
            raise ConfigError(f"model kind must be {VV} or {VI}", self.kind)
        if self.source not in (DETECTED, SYNTHETIC):
            raise ConfigError(f"model source must be {DETECTED} or {SYNTHETIC}", self.source)


@dataclass(frozen=True)
class ValidateConfig():
    omega_grid: Tuple[float, ...] = DEFAULT_OMEGA_GRID
    recovery_tolerance: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, 'omega_grid', tuple(float(w) for w in self.omega_grid))
        if not self.omega_grid:
            raise ConfigError("validate.omega_grid must not be empty")
        if not self.recovery_tolerance > 0:
            raise ConfigError("validate.recovery_tolerance must be positive", self.recovery_tolerance)


@dataclass(frozen=True)
class PipelineConfig():
    seed: int = 0
    jobs: int = 1
    paths: PathConfig = PathConfig()
    kinematics: KinematicsConfig = KinematicsConfig()
    detection: DetectionConfig = DetectionConfig()
    blocks: BlockConfig = BlockConfig()
    model: ModelConfig = ModelConfig()
    priors: PriorConfig = PriorConfig()
    mcmc: MCMCConfig = MCMCConfig()
    risk: CORConfig = CORConfig()
    validate: ValidateConfig = ValidateConfig()
    synth: SyntheticCorridorSpec = SyntheticCorridorSpec()
    digest: str = ''
    source: str = ''


def _section(cls, data, name: str, **extra):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")

    known = {f.name for f in fields(cls)} - set(extra)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {unknown}")

    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**values, **extra)
    except (TypeError, ValueError) as error:
        raise ConfigError(f"invalid section {name!r}", error.args)


def _detection(data) -> DetectionConfig:
    data = dict(data or {})
    horizon = {k: data.pop(k) for k in ('dt', 'steps') if k in data}
    return _section(DetectionConfig, data, 'detection',
                    horizon=_section(IntegrationConfig, horizon, 'detection'))


def _model(data) -> ModelConfig:
    data = dict(data or {})
    outer = {k: data.pop(k) for k in ('kind', 'source') if k in data}
    if not data:
        return _section(ModelConfig, outer, 'model')
    return _section(ModelConfig, outer, 'model', spec=_section(ModelSpec, data, 'model'))


def _paths(data, base: Path) -> PathConfig:
    paths = _section(PathConfig, data, 'paths')
    resolved = {}
    for f in fields(PathConfig):
        value = getattr(paths, f.name)
        if value is not None:
            resolved[f.name] = os.path.normpath(base / str(value))

    seen = {}
    for name, value in resolved.items():
        if value in seen:
            raise ConfigError(f"paths.{seen[value]} and paths.{name} point to the same location", value)
        seen[value] = name
    return replace(paths, **resolved)


def parse_config(data: dict, base: Path = Path('.'), seed: Optional[int] = None,
                 jobs: Optional[int] = None, source: str = '') -> PipelineConfig:
    '''
    Build a PipelineConfig from an already-parsed JSON document.

    :param data: The configuration document.
    :param base: Directory relative paths resolve against.
    :param seed: Optional seed overriding the document.
    :param jobs: Optional worker count overriding the document.
    :param source: Where the document came from, for messages.
    '''

    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown configuration sections: {unknown}")

    data = dict(data)
    if seed is not None:
        data['seed'] = int(seed)
    if jobs is not None:
        data['jobs'] = int(jobs)

    try:
        seed_value = int(data.get('seed', 0))
        jobs_value = int(data.get('jobs', 1))
    except (TypeError, ValueError) as error:
        raise ConfigError("seed and jobs must be integers", error.args)
    if jobs_value < 1:
        raise ConfigError("jobs must be at least 1", jobs_value)

    risk = dict(data.get('risk') or {})
    if 'exposure' in risk and risk['exposure'] is None:
        del risk['exposure']

    return PipelineConfig(
        seed=seed_value,
        jobs=jobs_value,
        paths=_paths(data.get('paths'), Path(base)),
        kinematics=_section(KinematicsConfig, data.get('kinematics'), 'kinematics'),
        detection=_detection(data.get('detection')),
        blocks=_section(BlockConfig, data.get('blocks'), 'blocks'),
        model=_model(data.get('model')),
        priors=_section(PriorConfig, data.get('priors'), 'priors'),
        mcmc=_section(MCMCConfig, data.get('mcmc'), 'mcmc'),
        risk=_section(CORConfig, risk, 'risk'),
        validate=_section(ValidateConfig, data.get('validate'), 'validate'),
        synth=_section(SyntheticCorridorSpec, data.get('synth'), 'synth'),
        # hashed without the worker count
        digest=hash_config({key: value for key, value in data.items() if key != 'jobs'}),
        source=source,
    )


def load_config(path, seed: Optional[int] = None, jobs: Optional[int] = None) -> PipelineConfig:
    '''
    Read and validate the pipeline configuration file.

    :param path: Path of the JSON configuration.
    :param seed: Optional seed overriding the file (the --seed flag).
    :param jobs: Optional worker count overriding the file (the --jobs flag).
    '''

    path = Path(path)
    try:
        with open(path, 'r') as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"configuration file {path} does not exist")
    except json.JSONDecodeError as error:
        raise ConfigError(f"{path}:{error.lineno}: invalid JSON", error.args)

    return parse_config(data, path.resolve().parent, seed, jobs, str(path))
