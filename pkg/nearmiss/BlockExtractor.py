'''
Block maxima extraction: near-miss events are labeled with the spatial group
whose region contains them, cut into fixed-duration windows per recording, and
reduced to one record per window holding the negated minimum 2D-TTC, the event
count and the covariates of the extremal event.
'''

import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import shapely
from shapely.geometry import Polygon

from .NearMissDetector import NearMissEvent
from .errors import ConfigError, DataError
from .kinematics import ProcessedTrack
from .logger import Logger
from .utils import read_csv, write_csv

logger = Logger("nearmiss.blocks")

KINDS = ('intersection', 'segment')
DIRECTIONS = ('NB', 'SB', 'none')
MEDIANS = ('divided', 'undivided')

GROUP_COVARIATES = ('lane_count', 'lane_width', 'driveway_density', 'median_divided',
                    'is_intersection')
BLOCK_COVARIATES = ('rel_speed', 'rel_acc', 'rel_dec', 'rel_distance', 'jerk', 'heading_diff',
                    'steer_diff', 'volume', 'turn_left', 'turn_right', 'lane_change')
INDICATORS = ('turn_left', 'turn_right', 'lane_change', 'median_divided', 'is_intersection')
BLOCK_COLUMNS = ['kind', 'group_id', 'block_index', 'scenario_id', 'window', 'z', 'y'] \
    + list(GROUP_COVARIATES) + list(BLOCK_COVARIATES)


class OverlappingRegionsError(ConfigError):
    ''' Signifies site map regions that overlap; the message lists the pairs. '''


class SiteMapError(ConfigError):
    ''' Signifies a malformed site map entry. '''


class BlockDataError(DataError):
    ''' Signifies block data that cannot be standardized or parsed. '''


@dataclass(frozen=True)
class GroupSpec():
    group_id: str
    polygon: Polygon
    kind: str = 'segment'
    direction: str = 'none'
    lane_count: float = 2.0
    lane_width: float = 3.6
    driveway_density: float = 0.0
    median: str = 'undivided'

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SiteMapError(f"group {self.group_id}: kind must be one of {KINDS}", self.kind)
        if self.direction not in DIRECTIONS:
            raise SiteMapError(f"group {self.group_id}: direction must be one of {DIRECTIONS}",
                               self.direction)
        if self.median not in MEDIANS:
            raise SiteMapError(f"group {self.group_id}: median must be one of {MEDIANS}", self.median)
        if not (self.polygon.is_valid and self.polygon.area > 0):
            raise SiteMapError(f"group {self.group_id}: region must be a valid polygon")

    @property
    def covariates(self) -> Dict[str, float]:
        return {
            'lane_count': float(self.lane_count),
            'lane_width': float(self.lane_width),
            'driveway_density': float(self.driveway_density),
            'median_divided': float(self.median == 'divided'),
            'is_intersection': float(self.kind == 'intersection'),
        }


@dataclass(frozen=True)
class BlockRecord():
    group_id: str
    block_index: int
    z: float
    y: int
    covariates: Dict[str, float] = field(default_factory=dict)
    kind: str = 'VV'
    scenario_id: str = ''
    window: int = 0

    @property
    def group(self) -> str:
        return self.group_id


@dataclass(frozen=True)
class BlockConfig():
    block_duration: float = 11.0
    min_blocks_per_group: int = 30

    def __post_init__(self):
        # 0 means one block per interaction
        if not self.block_duration >= 0:
            raise ConfigError("block duration must be non-negative", self.block_duration)
        if int(self.min_blocks_per_group) < 1:
            raise ConfigError("min_blocks_per_group must be at least 1", self.min_blocks_per_group)


@dataclass(frozen=True)
class GroupedEvent():
    group_id: str
    event: NearMissEvent


@dataclass
class StandardizationReport():
    ''' Per-covariate (mean, sd) used for scaling, plus the excluded columns. '''

    scales: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    excluded: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {'scales': {k: {'mean': m, 'sd': s} for k, (m, s) in sorted(self.scales.items())},
                'excluded': sorted(self.excluded)}

    @classmethod
    def from_dict(cls, data: Mapping) -> 'StandardizationReport':
        scales = {k: (float(v['mean']), float(v['sd'])) for k, v in data.get('scales', {}).items()}
        return cls(scales, list(data.get('excluded', [])))


#####################################
# SITE MAP                          #
#####################################


def check_overlaps(groups: Sequence[GroupSpec]) -> None:
    '''
    Raise OverlappingRegionsError if any two regions share positive area.
    Regions that only touch along an edge are allowed.

    :param groups: The site map groups.
    '''

    overlaps = []
    for i, a in enumerate(groups):
        for b in groups[i + 1:]:
            if a.polygon.intersection(b.polygon).area > 0:
                overlaps.append((a.group_id, b.group_id))
    if overlaps:
        raise OverlappingRegionsError(f"site map regions overlap: {overlaps}", overlaps)


def load_site_map(path) -> List[GroupSpec]:
    '''
    Read the site map JSON array of
    {group_id, kind, direction, polygon, lane_count, lane_width, driveway_density, median}.

    :param path: Path of the JSON file.
    '''

    try:
        with open(path, 'r') as fh:
            items = json.load(fh)
    except json.JSONDecodeError as error:
        raise SiteMapError(f"{path}:{error.lineno}: invalid site map JSON", error.args)

    groups = []
    for item in items:
        try:
            groups.append(GroupSpec(
                group_id=str(item['group_id']),
                polygon=Polygon(item['polygon']),
                kind=item.get('kind', 'segment'),
                direction=item.get('direction', 'none'),
                lane_count=float(item.get('lane_count', 2)),
                lane_width=float(item.get('lane_width', 3.6)),
                driveway_density=float(item.get('driveway_density', 0.0)),
                median=item.get('median', 'undivided'),
            ))
        except (KeyError, TypeError, ValueError) as error:
            raise SiteMapError(f"{path}: malformed site map entry", error.args)

    if len({g.group_id for g in groups}) != len(groups):
        raise SiteMapError(f"{path}: duplicate group ids")
    check_overlaps(groups)
    return groups


#####################################
# BLOCKS                            #
#####################################


def assign_groups(events: Sequence[NearMissEvent],
                  site_map: Sequence[GroupSpec]) -> Tuple[List[GroupedEvent], int]:
    '''
    Label each event with the group whose region contains its initiating ego
    position. Events outside every region are dropped and counted.

    :param events: Detected events.
    :param site_map: Non-overlapping group regions.
    '''

    check_overlaps(site_map)
    if not events:
        return [], 0

    x = np.array([e.x for e in events])
    y = np.array([e.y for e in events])
    label = np.full(len(events), -1)
    for g, group in enumerate(site_map):
        inside = shapely.intersects_xy(group.polygon, x, y)
        label[(label < 0) & inside] = g

    grouped = [GroupedEvent(site_map[g].group_id, e) for e, g in zip(events, label) if g >= 0]
    dropped = int(np.sum(label < 0))
    if dropped:
        logger.info("events outside every region dropped", {"dropped": dropped, "kept": len(grouped)})
    return grouped, dropped


def _block_covariates(event: NearMissEvent, group: Optional[GroupSpec]) -> Dict[str, float]:
    values = dict(group.covariates) if group is not None else {}
    cov = event.covariates
    rel_a = float(cov.get('rel_accel', 0.0))
    for name in BLOCK_COVARIATES:
        if name == 'rel_acc':
            values[name] = max(rel_a, 0.0)
        elif name == 'rel_dec':
            values[name] = max(-rel_a, 0.0)
        elif name in cov:
            values[name] = float(cov[name])
    return values


def _window_key(item: GroupedEvent, cfg: BlockConfig):
    e = item.event
    if cfg.block_duration > 0:
        return (e.kind, item.group_id, e.scenario_id, int(np.floor(e.block_time / cfg.block_duration)), '', '')
    return (e.kind, item.group_id, e.scenario_id, 0, e.ego_id, e.other_id)


def _extremal_order(item: GroupedEvent):
    e = item.event
    return (e.ttc, e.block_time, e.ego_id, e.other_id, e.j, e.k)


def extract_block_maxima(events: Sequence[GroupedEvent], cfg: BlockConfig,
                         site_map: Sequence[GroupSpec] = ()) -> List[BlockRecord]:
    '''
    Reduce grouped events to block maxima.

    Windows are keyed by (interaction kind, group, recording, floor(t / duration));
    with block_duration 0 every (recording, ego, other) interaction is its own
    block. Each non-empty window yields z = max(-ttc) = -min(ttc), the event
    count y, and the covariates of the event attaining the minimum (group
    covariates from the site map included). Events with ttc <= 0 are skipped.

    :param events: Events labeled by assign_groups.
    :param cfg: Block settings.
    :param site_map: Groups whose fixed covariates are attached to each record.
    '''

    groups = {g.group_id: g for g in site_map}
    windows: Dict[tuple, List[GroupedEvent]] = {}
    for item in events:
        if not item.event.ttc > 0:
            continue
        windows.setdefault(_window_key(item, cfg), []).append(item)

    records = []
    counters: Dict[Tuple[str, str], int] = {}
    for key in sorted(windows):
        members = windows[key]
        extremal = min(members, key=_extremal_order)
        kind, group_id, scenario_id, window = key[:4]
        index = counters.get((kind, group_id), 0)
        counters[(kind, group_id)] = index + 1
        records.append(BlockRecord(
            group_id, index, -float(extremal.event.ttc), len(members),
            _block_covariates(extremal.event, groups.get(group_id)),
            kind, scenario_id, window))
    return records


def small_groups(records: Sequence[BlockRecord], cfg: BlockConfig) -> List[str]:
    '''
    Group ids with fewer than cfg.min_blocks_per_group records. They stay in the
    data; partial pooling borrows strength for them.

    :param records: Block records.
    :param cfg: Block settings.
    '''

    counts: Dict[str, int] = {}
    for r in records:
        counts[r.group_id] = counts.get(r.group_id, 0) + 1
    flagged = sorted(g for g, n in counts.items() if n < cfg.min_blocks_per_group)
    for group_id in flagged:
        logger.warn("group below the minimum block count", {
            "group_id": group_id, "blocks": counts[group_id], "minimum": cfg.min_blocks_per_group})
    return flagged


def standardize_covariates(records: Sequence[BlockRecord],
                           indicators: Sequence[str] = INDICATORS
                           ) -> Tuple[List[BlockRecord], StandardizationReport]:
    '''
    Center continuous covariates and scale them to unit sample standard deviation
    (n - 1 denominator). Indicators are left untouched; zero-variance continuous
    columns are dropped from every record with a warning.

    :param records: Block records of one interaction type.
    :param indicators: Names of 0/1 indicator covariates.
    '''

    if len(records) < 2:
        raise BlockDataError("standardization needs at least two records", len(records))

    frame = pd.DataFrame([r.covariates for r in records])
    report = StandardizationReport()
    for name in sorted(frame.columns):
        if name in indicators:
            continue
        column = frame[name].to_numpy(dtype=float)
        sd = float(np.std(column, ddof=1))
        if not sd > 0:
            report.excluded.append(name)
            logger.warn("zero-variance covariate excluded", {"covariate": name})
            continue
        report.scales[name] = (float(np.mean(column)), sd)

    return apply_standardization(records, report), report


def apply_standardization(records: Sequence[BlockRecord],
                          report: StandardizationReport) -> List[BlockRecord]:
    '''
    Scale records with an existing report (e.g. new blocks scored by a fitted model).

    :param records: Block records in original units.
    :param report: Report produced by standardize_covariates.
    '''

    out = []
    for r in records:
        covariates = {}
        for name, value in r.covariates.items():
            if name in report.excluded:
                continue
            if name in report.scales:
                mean, sd = report.scales[name]
                value = (value - mean) / sd
            covariates[name] = value
        out.append(replace(r, covariates=covariates))
    return out


def destandardize(records: Sequence[BlockRecord], report: StandardizationReport) -> List[BlockRecord]:
    '''
    Map standardized covariates back to original units (excluded columns stay
    excluded).

    :param records: Standardized block records.
    :param report: The report produced by standardize_covariates.
    '''

    out = []
    for r in records:
        covariates = dict(r.covariates)
        for name, (mean, sd) in report.scales.items():
            if name in covariates:
                covariates[name] = covariates[name] * sd + mean
        out.append(replace(r, covariates=covariates))
    return out


def exposure_by_group(scenarios: Mapping[str, Sequence[ProcessedTrack]],
                      site_map: Sequence[GroupSpec]) -> Dict[str, float]:
    '''
    Observed time per group: the summed duration of every recording in which
    at least one vehicle center enters the group's region. A recording lasts
    from its first to its last frame plus one sample period.

    :param scenarios: Processed tracks keyed by scenario id.
    :param site_map: Group regions.
    '''

    exposure = {g.group_id: 0.0 for g in site_map}
    for scenario_id in sorted(scenarios):
        tracks = scenarios[scenario_id]
        if not tracks:
            continue
        x = np.concatenate([tr.x for tr in tracks])
        y = np.concatenate([tr.y for tr in tracks])
        t = np.concatenate([tr.t for tr in tracks])
        period = min(tr.sample_period for tr in tracks if len(tr) > 1) \
            if any(len(tr) > 1 for tr in tracks) else 0.0
        duration = float(t.max() - t.min() + period)
        for group in site_map:
            if np.any(shapely.intersects_xy(group.polygon, x, y)):
                exposure[group.group_id] += duration
    return exposure


class BlockExtractor():
    '''
    Turns detected events into standardized block-maxima records per
    interaction type.
    '''

    def __init__(self, site_map: Sequence[GroupSpec], config: BlockConfig = BlockConfig()):
        '''
        Create a new block extractor.

        :param site_map: Non-overlapping group regions.
        :param config: Block settings.
        '''

        check_overlaps(site_map)
        self.site_map = list(site_map)
        self.config = config
        self.dropped = 0

    def extract(self, events: Sequence[NearMissEvent]) -> List[BlockRecord]:
        '''
        Assign groups and extract block maxima (unstandardized).

        :param events: Detected events.
        '''

        grouped, self.dropped = assign_groups(events, self.site_map)
        records = extract_block_maxima(grouped, self.config, self.site_map)
        logger.info("block maxima extracted", {
            "events": len(grouped), "dropped": self.dropped, "blocks": len(records)})
        small_groups(records, self.config)
        return records


#####################################
# FILE INPUT AND OUTPUT             #
#####################################


def blocks_frame(records: Sequence[BlockRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        row = {'kind': r.kind, 'group_id': r.group_id, 'block_index': r.block_index,
               'scenario_id': r.scenario_id, 'window': r.window, 'z': r.z, 'y': r.y}
        row.update({name: r.covariates.get(name, np.nan)
                    for name in GROUP_COVARIATES + BLOCK_COVARIATES})
        rows.append(row)
    return pd.DataFrame(rows, columns=BLOCK_COLUMNS)


def write_blocks(path, records: Sequence[BlockRecord], comment: Optional[str] = None) -> None:
    '''
    Write block records as CSV with BLOCK_COLUMNS; absent covariates are empty.

    :param path: Output path.
    :param records: Block records.
    :param comment: Optional provenance line.
    '''

    write_csv(path, blocks_frame(records), comment)


def read_blocks(path, kind: Optional[str] = None) -> List[BlockRecord]:
    '''
    Read block records written by write_blocks.

    :param path: Path of the CSV file.
    :param kind: Keep only this interaction kind ("VV" or "VI"); None keeps all.
    '''

    frame = read_csv(path, dtype={'group_id': str, 'scenario_id': str, 'kind': str})
    missing = [c for c in ('kind', 'group_id', 'z', 'y') if c not in frame.columns]
    if missing:
        raise BlockDataError(f"{path}:1: missing block columns {missing}")

    covariate_columns = [c for c in frame.columns if c in GROUP_COVARIATES + BLOCK_COVARIATES]
    records = []
    for row in frame.itertuples(index=False):
        if kind is not None and row.kind != kind:
            continue
        covariates = {c: float(getattr(row, c)) for c in covariate_columns
                      if not pd.isna(getattr(row, c))}
        scenario = getattr(row, 'scenario_id', '')
        records.append(BlockRecord(
            str(row.group_id), int(getattr(row, 'block_index', 0)), float(row.z), int(row.y),
            covariates, str(row.kind), '' if pd.isna(scenario) else str(scenario),
            int(getattr(row, 'window', 0))))
    return records


def write_report(path, report: StandardizationReport) -> None:
    with open(path, 'w') as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write('\n')


def read_report(path) -> StandardizationReport:
    with open(path, 'r') as fh:
        return StandardizationReport.from_dict(json.load(fh))
