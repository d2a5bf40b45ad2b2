'''
Forward-simulated 2D time-to-collision detection.

Every interaction is simulated over a short horizon with the kinematic bicycle
model while holding the initiating frame's controls. After each step the
vehicle footprints are checked for corner proximity against each other (V-V)
and against densified road boundaries (V-I); the earliest hit gives the
collision time t_c, reported as the 2D-TTC.
'''

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import shapely
from shapely.geometry import LineString

from .dynamics import (DEFAULT_VEHICLE, ControlInput, IntegrationConfig, IntegrationDivergedError,
                       VehicleSpec, VehicleState, integrate_vehicle)
from .errors import ConfigError, DataError
from .geometry import (BoundaryError, BoundaryPolyline, CornerSet, boundary_tangent,
                       corners_array, densify, nearest_vertex)
from .kinematics import ProcessedTrack
from .logger import Logger
from .utils import read_csv, wrap_angle, write_csv

logger = Logger("nearmiss.detection")

VV, VI = 'VV', 'VI'
RULES = ('AND', 'OR')

COVARIATES = ('rel_speed', 'rel_accel', 'rel_distance', 'jerk', 'heading_diff',
              'steer_diff', 'volume', 'turn_left', 'turn_right', 'lane_change')
EVENT_COLUMNS = ['kind', 'frame_t', 'ego', 'other', 't_c', 'ttc', 'j', 'k_or_l',
                 'scenario_id', 'x', 'y'] + list(COVARIATES)

# net heading change over a track that marks it as a turning movement
TURN_THRESHOLD = np.pi / 6
# lateral shift across the initial heading, without a turn, that marks a lane change
LANE_CHANGE_OFFSET = 2.0
# frame times are matched across tracks on a microsecond grid
_TIME_KEY_SCALE = 1e6


class DetectionConfigError(ConfigError):
    ''' Signifies an invalid proximity threshold, rule or gating radius. '''


class ScanError(DataError):
    ''' Signifies a failure while scanning a scenario; the message names it. '''


@dataclass(frozen=True)
class DetectionConfig():
    epsilon: float = 0.30
    horizon: IntegrationConfig = IntegrationConfig()
    vv_rule: str = 'AND'
    vv_gate: float = 50.0
    vi_gate: float = 15.0
    densify_spacing: float = 0.25

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DetectionConfigError("proximity threshold epsilon must be positive", self.epsilon)
        if self.vv_rule not in RULES:
            raise DetectionConfigError(f"vv_rule must be one of {RULES}", self.vv_rule)
        if not (self.vv_gate > 0 and self.vi_gate > 0):
            raise DetectionConfigError("gating radii must be positive", self.vv_gate, self.vi_gate)
        if not self.densify_spacing > 0:
            raise DetectionConfigError("densify spacing must be positive", self.densify_spacing)


@dataclass(frozen=True)
class NearMissEvent():
    '''
    One detected near miss. Corner indices j (ego) and k (other corner or
    boundary vertex) are 1-based. block_time is the timestamp of the
    initiating frame and (x, y) the ego center there.
    '''

    kind: str
    t_c: float
    ttc: float
    ego_id: str
    other_id: str
    j: int
    k: int
    block_time: float = 0.0
    scenario_id: str = ''
    x: float = 0.0
    y: float = 0.0
    covariates: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Agent():
    ''' A vehicle at its initiating frame: identity, pose, held controls and footprint. '''

    agent_id: str
    state: VehicleState
    control: ControlInput = ControlInput()
    spec: VehicleSpec = DEFAULT_VEHICLE


#####################################
# PROXIMITY CHECKS                  #
#####################################


def _first_vv(corners_a: np.ndarray, corners_b: np.ndarray, epsilon: float,
              rule: str) -> Optional[Tuple[int, int, int]]:
    '''
    First (step, j, k) with corner proximity, 0-based, scanning steps outer
    then (j, k) in row-major order. Inputs have shape (N, 4, 2).
    '''

    gap = np.abs(corners_a[:, :, None, :] - corners_b[:, None, :, :]) <= epsilon
    hit = gap.all(axis=-1) if rule == 'AND' else gap.any(axis=-1)
    flat = hit.reshape(-1)
    if not flat.any():
        return None
    idx = int(np.argmax(flat))
    return idx // 16, (idx % 16) // 4, idx % 4


def _first_vi(corners: np.ndarray, points: np.ndarray,
              epsilon: float) -> Optional[Tuple[int, int, int]]:
    '''
    First (step, corner, vertex) with Euclidean distance <= epsilon, 0-based,
    scanning steps outer, corners, then vertices. corners has shape (N, 4, 2).
    '''

    dist = np.linalg.norm(corners[:, :, None, :] - points[None, None, :, :], axis=-1)
    flat = (dist <= epsilon).reshape(-1)
    if not flat.any():
        return None
    idx = int(np.argmax(flat))
    m = len(points)
    return idx // (4 * m), (idx % (4 * m)) // m, idx % m


def _points(corners) -> np.ndarray:
    return corners.points if isinstance(corners, CornerSet) else np.asarray(corners, dtype=float)


def check_vv(corners_a, corners_b, cfg: DetectionConfig) -> Optional[Tuple[int, int]]:
    '''
    Scan the 16 corner pairs in row-major (j, k) order and return the first
    1-based pair whose coordinate gaps satisfy the configured rule (both gaps
    <= epsilon under AND, either under OR), or None.

    :param corners_a: Corners of vehicle A.
    :param corners_b: Corners of vehicle B.
    :param cfg: Detection settings (epsilon and vv_rule).
    '''

    found = _first_vv(_points(corners_a)[None], _points(corners_b)[None], cfg.epsilon, cfg.vv_rule)
    return None if found is None else (found[1] + 1, found[2] + 1)


def check_vi(corners, boundary: BoundaryPolyline, epsilon: float) -> Optional[Tuple[int, int]]:
    '''
    Return the first 1-based (corner, vertex) pair within epsilon meters,
    scanning corners outer and vertices inner, or None.

    :param corners: Vehicle corners.
    :param boundary: The boundary polyline.
    :param epsilon: Proximity threshold in meters.
    '''

    found = _first_vi(_points(corners)[None], boundary.points, epsilon)
    return None if found is None else (found[1] + 1, found[2] + 1)


def _trajectory_corners(states: np.ndarray, controls: np.ndarray, specs: Sequence[VehicleSpec],
                        horizon: IntegrationConfig) -> np.ndarray:
    wheelbase = np.array([s.wheelbase for s in specs])
    length = np.array([s.length for s in specs])[:, None]
    width = np.array([s.width for s in specs])[:, None]
    path = integrate_vehicle(states, controls, wheelbase, horizon)
    # steps 1..N only; index 0 is the observed frame
    return corners_array(path[:, 1:, 0], path[:, 1:, 1], path[:, 1:, 2], length, width)


def detect(ego: Agent, other: Optional[Agent], boundaries: Sequence[BoundaryPolyline],
           cfg: DetectionConfig) -> Optional[NearMissEvent]:
    '''
    Simulate one interaction and return its earliest near miss, or None.

    After each step n = 0..N-1 the pair is checked for V-V proximity, then
    the ego for V-I proximity against every boundary in order; the earliest
    step wins, V-V before V-I at equal steps. t_c = (n + 1) * dt.

    :param ego: The ego vehicle.
    :param other: The other vehicle of a V-V pair, or None for a V-I case.
    :param boundaries: Road boundaries (densified).
    :param cfg: Detection settings.
    '''

    agents = [ego] if other is None else [ego, other]
    states = np.stack([a.state.as_array() for a in agents])
    controls = np.stack([a.control.as_array() for a in agents])
    corners = _trajectory_corners(states, controls, [a.spec for a in agents], cfg.horizon)

    best = None
    if other is not None:
        found = _first_vv(corners[0], corners[1], cfg.epsilon, cfg.vv_rule)
        if found is not None:
            best = (found[0], 0, VV, other.agent_id, found[1], found[2])

    for order, boundary in enumerate(boundaries, start=1):
        found = _first_vi(corners[0], boundary.points, cfg.epsilon)
        if found is not None and (best is None or (found[0], order) < best[:2]):
            best = (found[0], order, VI, boundary.boundary_id, found[1], found[2])

    if best is None:
        return None

    step, _, kind, other_id, j, k = best
    t_c = (step + 1) * cfg.horizon.dt
    return NearMissEvent(kind, t_c, t_c, ego.agent_id, other_id, j + 1, k + 1,
                         x=ego.state.x, y=ego.state.y)


#####################################
# SCENARIO SCAN                     #
#####################################


@dataclass
class _TrackPlan():
    track: ProcessedTrack
    keys: np.ndarray
    index: Dict[int, int]
    corners: np.ndarray  # (F, N, 4, 2) simulated footprints per frame
    jerk: np.ndarray
    turn_left: float
    turn_right: float
    lane_change: float


def _frame_keys(t: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(t) * _TIME_KEY_SCALE).astype(np.int64)


def _plan(track: ProcessedTrack, horizon: IntegrationConfig) -> _TrackPlan:
    states = np.column_stack([track.x, track.y, track.theta, track.v])
    controls = np.column_stack([track.a, track.delta])
    path = integrate_vehicle(states, controls, track.spec.wheelbase, horizon)
    corners = corners_array(path[:, 1:, 0], path[:, 1:, 1], path[:, 1:, 2],
                            track.spec.length, track.spec.width)

    jerk = np.zeros(len(track))
    if len(track) > 1:
        jerk[:-1] = np.diff(track.a) / track.sample_period
        jerk[-1] = jerk[-2] if len(track) > 2 else 0.0

    turn = float(track.theta[-1] - track.theta[0])
    keys = _frame_keys(track.t)
    return _TrackPlan(track, keys, {int(k): i for i, k in enumerate(keys)}, corners, jerk,
                      float(turn > TURN_THRESHOLD), float(turn < -TURN_THRESHOLD),
                      float(abs(turn) <= TURN_THRESHOLD and abs(lateral_shift(track)) >= LANE_CHANGE_OFFSET))


def lateral_shift(track: ProcessedTrack) -> float:
    '''
    Signed displacement of the track's last position across its initial heading
    (positive to the left).

    :param track: A processed track.
    '''

    theta0 = track.theta[0]
    return float(-(track.x[-1] - track.x[0]) * np.sin(theta0) + (track.y[-1] - track.y[0]) * np.cos(theta0))


def _velocity(track: ProcessedTrack, i: int) -> np.ndarray:
    return track.v[i] * np.array([np.cos(track.theta[i]), np.sin(track.theta[i])])


def _vv_covariates(a: _TrackPlan, i: int, b: _TrackPlan, m: int, volume: int) -> Dict[str, float]:
    ta, tb = a.track, b.track
    return {
        'rel_speed': float(np.linalg.norm(_velocity(ta, i) - _velocity(tb, m))),
        'rel_accel': float(ta.a[i] - tb.a[m]),
        'rel_distance': float(np.hypot(ta.x[i] - tb.x[m], ta.y[i] - tb.y[m])),
        'jerk': float(a.jerk[i]),
        'heading_diff': float(wrap_angle(ta.theta[i] - tb.theta[m])),
        'steer_diff': float(ta.delta[i] - tb.delta[m]),
        'volume': float(volume),
        'turn_left': a.turn_left,
        'turn_right': a.turn_right,
        'lane_change': a.lane_change,
    }


def _vi_covariates(a: _TrackPlan, i: int, boundary: BoundaryPolyline, volume: int) -> Dict[str, float]:
    ta = a.track
    here = corners_array(ta.x[i], ta.y[i], ta.theta[i], ta.spec.length, ta.spec.width)
    vertex, distance = nearest_vertex(here, boundary)
    return {
        'rel_speed': float(ta.v[i]),
        'rel_accel': float(ta.a[i]),
        'rel_distance': distance,
        'jerk': float(a.jerk[i]),
        'heading_diff': float(wrap_angle(ta.theta[i] - boundary_tangent(boundary, vertex))),
        'steer_diff': float(ta.delta[i]),
        'volume': float(volume),
        'turn_left': a.turn_left,
        'turn_right': a.turn_right,
        'lane_change': a.lane_change,
    }


def _scan_ego(ego: int, plans: List[_TrackPlan], boundaries: Sequence[BoundaryPolyline],
              volumes: Dict[int, int], cfg: DetectionConfig, scenario_id: str) -> List[NearMissEvent]:
    '''
    Events with `plans[ego]` as ego: V-V against every later plan, V-I for the
    ego alone. Boundary conflicts of any other vehicle come from its own call,
    so callers must scan every plan as ego.
    '''

    a = plans[ego]
    ta = a.track
    dt = cfg.horizon.dt
    events = []

    for other in plans[ego + 1:]:
        tb = other.track
        common = [(a.index[int(k)], other.index[int(k)]) for k in a.keys if int(k) in other.index]
        for i, m in common:
            if np.hypot(ta.x[i] - tb.x[m], ta.y[i] - tb.y[m]) > cfg.vv_gate:
                continue
            found = _first_vv(a.corners[i], other.corners[m], cfg.epsilon, cfg.vv_rule)
            if found is None:
                continue
            t_c = (found[0] + 1) * dt
            events.append(NearMissEvent(
                VV, t_c, t_c, ta.agent_id, tb.agent_id, found[1] + 1, found[2] + 1,
                float(ta.t[i]), scenario_id, float(ta.x[i]), float(ta.y[i]),
                _vv_covariates(a, i, other, m, volumes[int(a.keys[i])])))

    centers = shapely.points(ta.x, ta.y)
    for boundary in boundaries:
        near = shapely.distance(centers, LineString(boundary.points)) <= cfg.vi_gate
        for i in np.flatnonzero(near):
            found = _first_vi(a.corners[i], boundary.points, cfg.epsilon)
            if found is None:
                continue
            t_c = (found[0] + 1) * dt
            events.append(NearMissEvent(
                VI, t_c, t_c, ta.agent_id, boundary.boundary_id, found[1] + 1, found[2] + 1,
                float(ta.t[i]), scenario_id, float(ta.x[i]), float(ta.y[i]),
                _vi_covariates(a, int(i), boundary, volumes[int(a.keys[i])])))
    return events


def _scan_ego_star(args) -> List[NearMissEvent]:
    return _scan_ego(*args)


def event_sort_key(event: NearMissEvent):
    return (event.scenario_id, event.block_time, event.ego_id, event.kind, event.other_id)


def scan_scenario(tracks: Sequence[ProcessedTrack], boundaries: Sequence[BoundaryPolyline],
                  cfg: DetectionConfig, scenario_id: str = '', jobs: int = 1) -> List[NearMissEvent]:
    '''
    Detect near misses for every observation frame of a scenario.

    Every unordered vehicle pair whose centers are within the V-V gating radius
    and every vehicle-boundary combination within the V-I gating radius is
    simulated from that frame; each yields at most one event (its earliest
    hit). The ego of a pair is the agent with the smaller id. Output is sorted
    by (frame, ego, other) and does not depend on the worker count.

    :param tracks: Processed tracks of one scenario, time-aligned.
    :param boundaries: Densified road boundaries.
    :param cfg: Detection settings.
    :param scenario_id: Recording identifier copied onto each event.
    :param jobs: Worker processes; 1 scans in-process.
    '''

    tracks = sorted(tracks, key=lambda tr: tr.agent_id)
    try:
        plans = [_plan(track, cfg.horizon) for track in tracks]
    except IntegrationDivergedError as error:
        raise IntegrationDivergedError(f"scenario {scenario_id!r}: {error.args[0]}", *error.args[1:])

    volumes: Dict[int, int] = {}
    for plan in plans:
        for key in plan.keys:
            volumes[int(key)] = volumes.get(int(key), 0) + 1

    work = [(ego, plans, boundaries, volumes, cfg, scenario_id) for ego in range(len(plans))]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            batches = list(pool.map(_scan_ego_star, work))
    else:
        batches = [_scan_ego_star(item) for item in work]

    events = sorted((e for batch in batches for e in batch), key=event_sort_key)
    logger.info("scenario scanned", {
        "scenario_id": scenario_id, "tracks": len(plans), "events": len(events),
        "vv_events": sum(e.kind == VV for e in events),
    })
    return events


class NearMissDetector():
    '''
    Scans scenarios for V-V and V-I near misses against a fixed set of road
    boundaries.
    '''

    def __init__(self, config: DetectionConfig = DetectionConfig(),
                 boundaries: Sequence[BoundaryPolyline] = (), jobs: int = 1):
        '''
        Create a new detector.

        :param config: Detection settings.
        :param boundaries: Road boundaries; densified here to the configured spacing.
        :param jobs: Worker processes used per scenario.
        '''

        self.config = config
        self.boundaries = [densify(b, config.densify_spacing) for b in boundaries]
        self.jobs = max(1, int(jobs))

    def scan(self, tracks: Sequence[ProcessedTrack], scenario_id: str = '') -> List[NearMissEvent]:
        '''
        Detect every near miss of one scenario (see scan_scenario).

        :param tracks: Processed tracks of the scenario.
        :param scenario_id: Recording identifier.
        '''

        return scan_scenario(tracks, self.boundaries, self.config, scenario_id, self.jobs)

    def scan_all(self, scenarios: Dict[str, Sequence[ProcessedTrack]]) -> List[NearMissEvent]:
        '''
        Scan several scenarios, in scenario id order.

        :param scenarios: Processed tracks keyed by scenario id.
        '''

        events = []
        for scenario_id in sorted(scenarios):
            events.extend(self.scan(scenarios[scenario_id], scenario_id))
        return events


#####################################
# FILE INPUT AND OUTPUT             #
#####################################


def read_boundaries(path) -> List[BoundaryPolyline]:
    '''
    Read road boundaries from a JSON array of {id, kind, points: [[x, y], ...]}.

    :param path: Path of the JSON file.
    '''

    try:
        with open(path, 'r') as fh:
            items = json.load(fh)
    except json.JSONDecodeError as error:
        raise BoundaryError(f"{path}:{error.lineno}: invalid boundary JSON", error.args)

    if not isinstance(items, list):
        raise BoundaryError(f"{path}: boundaries must be a JSON array")

    boundaries = []
    for item in items:
        try:
            boundaries.append(BoundaryPolyline(str(item['id']), item['points'],
                                               item.get('kind', 'lane-edge')))
        except (KeyError, TypeError, ValueError) as error:
            raise BoundaryError(f"{path}: malformed boundary entry", error.args)
    return boundaries


def events_frame(events: Sequence[NearMissEvent]) -> pd.DataFrame:
    rows = []
    for e in events:
        row = {'kind': e.kind, 'frame_t': e.block_time, 'ego': e.ego_id, 'other': e.other_id,
               't_c': e.t_c, 'ttc': e.ttc, 'j': e.j, 'k_or_l': e.k,
               'scenario_id': e.scenario_id, 'x': e.x, 'y': e.y}
        row.update({name: e.covariates.get(name, np.nan) for name in COVARIATES})
        rows.append(row)
    return pd.DataFrame(rows, columns=EVENT_COLUMNS)


def write_events(path, events: Sequence[NearMissEvent], comment: Optional[str] = None) -> None:
    '''
    Write events as CSV with EVENT_COLUMNS.

    :param path: Output path.
    :param events: The events to write.
    :param comment: Optional provenance line written first as "# <comment>".
    '''

    write_csv(path, events_frame(events), comment)


def read_events(path) -> List[NearMissEvent]:
    '''
    Read events written by write_events.

    :param path: Path of the CSV file.
    '''

    frame = read_csv(path, dtype={'ego': str, 'other': str, 'scenario_id': str})
    missing = [c for c in EVENT_COLUMNS[:8] if c not in frame.columns]
    if missing:
        raise ScanError(f"{path}:1: missing event columns {missing}")

    events = []
    for row in frame.itertuples(index=False):
        covariates = {name: float(getattr(row, name)) for name in COVARIATES if name in frame.columns}
        scenario = getattr(row, 'scenario_id', '')
        events.append(NearMissEvent(
            str(row.kind), float(row.t_c), float(row.ttc), str(row.ego), str(row.other),
            int(row.j), int(row.k_or_l), float(row.frame_t),
            '' if pd.isna(scenario) else str(scenario),
            float(getattr(row, 'x', 0.0)), float(getattr(row, 'y', 0.0)), covariates))
    return events
