'''
Trajectory cleaning and per-frame vehicle dynamics.

Raw tracks are smoothed with a clamped least-squares cubic B-spline, speed is
filtered with a Savitzky-Golay filter, and acceleration, heading, yaw rate and
steering angle are derived by forward differences.
'''

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.interpolate import make_lsq_spline
from scipy.signal import savgol_coeffs, savgol_filter

from .dynamics import DEFAULT_VEHICLE, VehicleSpec
from .errors import ConfigError, DataError
from .logger import Logger
from .utils import write_csv

logger = Logger("nearmiss.kinematics")

MIN_FRAMES = 5
SPACING_TOLERANCE = 1e-9
# keeps derived steering strictly inside the bicycle model's (-pi/2, pi/2)
MAX_STEER = np.pi / 2 - 1e-3

TRACK_COLUMNS = ['agent_id', 't', 'x', 'y', 'vx', 'vy']
VEHICLE_COLUMNS = ['agent_id', 'length', 'width', 'wheelbase']
PROCESSED_COLUMNS = TRACK_COLUMNS + ['v', 'a', 'theta', 'yaw_rate', 'delta']


class TrackTooShortError(DataError):
    ''' Signifies a track with fewer frames than smoothing needs. '''


class InvalidTrackError(DataError):
    ''' Signifies a track with non-increasing or non-uniform timestamps. '''


class MalformedRowError(DataError):
    ''' Signifies an unparseable CSV row; the message names file:line. '''


class InvalidFilterError(ConfigError):
    ''' Signifies an invalid smoothing or filter configuration. '''


@dataclass(frozen=True)
class RawTrack():
    agent_id: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        for field in ('t', 'x', 'y', 'vx', 'vy'):
            object.__setattr__(self, field, np.asarray(getattr(self, field), dtype=float))

    def __len__(self) -> int:
        return len(self.t)

    @property
    def sample_period(self) -> float:
        return float((self.t[-1] - self.t[0]) / (len(self.t) - 1))

    def validate(self) -> 'RawTrack':
        '''
        Check the frame invariants: at least five frames, strictly increasing
        and uniformly spaced timestamps, and matching column lengths.
        '''

        if len(self.t) < MIN_FRAMES:
            raise TrackTooShortError(
                f"track {self.agent_id} has {len(self.t)} frames, needs {MIN_FRAMES}")
        if any(len(getattr(self, f)) != len(self.t) for f in ('x', 'y', 'vx', 'vy')):
            raise InvalidTrackError(f"track {self.agent_id} has ragged columns")

        steps = np.diff(self.t)
        if np.any(steps <= 0):
            raise InvalidTrackError(f"track {self.agent_id} timestamps are not strictly increasing")
        if np.max(np.abs(steps - self.sample_period)) > SPACING_TOLERANCE:
            raise InvalidTrackError(f"track {self.agent_id} timestamps are not uniformly spaced")
        return self


@dataclass(frozen=True)
class ProcessedTrack():
    agent_id: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    v: np.ndarray
    a: np.ndarray
    theta: np.ndarray
    yaw_rate: np.ndarray
    delta: np.ndarray
    spec: VehicleSpec = DEFAULT_VEHICLE

    def __len__(self) -> int:
        return len(self.t)

    @property
    def sample_period(self) -> float:
        return float((self.t[-1] - self.t[0]) / (len(self.t) - 1))


@dataclass(frozen=True)
class KinematicsConfig():
    control_point_spacing: int = 5
    sg_window: int = 109
    sg_order: int = 2
    min_speed: float = 0.1
    min_travel: float = 1.0


def smooth_positions(track: RawTrack, control_point_spacing: int = 5) -> RawTrack:
    '''
    Replace x and y by a least-squares cubic B-spline evaluated at the original
    timestamps. Knots are clamped at both ends and spread uniformly in time,
    with one control point per control_point_spacing frames (at least four).

    :param track: The raw track.
    :param control_point_spacing: Frames per spline control point (>= 2).
    '''

    track.validate()
    if int(control_point_spacing) < 2:
        raise InvalidFilterError("control point spacing must be at least 2 frames",
                                 control_point_spacing)

    n_ctrl = max(4, len(track) // int(control_point_spacing))
    # relative time keeps the collocation matrix well conditioned
    s = track.t - track.t[0]
    interior = np.linspace(s[0], s[-1], n_ctrl - 2)[1:-1]
    knots = np.concatenate([[s[0]] * 4, interior, [s[-1]] * 4])

    x = make_lsq_spline(s, track.x, knots, k=3)(s)
    y = make_lsq_spline(s, track.y, knots, k=3)(s)
    return replace(track, x=x, y=y)


def derive_speed(track: RawTrack) -> np.ndarray:
    '''
    Per-frame speed, the Euclidean norm of the velocity components.

    :param track: The raw track.
    '''

    return np.hypot(track.vx, track.vy)


def sg_filter(signal, window: int, poly_order: int) -> np.ndarray:
    '''
    Savitzky-Golay filter. Interior samples take the center value of the local
    least-squares polynomial over the full window; the first and last
    window // 2 samples use windows truncated at the signal edge.

    Signals shorter than the window use the largest odd window that fits.

    :param signal: The samples to filter.
    :param window: Odd window length in frames.
    :param poly_order: Polynomial order (< window).
    '''

    signal = np.asarray(signal, dtype=float)
    window = int(window)
    poly_order = int(poly_order)

    if window < 1 or window % 2 == 0:
        raise InvalidFilterError("Savitzky-Golay window must be a positive odd integer", window)
    if poly_order < 0 or poly_order >= window:
        raise InvalidFilterError("polynomial order must be below the window length",
                                 poly_order, window)

    n = len(signal)
    if n == 0:
        return signal.copy()
    if window > n:
        window = n if n % 2 == 1 else n - 1
    order = min(poly_order, window - 1)
    if window == 1:
        return signal.copy()

    out = savgol_filter(signal, window, order, mode='interp')
    half = window // 2
    for i in range(min(half, n)):
        # left edge: samples 0..i+half, evaluated at position i
        length = min(i + half + 1, n)
        coeffs = savgol_coeffs(length, min(order, length - 1), pos=i, use='dot')
        out[i] = coeffs @ signal[:length]

        # right edge mirrors the left one
        j = n - 1 - i
        start = max(j - half, 0)
        coeffs = savgol_coeffs(n - start, min(order, n - start - 1), pos=j - start, use='dot')
        out[j] = coeffs @ signal[start:]
    return out


def _headings(track: RawTrack, v: np.ndarray, min_speed: float) -> np.ndarray:
    raw = np.arctan2(track.vy, track.vx)
    moving = v >= min_speed
    if not np.any(moving):
        return np.zeros(len(track))

    # hold the last moving heading through stops, back-fill the leading stop
    idx = np.where(moving, np.arange(len(track)), -1)
    idx = np.maximum.accumulate(idx)
    idx[idx < 0] = int(np.argmax(moving))
    return np.unwrap(raw[idx])


def _forward_difference(values: np.ndarray, dt: float) -> np.ndarray:
    out = np.empty_like(values)
    out[:-1] = np.diff(values) / dt
    out[-1] = out[-2]
    return out


def derive_dynamics(track: RawTrack, wheelbase: float, speed: Optional[np.ndarray] = None,
                    spec: Optional[VehicleSpec] = None, min_speed: float = 0.1) -> ProcessedTrack:
    '''
    Derive speed, acceleration, unwrapped heading, yaw rate and steering angle
    per frame.

    Acceleration and yaw rate are forward differences (the last frame repeats
    the previous value); steering is atan(L * yaw_rate / v), and 0 wherever
    v < min_speed.

    :param track: The (smoothed) raw track.
    :param wheelbase: Vehicle wheelbase L in meters.
    :param speed: Optional pre-filtered speed; defaults to derive_speed(track).
    :param spec: Vehicle dimensions stored on the result.
    :param min_speed: Speed below which heading and steering are unobservable.
    '''

    track.validate()
    if not wheelbase > 0:
        raise InvalidFilterError("wheelbase must be positive", wheelbase)

    v = derive_speed(track) if speed is None else np.asarray(speed, dtype=float)
    v = np.maximum(v, 0.0)
    dt = track.sample_period

    a = _forward_difference(v, dt)
    theta = _headings(track, v, min_speed)
    yaw_rate = _forward_difference(theta, dt)

    delta = np.zeros(len(track))
    moving = v >= min_speed
    delta[moving] = np.arctan(wheelbase * yaw_rate[moving] / v[moving])
    delta = np.clip(delta, -MAX_STEER, MAX_STEER)

    if spec is None:
        spec = replace(DEFAULT_VEHICLE, wheelbase=wheelbase) \
            if wheelbase <= DEFAULT_VEHICLE.length else VehicleSpec(wheelbase, wheelbase, DEFAULT_VEHICLE.width)

    return ProcessedTrack(track.agent_id, track.t, track.x, track.y, track.vx, track.vy,
                          v, a, theta, yaw_rate, delta, spec)


def is_stationary(track: RawTrack, min_travel: float = 1.0) -> bool:
    '''
    True when the track's total path length stays below min_travel meters.

    :param track: The raw track.
    :param min_travel: Minimum travel in meters for an agent to count as moving.
    '''

    return float(np.sum(np.hypot(np.diff(track.x), np.diff(track.y)))) < min_travel


class TrackProcessor():
    '''
    Runs the preprocessing chain on raw tracks: B-spline position smoothing,
    Savitzky-Golay speed filtering and dynamics derivation.
    '''

    def __init__(self, config: KinematicsConfig = KinematicsConfig()):
        '''
        Create a new track processor.

        :param config: Smoothing and filter settings.
        '''

        self.config = config

    def process(self, track: RawTrack, spec: VehicleSpec = DEFAULT_VEHICLE) -> ProcessedTrack:
        '''
        Process one raw track.

        :param track: The raw track.
        :param spec: Dimensions of the vehicle that produced the track.
        '''

        smoothed = smooth_positions(track, self.config.control_point_spacing)
        speed = sg_filter(derive_speed(smoothed), self.config.sg_window, self.config.sg_order)
        return derive_dynamics(smoothed, spec.wheelbase, speed=speed, spec=spec,
                               min_speed=self.config.min_speed)

    def process_all(self, tracks: List[RawTrack],
                    vehicles: Dict[str, VehicleSpec]) -> List[ProcessedTrack]:
        '''
        Process every moving track; stationary agents are skipped.

        :param tracks: Raw tracks of one scenario.
        :param vehicles: Dimension table keyed by agent id.
        '''

        processed = []
        for track in tracks:
            if is_stationary(track, self.config.min_travel):
                logger.debug("skipping stationary agent", {"agent_id": track.agent_id})
                continue
            processed.append(self.process(track, vehicles.get(track.agent_id, DEFAULT_VEHICLE)))
        return processed


#####################################
# FILE INPUT AND OUTPUT             #
#####################################


def _line_of(path, row: int) -> int:
    '''
    Physical 1-based line number of data row `row` in a CSV read with
    comment='#': comment and blank lines are counted, the header is skipped.
    '''

    try:
        with open(path, encoding='utf-8', errors='replace') as fh:
            lines = [n for n, text in enumerate(fh, start=1)
                     if text.strip() and not text.lstrip().startswith('#')]
    except OSError:
        lines = []
    return lines[row + 1] if row + 1 < len(lines) else row + 2


def _check_numeric(frame: pd.DataFrame, columns: List[str], path) -> pd.DataFrame:
    numeric = frame[columns].apply(pd.to_numeric, errors='coerce')
    bad = numeric.isna().any(axis=1) | ~np.isfinite(numeric.fillna(0.0)).all(axis=1)
    if bad.any():
        line = _line_of(path, int(np.argmax(bad.to_numpy())))
        raise MalformedRowError(f"{path}:{line}: non-numeric or missing value in {columns}")
    frame = frame.copy()
    frame[columns] = numeric
    return frame


def read_tracks(path) -> List[RawTrack]:
    '''
    Read a trajectory CSV (agent_id,t,x,y,vx,vy) into raw tracks, one per
    agent, ordered by agent id then time.

    :param path: Path of the CSV file.
    '''

    try:
        frame = pd.read_csv(path, dtype={'agent_id': str}, comment='#')
    except (pd.errors.ParserError, UnicodeDecodeError) as error:
        raise MalformedRowError(f"{path}: failed to parse trajectory CSV", error.args)

    missing = [c for c in TRACK_COLUMNS if c not in frame.columns]
    if missing:
        raise MalformedRowError(f"{path}:{_line_of(path, -1)}: missing columns {missing}")
    if frame['agent_id'].isna().any():
        line = _line_of(path, int(np.argmax(frame['agent_id'].isna().to_numpy())))
        raise MalformedRowError(f"{path}:{line}: missing agent_id")

    frame = _check_numeric(frame, TRACK_COLUMNS[1:], path)
    tracks = []
    for agent_id, rows in frame.sort_values(['agent_id', 't'], kind='mergesort').groupby('agent_id', sort=True):
        tracks.append(RawTrack(str(agent_id), rows['t'].to_numpy(), rows['x'].to_numpy(),
                               rows['y'].to_numpy(), rows['vx'].to_numpy(), rows['vy'].to_numpy()))
    return tracks


def read_vehicle_table(path) -> Dict[str, VehicleSpec]:
    '''
    Read the vehicle dimension table (agent_id,length,width,wheelbase).

    :param path: Path of the CSV file; a missing path yields an empty table.
    '''

    if path is None or not Path(path).exists():
        return {}

    frame = pd.read_csv(path, dtype={'agent_id': str}, comment='#')
    missing = [c for c in VEHICLE_COLUMNS if c not in frame.columns]
    if missing:
        raise MalformedRowError(f"{path}:{_line_of(path, -1)}: missing columns {missing}")
    frame = _check_numeric(frame, VEHICLE_COLUMNS[1:], path)

    table = {}
    for i, row in enumerate(frame.itertuples(index=False)):
        try:
            table[str(row.agent_id)] = VehicleSpec(float(row.wheelbase), float(row.length), float(row.width))
        except ConfigError as error:
            raise MalformedRowError(f"{path}:{_line_of(path, i)}: invalid vehicle dimensions", error.args)
    return table


def processed_frame(tracks: List[ProcessedTrack]) -> pd.DataFrame:
    '''
    Flatten processed tracks into one table with PROCESSED_COLUMNS.

    :param tracks: The processed tracks.
    '''

    parts = []
    for track in tracks:
        parts.append(pd.DataFrame({
            'agent_id': track.agent_id, 't': track.t, 'x': track.x, 'y': track.y,
            'vx': track.vx, 'vy': track.vy, 'v': track.v, 'a': track.a,
            'theta': track.theta, 'yaw_rate': track.yaw_rate, 'delta': track.delta,
        }))
    if not parts:
        return pd.DataFrame(columns=PROCESSED_COLUMNS)
    return pd.concat(parts, ignore_index=True)[PROCESSED_COLUMNS]


def write_processed(path, tracks: List[ProcessedTrack], comment: Optional[str] = None) -> None:
    '''
    Write processed tracks as one CSV with PROCESSED_COLUMNS.

    :param path: Output path.
    :param tracks: The processed tracks.
    :param comment: Optional provenance line written first as "# <comment>".
    '''

    write_csv(path, processed_frame(tracks), comment)


def read_processed(path, vehicles: Dict[str, VehicleSpec]) -> List[ProcessedTrack]:
    '''
    Read a processed-track CSV written by the preprocess stage.

    :param path: Path of the CSV file.
    :param vehicles: Dimension table keyed by agent id.
    '''

    frame = pd.read_csv(path, dtype={'agent_id': str}, comment='#')
    missing = [c for c in PROCESSED_COLUMNS if c not in frame.columns]
    if missing:
        raise MalformedRowError(f"{path}:{_line_of(path, -1)}: missing columns {missing}")
    frame = _check_numeric(frame, PROCESSED_COLUMNS[1:], path)

    tracks = []
    for agent_id, rows in frame.groupby('agent_id', sort=True):
        agent_id = str(agent_id)
        cols = {c: rows[c].to_numpy() for c in PROCESSED_COLUMNS[1:]}
        tracks.append(ProcessedTrack(agent_id, spec=vehicles.get(agent_id, DEFAULT_VEHICLE), **cols))
    return tracks
