'''
Synthetic corridor generator.

Two products share one spec:

* a trajectory corpus of scripted conflicts (head-on closures, drifts into a
  lane edge, constant-radius turns into a lane edge), all consistent with the
  kinematic bicycle model, together with the analytically known first contact
  of every scripted conflict;
* block maxima drawn from a grouped GEV regression with known coefficients,
  for parameter-recovery experiments.

Every scripted conflict is placed in its own lane slot, far enough from the
others that no unscripted interaction passes the detection gates. Contact
happens just after the recording ends, so the observed minimum 2D-TTC of a
scenario equals the time left to contact at its last frame.
'''

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import shapely
from shapely.geometry import MultiPoint, Polygon

from .BlockExtractor import BLOCK_COVARIATES, BlockRecord, GroupSpec
from .NearMissDetector import VI, VV, DetectionConfig, NearMissEvent
from .dynamics import DEFAULT_VEHICLE, VehicleSpec
from .errors import ConfigError
from .geometry import BoundaryPolyline, corners_array, densify
from .gev import CoefficientSet, gev_ppf_values, link_arrays
from .kinematics import MIN_FRAMES, TRACK_COLUMNS, VEHICLE_COLUMNS
from .logger import Logger
from .utils import write_csv

logger = Logger("nearmiss.synth")

HEAD_ON, DRIFT, TURN = 'head_on', 'drift', 'turn'
MIN_BLOCKS = 30
TRUTH_COLUMNS = ['scenario_id', 'scenario', 'kind', 'ego', 'other', 'frame_t', 't_c', 'contact_time']
# contact search resolution and half-width around the scripted contact time
_FINE_STEP = 1e-3
_SEARCH_WINDOW = 1.0


class SynthConfigError(ConfigError):
    ''' Signifies an invalid synthetic corridor specification. '''


@dataclass(frozen=True)
class SyntheticCorridorSpec():
    '''
    Layout and truth of a synthetic corridor.

    Block-maxima truth: mu = mu_intercept + sum(mu_fixed[c] x_c) + gamma_k w,
    log sigma = sigma_intercept, xi constant, with the group slopes gamma_k of
    `random_covariate` drawn from Normal(random_mean, random_sd ** 2).

    Trajectory corpus: per group, `head_on`, `drift` and `turning` scripted
    scenarios of `frames` samples. The minimum TTC of each scenario is the
    negation of a draw from the group's GEV (ttc_mu shifted by a group offset
    with sd ttc_group_sd, ttc_sigma, ttc_xi).
    '''

    groups: int = 3
    blocks_per_group: int = 40
    mu_intercept: float = -1.8
    sigma_intercept: float = float(np.log(0.55))
    xi: float = -0.3
    mu_fixed: Dict[str, float] = field(default_factory=lambda: {'rel_distance': 0.15})
    random_covariate: str = 'rel_speed'
    random_mean: float = 0.25
    random_sd: float = 0.2

    head_on: int = 30
    drift: int = 15
    turning: int = 15
    frames: int = 110
    dt: float = 0.1
    speed: float = 2.5
    drift_rate: float = 0.6
    turn_radius: float = 40.0
    ttc_mu: float = -1.2
    ttc_sigma: float = 0.4
    ttc_xi: float = -0.2
    ttc_group_sd: float = 0.2
    noise: float = 0.0
    slot_spacing: float = 40.0
    group_length: float = 200.0

    def __post_init__(self):
        if int(self.groups) < 1:
            raise SynthConfigError("at least one group is required", self.groups)
        if int(self.blocks_per_group) < MIN_BLOCKS:
            raise SynthConfigError(f"blocks_per_group must be at least {MIN_BLOCKS}", self.blocks_per_group)
        unknown = sorted((set(self.mu_fixed) | {self.random_covariate}) - set(BLOCK_COVARIATES))
        if unknown:
            raise SynthConfigError(f"unknown block covariates {unknown}", BLOCK_COVARIATES)
        if min(self.head_on, self.drift, self.turning) < 0:
            raise SynthConfigError("scenario counts must be non-negative")
        if int(self.frames) < MIN_FRAMES or not self.dt > 0:
            raise SynthConfigError(f"scenarios need at least {MIN_FRAMES} frames and a positive dt")
        if not (self.speed > 0 and 0 < self.drift_rate < self.speed):
            raise SynthConfigError("speed must be positive and exceed the drift rate")
        if not self.turn_radius > DEFAULT_VEHICLE.wheelbase:
            raise SynthConfigError("turn radius must exceed the wheelbase", self.turn_radius)
        if not (self.ttc_sigma > 0 and self.random_sd >= 0 and self.ttc_group_sd >= 0 and self.noise >= 0):
            raise SynthConfigError("scales and noise levels must be non-negative (GEV scale positive)")
        if not self.slot_spacing >= 40.0:
            raise SynthConfigError("lane slots closer than 40 m let scenarios interact", self.slot_spacing)
        reach = 2.0 * self.speed * (self.frames * self.dt + 3.0) + 40.0
        if self.group_length < reach:
            raise SynthConfigError(f"group_length must be at least {reach:.1f} m for these speeds",
                                   self.group_length)

    @property
    def group_ids(self) -> List[str]:
        return [f"G{k + 1}" for k in range(int(self.groups))]

    @property
    def slots(self) -> int:
        return int(self.head_on) + int(self.drift) + int(self.turning)


@dataclass
class SyntheticCorpus():
    scenarios: Dict[str, pd.DataFrame]
    vehicles: pd.DataFrame
    boundaries: List[BoundaryPolyline]
    site_map: List[GroupSpec]
    truth: pd.DataFrame


#####################################
# KNOWN-TRUTH BLOCK MAXIMA          #
#####################################


def truth_coefficients(spec: SyntheticCorridorSpec, seed) -> CoefficientSet:
    '''
    The generating coefficients of synthesize_records for a seed.

    :param spec: The corridor spec.
    :param seed: Seed of the generator.
    '''

    rng = np.random.default_rng(seed)
    gamma = spec.random_mean + spec.random_sd * rng.standard_normal(int(spec.groups))
    return CoefficientSet(
        spec.group_ids,
        mu={'intercept': spec.mu_intercept, **spec.mu_fixed},
        sigma={'intercept': spec.sigma_intercept},
        xi={'intercept': spec.xi},
        mu_random={spec.random_covariate: gamma},
    )


def synthesize_records(spec: SyntheticCorridorSpec, seed) -> Tuple[List[BlockRecord], CoefficientSet]:
    '''
    Draw blocks_per_group block maxima per group from the grouped GEV
    regression. Covariates are standard normal; event counts are 1 + Poisson(1).
    The same seed always yields the same records.

    :param spec: The corridor spec.
    :param seed: Seed of the generator.
    '''

    seeds = np.random.SeedSequence(seed).spawn(2)
    coeffs = truth_coefficients(spec, seeds[0])
    rng = np.random.default_rng(seeds[1])

    n = int(spec.groups) * int(spec.blocks_per_group)
    group_index = np.repeat(np.arange(int(spec.groups)), int(spec.blocks_per_group))
    names = [spec.random_covariate] + sorted(spec.mu_fixed)
    covariates = {name: rng.standard_normal(n) for name in names}
    mu, sigma, xi = link_arrays(coeffs, covariates, group_index)
    u = np.clip(rng.random(n), np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    z = gev_ppf_values(u, mu, sigma, xi)
    counts = 1 + rng.poisson(1.0, n)

    records = []
    for i in range(n):
        group = spec.group_ids[group_index[i]]
        block = i % int(spec.blocks_per_group)
        records.append(BlockRecord(group, block, float(z[i]), int(counts[i]),
                                   {name: float(covariates[name][i]) for name in names},
                                   VV, f"synthetic-{group}", block))
    return records, coeffs


def coefficients_dict(coeffs: CoefficientSet) -> dict:
    ''' JSON-ready form of a coefficient set. '''

    return {
        'groups': list(coeffs.groups),
        'mu': coeffs.mu, 'sigma': coeffs.sigma, 'xi': coeffs.xi,
        'mu_random': {k: v.tolist() for k, v in coeffs.mu_random.items()},
        'sigma_random': {k: v.tolist() for k, v in coeffs.sigma_random.items()},
    }


#####################################
# SCRIPTED TRAJECTORIES             #
#####################################


def head_on_contact_time(gap: float, closing_speed: float, epsilon: float) -> float:
    '''
    Time until the front corners of two laterally aligned vehicles closing at
    a constant speed come within epsilon: (gap - epsilon) / closing_speed.

    :param gap: Front-to-front distance in meters.
    :param closing_speed: Sum of the two speeds in m/s.
    :param epsilon: Proximity threshold in meters.
    '''

    return (gap - epsilon) / closing_speed


def first_boundary_contact(times: np.ndarray, x: np.ndarray, y: np.ndarray, theta: np.ndarray,
                           vehicle: VehicleSpec, boundary: BoundaryPolyline,
                           epsilon: float) -> Optional[float]:
    '''
    First time at which any footprint corner comes within epsilon of a
    boundary vertex, evaluated on the given (fine) time grid.

    :param times: Time grid.
    :param x: Center x per time.
    :param y: Center y per time.
    :param theta: Heading per time.
    :param vehicle: Vehicle dimensions.
    :param boundary: Densified boundary.
    :param epsilon: Proximity threshold in meters.
    '''

    corners = corners_array(x, y, theta, vehicle.length, vehicle.width)
    vertices = MultiPoint(boundary.points)
    distance = shapely.distance(shapely.points(corners.reshape(-1, 2)), vertices).reshape(-1, 4)
    hit = np.flatnonzero(distance.min(axis=1) <= epsilon)
    return float(times[hit[0]]) if len(hit) else None


def _track(agent_id: str, t: np.ndarray, x, y, vx, vy) -> pd.DataFrame:
    return pd.DataFrame({'agent_id': agent_id, 't': t, 'x': x, 'y': y, 'vx': vx, 'vy': vy},
                        columns=TRACK_COLUMNS)


def _truth_frame(contact: float, t: np.ndarray, horizon: float, dt: float) -> Optional[int]:
    # first frame from which contact is inside the horizon with one step to spare
    frame = int(np.ceil((contact - (horizon - dt)) / (t[1] - t[0]) - 1e-9))
    frame = max(frame, 0)
    return frame if frame < len(t) else None


class _Scripter():
    ''' Builds the scripted scenarios of one corpus. '''

    def __init__(self, spec: SyntheticCorridorSpec, detection: DetectionConfig, rng: np.random.Generator):
        self.spec = spec
        self.detection = detection
        self.rng = rng
        self.vehicle = DEFAULT_VEHICLE
        self.t = np.arange(int(spec.frames)) * spec.dt
        self.fine = np.arange(-_SEARCH_WINDOW, _SEARCH_WINDOW + _FINE_STEP / 2, _FINE_STEP)

    def noisy(self, values: np.ndarray) -> np.ndarray:
        if self.spec.noise > 0:
            return values + self.rng.normal(0.0, self.spec.noise, len(values))
        return values

    def truth(self, scenario_id, scenario, kind, other, contact) -> Optional[dict]:
        horizon = self.detection.horizon
        frame = _truth_frame(contact, self.t, horizon.horizon, horizon.dt)
        if frame is None:
            return None
        return {'scenario_id': scenario_id, 'scenario': scenario, 'kind': kind, 'ego': 'A',
                'other': other, 'frame_t': float(self.t[frame]),
                't_c': float(contact - self.t[frame]), 'contact_time': float(contact)}

    def head_on(self, scenario_id: str, x0: float, y0: float, contact: float):
        v = self.spec.speed
        eps = self.detection.epsilon
        gap = 2.0 * v * contact + eps
        centers = self.vehicle.length + gap
        t = self.t

        frames = pd.concat([
            _track('A', t, self.noisy(x0 + v * t), self.noisy(np.full(len(t), y0)),
                   np.full(len(t), v), np.zeros(len(t))),
            _track('B', t, self.noisy(x0 + centers - v * t), self.noisy(np.full(len(t), y0)),
                   np.full(len(t), -v), np.zeros(len(t))),
        ], ignore_index=True)
        exact = head_on_contact_time(gap, 2.0 * v, eps)
        return frames, [], self.truth(scenario_id, HEAD_ON, VV, 'B', exact)

    def _edge_scenario(self, scenario_id, kind, path, contact):
        ''' Lane edge placed so that the leading corner meets it near `contact`. '''

        x, y, theta, vx, vy = path(self.t)
        cx, cy, ctheta, _, _ = path(np.array([contact]))
        corners = corners_array(cx, cy, ctheta, self.vehicle.length, self.vehicle.width)[0]
        y_edge = float(corners[:, 1].max() + self.detection.epsilon)
        fx, _, _, _, _ = path(np.array([contact + self.detection.horizon.horizon]))
        boundary = BoundaryPolyline(f"{scenario_id}-edge",
                                    [[float(x[0]) - 10.0, y_edge], [float(max(fx[0], x[-1])) + 10.0, y_edge]])

        times = contact + self.fine
        fx, fy, ftheta, _, _ = path(times)
        dense = densify(boundary, self.detection.densify_spacing)
        exact = first_boundary_contact(times, fx, fy, ftheta, self.vehicle, dense, self.detection.epsilon)
        if exact is None:
            logger.warn("scripted contact not found", {"scenario_id": scenario_id})
            row = None
        else:
            row = self.truth(scenario_id, kind, VI, boundary.boundary_id, exact)

        frame = _track('A', self.t, self.noisy(x), self.noisy(y), vx, vy)
        return frame, [boundary], row

    def drift(self, scenario_id: str, x0: float, y0: float, contact: float):
        v = self.spec.speed
        phi = float(np.arcsin(self.spec.drift_rate / v))

        def path(t):
            ones = np.ones(len(t))
            return (x0 + v * np.cos(phi) * t, y0 + v * np.sin(phi) * t, phi * ones,
                    v * np.cos(phi) * ones, v * np.sin(phi) * ones)

        return self._edge_scenario(scenario_id, DRIFT, path, contact)

    def turn(self, scenario_id: str, x0: float, y0: float, contact: float):
        v = self.spec.speed
        radius = self.spec.turn_radius
        omega = v / radius

        def path(t):
            theta = omega * t
            return (x0 + radius * np.sin(theta), y0 + radius * (1.0 - np.cos(theta)), theta,
                    v * np.cos(theta), v * np.sin(theta))

        return self._edge_scenario(scenario_id, TURN, path, contact)


def _site_map(spec: SyntheticCorridorSpec, rng: np.random.Generator) -> List[GroupSpec]:
    groups = []
    top = spec.slots * spec.slot_spacing
    for k, group_id in enumerate(spec.group_ids):
        x0 = k * spec.group_length
        polygon = Polygon([(x0, -spec.slot_spacing), (x0 + spec.group_length, -spec.slot_spacing),
                           (x0 + spec.group_length, top), (x0, top)])
        groups.append(GroupSpec(
            group_id, polygon,
            kind='intersection' if k % 2 else 'segment',
            direction='NB' if k % 2 == 0 else 'SB',
            lane_count=float(rng.integers(1, 4)),
            lane_width=float(np.round(rng.uniform(3.0, 3.8), 2)),
            driveway_density=float(np.round(rng.uniform(0.0, 0.02), 4)),
            median='divided' if k % 3 == 0 else 'undivided',
        ))
    return groups


def synthesize_corpus(spec: SyntheticCorridorSpec, seed,
                      detection: DetectionConfig = DetectionConfig()) -> SyntheticCorpus:
    '''
    Generate the scripted trajectory corpus with its boundaries, site map and
    ground truth. Identical seeds give identical corpora.

    :param spec: The corridor spec.
    :param seed: Seed of the generator.
    :param detection: Detection settings whose epsilon, horizon and boundary
        spacing define the ground truth.
    '''

    layout_seed, ttc_seed, noise_seed = np.random.SeedSequence(seed).spawn(3)
    site_map = _site_map(spec, np.random.default_rng(layout_seed))
    ttc_rng = np.random.default_rng(ttc_seed)
    scripter = _Scripter(spec, detection, np.random.default_rng(noise_seed))

    t_last = scripter.t[-1]
    upper = detection.horizon.horizon - 2.0 * detection.horizon.dt
    plan = [HEAD_ON] * int(spec.head_on) + [DRIFT] * int(spec.drift) + [TURN] * int(spec.turning)

    scenarios, boundaries, truth = {}, [], []
    for k, group_id in enumerate(spec.group_ids):
        mu_k = spec.ttc_mu + spec.ttc_group_sd * ttc_rng.standard_normal()
        u = np.clip(ttc_rng.random(len(plan)), np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
        min_ttc = np.clip(-gev_ppf_values(u, mu_k, spec.ttc_sigma, spec.ttc_xi),
                          0.15, upper)

        for s, kind in enumerate(plan):
            scenario_id = f"{group_id}-{kind}-{s:03d}"
            x0 = k * spec.group_length + 20.0
            y0 = s * spec.slot_spacing
            contact = float(t_last + min_ttc[s])
            if kind == HEAD_ON:
                frame, edges, row = scripter.head_on(scenario_id, x0, y0, contact)
            elif kind == DRIFT:
                frame, edges, row = scripter.drift(scenario_id, x0, y0 - 10.0, contact)
            else:
                frame, edges, row = scripter.turn(scenario_id, x0, y0 - 10.0, contact)
            scenarios[scenario_id] = frame
            boundaries.extend(edges)
            if row is not None:
                truth.append(row)

    agents = sorted({a for frame in scenarios.values() for a in frame['agent_id']})
    vehicles = pd.DataFrame({'agent_id': agents})
    vehicles['length'] = DEFAULT_VEHICLE.length
    vehicles['width'] = DEFAULT_VEHICLE.width
    vehicles['wheelbase'] = DEFAULT_VEHICLE.wheelbase
    vehicles = vehicles[VEHICLE_COLUMNS]

    if 0 < spec.head_on < MIN_BLOCKS or 0 < spec.drift + spec.turning < MIN_BLOCKS:
        logger.warn("fewer scripted scenarios per group than the block-maxima floor", {
            "head_on": spec.head_on, "vi_scenarios": spec.drift + spec.turning, "floor": MIN_BLOCKS})
    logger.info("synthetic corpus generated", {
        "groups": len(site_map), "scenarios": len(scenarios), "ground_truth": len(truth)})
    return SyntheticCorpus(scenarios, vehicles, boundaries, site_map,
                           pd.DataFrame(truth, columns=TRUTH_COLUMNS))


def match_ground_truth(truth: pd.DataFrame, events: Sequence[NearMissEvent],
                       tolerance: float) -> pd.DataFrame:
    '''
    Pair every ground-truth conflict with the detected event of the same
    scenario, kind, agents and initiating frame. A conflict counts as
    recovered when such an event exists and |t_c - true t_c| <= tolerance.

    :param truth: Ground truth with TRUTH_COLUMNS.
    :param events: Detected events.
    :param tolerance: Allowed t_c error in seconds.
    '''

    detected = {}
    for e in events:
        key = (e.scenario_id, e.kind, e.ego_id, e.other_id, int(round(e.block_time * 1e6)))
        detected.setdefault(key, e.t_c)

    out = truth.copy()
    found = []
    for row in truth.itertuples(index=False):
        key = (str(row.scenario_id), str(row.kind), str(row.ego), str(row.other),
               int(round(float(row.frame_t) * 1e6)))
        found.append(detected.get(key, np.nan))
    out['detected_t_c'] = np.array(found, dtype=float)
    # 1e-9 absorbs roundoff at a t_c exactly one step late
    out['recovered'] = np.abs(out['detected_t_c'] - out['t_c']) <= tolerance + 1e-9
    return out


#####################################
# FILE OUTPUT                       #
#####################################


def write_boundaries(path, boundaries: Sequence[BoundaryPolyline]) -> None:
    ''' Write boundaries as the JSON array read by read_boundaries. '''

    items = [{'id': b.boundary_id, 'kind': b.kind, 'points': b.points.tolist()} for b in boundaries]
    _write_json(path, items)


def write_site_map(path, site_map: Sequence[GroupSpec]) -> None:
    ''' Write groups as the JSON array read by load_site_map. '''

    items = []
    for g in site_map:
        items.append({
            'group_id': g.group_id, 'kind': g.kind, 'direction': g.direction,
            'polygon': [list(p) for p in g.polygon.exterior.coords[:-1]],
            'lane_count': g.lane_count, 'lane_width': g.lane_width,
            'driveway_density': g.driveway_density, 'median': g.median,
        })
    _write_json(path, items)


def _write_json(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write('\n')


def write_corpus(corpus: SyntheticCorpus, tracks_dir, vehicles_path, boundaries_path,
                 site_map_path, truth_path, comment: Optional[str] = None) -> List[str]:
    '''
    Write one trajectory CSV per scenario plus the vehicle table, boundaries,
    site map and ground truth. Returns the written paths.

    :param corpus: The generated corpus.
    :param tracks_dir: Directory for <scenario_id>.csv files.
    :param vehicles_path: Vehicle dimension table.
    :param boundaries_path: Boundary JSON.
    :param site_map_path: Site map JSON.
    :param truth_path: Ground-truth CSV.
    :param comment: Optional provenance line for the CSV files.
    '''

    written = []
    for scenario_id in sorted(corpus.scenarios):
        path = Path(tracks_dir) / f"{scenario_id}.csv"
        write_csv(path, corpus.scenarios[scenario_id], comment)
        written.append(str(path))
    write_csv(vehicles_path, corpus.vehicles, comment)
    write_boundaries(boundaries_path, corpus.boundaries)
    write_site_map(site_map_path, corpus.site_map)
    write_csv(truth_path, corpus.truth, comment)
    return written + [str(vehicles_path), str(boundaries_path), str(site_map_path), str(truth_path)]
