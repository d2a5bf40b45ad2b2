'''
Kinematic bicycle model for pairs of vehicles, integrated with classic RK4.

Each vehicle carries the state (x, y, theta, v) and holds its acceleration and
steering angle constant over the prediction horizon. The joint state of a pair
is the concatenation of the two vehicle states; the vector field has no cross
terms, so every function below also works on a batch of single vehicles.
'''

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import ConfigError, NumericError
from .logger import Logger

logger = Logger("nearmiss.dynamics")

# state and control component order
X, Y, THETA, V = 0, 1, 2, 3
ACC, STEER = 0, 1


class DynamicsConfigError(ConfigError):
    ''' Signifies an invalid vehicle, control or integration setting. '''


class IntegrationDivergedError(NumericError):
    ''' Signifies a non-finite state produced during integration. '''


@dataclass(frozen=True)
class VehicleState():
    x: float
    y: float
    theta: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v], dtype=float)

    @classmethod
    def from_array(cls, values) -> 'VehicleState':
        return cls(float(values[X]), float(values[Y]), float(values[THETA]), float(values[V]))


@dataclass(frozen=True)
class ControlInput():
    a: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        if not abs(self.delta) < np.pi / 2:
            raise DynamicsConfigError("steering angle must satisfy |delta| < pi/2", self.delta)

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.delta], dtype=float)


@dataclass(frozen=True)
class VehicleSpec():
    wheelbase: float
    length: float
    width: float

    def __post_init__(self):
        if min(self.wheelbase, self.length, self.width) <= 0:
            raise DynamicsConfigError("vehicle dimensions must be positive", self)
        if self.wheelbase > self.length:
            raise DynamicsConfigError("wheelbase cannot exceed vehicle length", self)


# passenger car used when a track has no row in the dimension table
DEFAULT_VEHICLE = VehicleSpec(wheelbase=2.8, length=4.8, width=1.9)


@dataclass(frozen=True)
class JointState():
    a: VehicleState
    b: VehicleState

    def as_array(self) -> np.ndarray:
        return np.stack([self.a.as_array(), self.b.as_array()])

    @classmethod
    def from_array(cls, values) -> 'JointState':
        return cls(VehicleState.from_array(values[0]), VehicleState.from_array(values[1]))


@dataclass(frozen=True)
class IntegrationConfig():
    dt: float = 0.1
    steps: int = 30

    def __post_init__(self):
        if not self.dt > 0:
            raise DynamicsConfigError("integration step must be positive", self.dt)
        if int(self.steps) < 1:
            raise DynamicsConfigError("integration needs at least one step", self.steps)

    @property
    def horizon(self) -> float:
        return self.dt * self.steps


def bicycle_rates(states: np.ndarray, controls: np.ndarray, wheelbase) -> np.ndarray:
    '''
    Kinematic bicycle rates (v cos(theta), v sin(theta), v tan(delta) / L, a)
    for an array of vehicle states of shape (..., 4).

    :param states: Vehicle states, last axis (x, y, theta, v).
    :param controls: Controls broadcastable to (..., 2), last axis (a, delta).
    :param wheelbase: Wheelbase broadcastable to the leading state axes.
    '''

    theta = states[..., THETA]
    v = states[..., V]
    rates = np.empty_like(states)
    rates[..., X] = v * np.cos(theta)
    rates[..., Y] = v * np.sin(theta)
    rates[..., THETA] = v * np.tan(controls[..., STEER]) / wheelbase
    rates[..., V] = controls[..., ACC]
    return rates


def _rk4(states: np.ndarray, controls: np.ndarray, wheelbase, dt: float) -> np.ndarray:
    k1 = bicycle_rates(states, controls, wheelbase)
    k2 = bicycle_rates(states + 0.5 * dt * k1, controls, wheelbase)
    k3 = bicycle_rates(states + 0.5 * dt * k2, controls, wheelbase)
    k4 = bicycle_rates(states + dt * k3, controls, wheelbase)
    updated = states + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    # braking stops the vehicle; it never reverses
    updated[..., V] = np.maximum(updated[..., V], 0.0)
    return updated


def _joint_arrays(controls: Tuple[ControlInput, ControlInput],
                  specs: Tuple[VehicleSpec, VehicleSpec]) -> Tuple[np.ndarray, np.ndarray]:
    u = np.stack([controls[0].as_array(), controls[1].as_array()])
    wheelbase = np.array([specs[0].wheelbase, specs[1].wheelbase])
    return u, wheelbase


def vector_field(s: JointState, u_a: ControlInput, u_b: ControlInput,
                 spec_a: VehicleSpec, spec_b: VehicleSpec) -> np.ndarray:
    '''
    Rate of change of the 8-component joint state, ordered
    (x_A, y_A, theta_A, v_A, x_B, y_B, theta_B, v_B).

    :param s: The joint state of the pair.
    :param u_a: Control input held by vehicle A.
    :param u_b: Control input held by vehicle B.
    :param spec_a: Dimensions of vehicle A.
    :param spec_b: Dimensions of vehicle B.
    '''

    u, wheelbase = _joint_arrays((u_a, u_b), (spec_a, spec_b))
    return bicycle_rates(s.as_array(), u, wheelbase).reshape(8)


def rk4_step(s: JointState, controls: Tuple[ControlInput, ControlInput],
             specs: Tuple[VehicleSpec, VehicleSpec], dt: float) -> JointState:
    '''
    Advance the joint state by one fourth-order Runge-Kutta step, clamping
    speeds at zero afterwards.

    :param s: The joint state at t_n.
    :param controls: Control inputs (A, B).
    :param specs: Vehicle dimensions (A, B).
    :param dt: Step size in seconds.
    '''

    if not dt > 0:
        raise DynamicsConfigError("integration step must be positive", dt)

    u, wheelbase = _joint_arrays(controls, specs)
    return JointState.from_array(_rk4(s.as_array(), u, wheelbase, dt))


def integrate_vehicle(states: np.ndarray, controls: np.ndarray, wheelbase,
                      cfg: IntegrationConfig) -> np.ndarray:
    '''
    Simulate a batch of independent vehicles over the horizon.

    Returns an array of shape (..., N + 1, 4) where index n along the
    second-to-last axis holds the state at t = n * dt.

    :param states: Initial states of shape (..., 4).
    :param controls: Controls of shape (..., 2), held over the horizon.
    :param wheelbase: Wheelbase per vehicle, broadcastable to states[..., 0].
    :param cfg: Step size and step count.
    '''

    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    wheelbase = np.asarray(wheelbase, dtype=float)

    out = np.empty(states.shape[:-1] + (cfg.steps + 1, 4))
    out[..., 0, :] = states
    current = states
    for n in range(cfg.steps):
        current = _rk4(current, controls, wheelbase, cfg.dt)
        if not np.all(np.isfinite(current)):
            logger.error("integration diverged", {"step": n + 1, "dt": cfg.dt})
            raise IntegrationDivergedError(f"non-finite state at integration step {n + 1}", n + 1)
        out[..., n + 1, :] = current
    return out


def simulate_horizon(s0: JointState, controls: Tuple[ControlInput, ControlInput],
                     specs: Tuple[VehicleSpec, VehicleSpec],
                     cfg: IntegrationConfig) -> List[JointState]:
    '''
    Simulate the joint state over cfg.steps RK4 steps.

    :param s0: Initial joint state (index 0 of the result).
    :param controls: Control inputs (A, B), constant over the horizon.
    :param specs: Vehicle dimensions (A, B).
    :param cfg: Step size and step count.
    '''

    u, wheelbase = _joint_arrays(controls, specs)
    path = integrate_vehicle(s0.as_array(), u, wheelbase, cfg)
    # (2, N + 1, 4) -> one JointState per time index
    return [JointState.from_array(path[:, n, :]) for n in range(cfg.steps + 1)]
