'''
Rigid-rectangle vehicle footprints and road boundary polylines.

Corners are numbered 1-4 in the order front-left, front-right, rear-left,
rear-right; arrays hold them in that order along the corner axis.
'''

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import shapely
from shapely.geometry import LineString

from .dynamics import VehicleSpec, VehicleState
from .errors import DataError

BOUNDARY_KINDS = ('lane-edge', 'curb', 'median', 'barrier')

# body-frame corner signs along (length, width)
_CORNER_SIGNS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])


class BoundaryError(DataError):
    ''' Signifies an invalid boundary polyline. '''


@dataclass(frozen=True)
class CornerSet():
    points: np.ndarray  # (4, 2)

    @property
    def center(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class BoundaryPolyline():
    boundary_id: str
    points: np.ndarray  # (M, 2)
    kind: str = 'lane-edge'

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or len(points) < 2:
            raise BoundaryError("boundary needs at least two (x, y) points", self.boundary_id)
        if not np.all(np.isfinite(points)):
            raise BoundaryError("boundary has non-finite coordinates", self.boundary_id)
        if np.any(np.all(np.diff(points, axis=0) == 0.0, axis=1)):
            raise BoundaryError("boundary has repeated consecutive points", self.boundary_id)
        if self.kind not in BOUNDARY_KINDS:
            raise BoundaryError(f"unknown boundary kind {self.kind!r}", self.boundary_id)
        object.__setattr__(self, 'points', points)


def body_corners(spec: VehicleSpec) -> np.ndarray:
    '''
    Body-frame corners (+-L/2, +-W/2) of the vehicle footprint, shape (4, 2).

    :param spec: Vehicle dimensions.
    '''

    return _CORNER_SIGNS * np.array([spec.length / 2.0, spec.width / 2.0])


def corners_array(x, y, theta, length, width) -> np.ndarray:
    '''
    Global corner positions for arrays of poses, shape (..., 4, 2).

    :param x: Center x coordinates.
    :param y: Center y coordinates.
    :param theta: Headings in radians.
    :param length: Footprint length (scalar or broadcastable).
    :param width: Footprint width (scalar or broadcastable).
    '''

    x, y, theta = np.broadcast_arrays(np.asarray(x, dtype=float),
                                      np.asarray(y, dtype=float),
                                      np.asarray(theta, dtype=float))
    half_l = np.asarray(length, dtype=float)[..., None] / 2.0 * _CORNER_SIGNS[:, 0]
    half_w = np.asarray(width, dtype=float)[..., None] / 2.0 * _CORNER_SIGNS[:, 1]
    cos_t = np.cos(theta)[..., None]
    sin_t = np.sin(theta)[..., None]

    out = np.empty(x.shape + (4, 2))
    out[..., 0] = x[..., None] + cos_t * half_l - sin_t * half_w
    out[..., 1] = y[..., None] + sin_t * half_l + cos_t * half_w
    return out


def global_corners(state: VehicleState, spec: VehicleSpec) -> CornerSet:
    '''
    Rotate the body-frame corners by the heading and translate them to the
    vehicle center.

    :param state: Vehicle pose (center and heading).
    :param spec: Vehicle dimensions.
    '''

    return CornerSet(corners_array(state.x, state.y, state.theta, spec.length, spec.width))


def densify(boundary: BoundaryPolyline, max_spacing: float = 0.25) -> BoundaryPolyline:
    '''
    Insert vertices so no two consecutive boundary points are further apart
    than max_spacing; original vertices are kept.

    :param boundary: The boundary to densify.
    :param max_spacing: Maximum vertex spacing in meters.
    '''

    if not max_spacing > 0:
        raise BoundaryError("densify spacing must be positive", max_spacing)

    line = shapely.segmentize(LineString(boundary.points), max_segment_length=max_spacing)
    return BoundaryPolyline(boundary.boundary_id, np.asarray(line.coords)[:, :2], boundary.kind)


def boundary_tangent(boundary: BoundaryPolyline, vertex: int) -> float:
    '''
    Heading of the boundary polyline at a 0-based vertex index.

    :param boundary: The boundary polyline.
    :param vertex: Vertex index.
    '''

    points = boundary.points
    lo = min(vertex, len(points) - 2)
    dx, dy = points[lo + 1] - points[lo]
    return float(np.arctan2(dy, dx))


def nearest_vertex(corners: np.ndarray, boundary: BoundaryPolyline) -> Tuple[int, float]:
    '''
    Closest boundary vertex to any corner: (0-based vertex index, distance).

    :param corners: Corner array of shape (4, 2).
    :param boundary: The boundary polyline.
    '''

    dist = np.linalg.norm(corners[:, None, :] - boundary.points[None, :, :], axis=-1)
    flat = int(np.argmin(dist))
    return flat % len(boundary.points), float(dist.flat[flat])
