"""
flowgen/models.py

Value types of the flow generator. Geometry lengths are millimetres,
solver quantities are SI. Volume arrays are indexed (z, y, x); the
ventricle long axis runs along z.
"""
from dataclasses import dataclass, field, asdict

import numpy as np

# voxel classes
OUTSIDE = 0
WALL = 1
INLET = 2
OUTLET = 3
INTERIOR = 4

# velocity component index -> array axis, components ordered (vx, vy, vz)
COMPONENT_AXIS = (2, 1, 0)
COMPONENTS = ('x', 'y', 'z')

# population ranges (mm) and inlet sweep (m/s)
DIAMETER_RANGE = (51.0, 87.0)
LONG_AXIS_RANGE = (74.0, 126.0)
INLET_RANGE = (0.1, 0.5)

# port placement as fractions of the diameter
PORT_RADIUS_FRACTION = 0.2
INLET_OFFSET_FRACTION = 0.15


class FlowgenError(Exception):
    '''Base class for flow generator errors'''
    pass


class GeometryError(FlowgenError):
    '''Geometry cannot be placed or resolved on the grid'''
    pass


class SolverError(FlowgenError):
    '''Invalid solver configuration or a run that blew up'''
    pass


@dataclass(frozen=True)
class Port:
    '''A disk on the ventricle boundary. center is (x, y, z) in mm,
    normal is the unit direction of the flow through the port'''
    center: tuple
    radius: float
    normal: tuple


@dataclass(frozen=True)
class VentricleGeometry:
    id: str
    diameter: float
    long_axis: float
    inlet: Port
    outlet: Port

    @classmethod
    def create(cls, geometry_id, diameter, long_axis):
        '''Ellipsoidal ventricle with the mitral inlet on the basal cap,
        off axis, and the cannula outlet at the apex'''
        if diameter <= 0 or long_axis <= 0:
            raise GeometryError('geometry %s has non-positive size '
                                '(diameter %s, long axis %s)'
                                % (geometry_id, diameter, long_axis))
        radius = PORT_RADIUS_FRACTION * diameter
        offset = INLET_OFFSET_FRACTION * diameter
        semi_axis = long_axis / 2.0
        semi_diameter = diameter / 2.0
        base_z = semi_axis * np.sqrt(max(0.0, 1.0 - (offset / semi_diameter) ** 2))
        inlet = Port(center=(offset, 0.0, float(base_z)), radius=radius,
                     normal=(0.0, 0.0, -1.0))
        outlet = Port(center=(0.0, 0.0, -semi_axis), radius=radius,
                      normal=(0.0, 0.0, -1.0))
        return cls(id=geometry_id, diameter=float(diameter),
                   long_axis=float(long_axis), inlet=inlet, outlet=outlet)

    def to_dict(self):
        data = asdict(self)
        # JSON-shaped, so manifests compare equal after a round trip
        for port in ('inlet', 'outlet'):
            for key in ('center', 'normal'):
                data[port][key] = list(data[port][key])
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(id=data['id'], diameter=data['diameter'],
                   long_axis=data['long_axis'],
                   inlet=Port(tuple(data['inlet']['center']),
                              data['inlet']['radius'],
                              tuple(data['inlet']['normal'])),
                   outlet=Port(tuple(data['outlet']['center']),
                               data['outlet']['radius'],
                               tuple(data['outlet']['normal'])))


@dataclass(frozen=True)
class GridSpec:
    '''Cubic grid of size^3 voxels with spacing in metres'''
    size: int
    spacing: float

    def __post_init__(self):
        if self.size < 4:
            raise GeometryError('grid size must be >= 4, got %s' % self.size)
        if self.spacing <= 0:
            raise GeometryError('grid spacing must be positive')

    @property
    def shape(self):
        return (self.size,) * 3

    @property
    def spacing_mm(self):
        return self.spacing * 1000.0

    def centers_mm(self):
        '''Voxel-centre coordinates along one axis, symmetric about 0'''
        return (np.arange(self.size) - (self.size - 1) / 2.0) * self.spacing_mm


@dataclass(frozen=True)
class SolverConfig:
    density: float = 1060.0
    viscosity: float = 0.0035
    dt: float = 0.001
    steps: int = 3000
    inner_iterations: int = 20
    convergence_tol: float = 1e-6
    grid: GridSpec = field(default_factory=lambda: GridSpec(32, 0.0045))
    advection: bool = True
    poisson_maxiter: int = 500
    # 0 keeps only the final snapshot
    snapshot_every: int = 0

    def __post_init__(self):
        if self.density <= 0 or self.viscosity <= 0 or self.dt <= 0:
            raise SolverError('density, viscosity and dt must be positive')
        if self.convergence_tol <= 0:
            raise SolverError('convergence_tol must be positive')
        if self.steps < 1 or self.inner_iterations < 1 or self.poisson_maxiter < 1:
            raise SolverError('steps and iteration limits must be >= 1')
        if self.snapshot_every < 0:
            raise SolverError('snapshot_every must be >= 0')

    @property
    def kinematic_viscosity(self):
        return self.viscosity / self.density

    def to_dict(self):
        return asdict(self)


@dataclass
class FlowSnapshot:
    vx: np.ndarray
    vy: np.ndarray
    vz: np.ndarray
    mask: np.ndarray
    v_in: float
    geometry_id: str
    time_index: int
    converged: bool = True
    max_divergence: float = 0.0

    @property
    def velocity(self):
        return np.stack([self.vx, self.vy, self.vz])

    def component(self, name):
        return {'x': self.vx, 'y': self.vy, 'z': self.vz}[name]


class VoxelDomain(object):
    '''Voxel classes of one ventricle on one grid.

    labels holds OUTSIDE / WALL / INLET / OUTLET / INTERIOR per voxel;
    the boolean views below are derived from it.'''

    def __init__(self, labels, grid, inlet_normal=(0.0, 0.0, -1.0),
                 outlet_normal=(0.0, 0.0, -1.0)):
        self.labels = labels
        self.grid = grid
        self.inlet_normal = tuple(inlet_normal)
        self.outlet_normal = tuple(outlet_normal)

    @property
    def mask(self):
        return self.labels != OUTSIDE

    @property
    def wall(self):
        return self.labels == WALL

    @property
    def inlet(self):
        return self.labels == INLET

    @property
    def outlet(self):
        return self.labels == OUTLET

    @property
    def interior(self):
        return self.labels == INTERIOR

    @property
    def constrained(self):
        '''Voxels whose discrete divergence the projection drives to zero'''
        return (self.labels == INTERIOR) | (self.labels == WALL)

    def free(self, component):
        '''Voxels where a velocity component is a solver unknown. The
        outlet leaves its normal (z) component free'''
        free = self.interior.copy()
        if COMPONENT_AXIS[component] == 0:
            free |= self.outlet
        return free

    def counts(self):
        return {name: int(np.count_nonzero(self.labels == code))
                for name, code in (('wall', WALL), ('inlet', INLET),
                                   ('outlet', OUTLET), ('interior', INTERIOR))}
