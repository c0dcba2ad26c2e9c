"""
flowgen/geometry.py

Voxelization of ventricle geometries and the radial distance field.
"""
import logging

import numpy as np
from scipy.ndimage import binary_erosion

from flowgen.models import (GeometryError, VoxelDomain, OUTSIDE, WALL, INLET,
                            OUTLET, INTERIOR)

LOGGER = logging.getLogger(__name__)

# voxels per port column: two layers so central differences next to the
# port see a fixed inflow layer
PORT_DEPTH = 2
MIN_PORT_RADIUS_VOXELS = 2.0


def ellipsoid_mask(geom, grid):
    '''1 inside the axis-aligned ellipsoid with semi-axes
    (diameter/2, diameter/2, long_axis/2), centred on the grid'''
    if geom.diameter <= 0 or geom.long_axis <= 0:
        raise GeometryError('geometry %s is empty (diameter %s, long axis %s)'
                            % (geom.id, geom.diameter, geom.long_axis))
    half_extent = grid.size * grid.spacing_mm / 2.0
    for name, semi in (('diameter', geom.diameter / 2.0),
                       ('long axis', geom.long_axis / 2.0)):
        if semi + grid.spacing_mm > half_extent:
            raise GeometryError(
                'geometry %s %s %.1f mm does not fit a %d^3 grid at %.3f mm'
                % (geom.id, name, 2 * semi, grid.size, grid.spacing_mm))
    c = grid.centers_mm()
    z, y, x = np.meshgrid(c, c, c, indexing='ij')
    a = geom.diameter / 2.0
    b = geom.long_axis / 2.0
    return (x / a) ** 2 + (y / a) ** 2 + (z / b) ** 2 <= 1.0


def _footprint(port, grid):
    c = grid.centers_mm()
    y, x = np.meshgrid(c, c, indexing='ij')
    return (x - port.center[0]) ** 2 + (y - port.center[1]) ** 2 <= port.radius ** 2


def _tag_port(labels, mask, shell, footprint, from_top, code):
    '''Tags the outermost PORT_DEPTH voxels of every footprint column.
    Columns whose next voxel inward is not interior are dropped.'''
    depth = mask.shape[0]
    has_voxels = mask.any(axis=0)
    if from_top:
        ends = depth - 1 - np.argmax(mask[::-1], axis=0)
        step = -1
    else:
        ends = np.argmax(mask, axis=0)
        step = 1
    rows, cols = np.nonzero(footprint & has_voxels)
    ends = ends[rows, cols]
    inner = ends + PORT_DEPTH * step
    valid = (inner >= 0) & (inner < depth)
    rows, cols, ends, inner = rows[valid], cols[valid], ends[valid], inner[valid]
    keep = mask[inner, rows, cols] & ~shell[inner, rows, cols]
    for layer in range(PORT_DEPTH):
        keep &= mask[ends + layer * step, rows, cols]
    rows, cols, ends = rows[keep], cols[keep], ends[keep]
    for layer in range(PORT_DEPTH):
        labels[ends + layer * step, rows, cols] = code
    return len(rows)


def label_domain(mask, grid, inlet_footprint, outlet_footprint):
    '''Classifies mask voxels into wall, inlet, outlet and interior'''
    mask = np.asarray(mask, dtype=bool)
    shell = mask & ~binary_erosion(mask)
    labels = np.full(mask.shape, OUTSIDE, dtype=np.int8)
    labels[mask] = INTERIOR
    labels[shell] = WALL
    n_inlet = _tag_port(labels, mask, shell, inlet_footprint, True, INLET)
    n_outlet = _tag_port(labels, mask, shell, outlet_footprint, False, OUTLET)
    if not n_inlet or not n_outlet:
        raise GeometryError('ports do not resolve on the grid '
                            '(%d inlet columns, %d outlet columns)'
                            % (n_inlet, n_outlet))
    return VoxelDomain(labels, grid)


def voxelize(geom, grid):
    '''Voxelizes geom on grid and tags wall, inlet and outlet voxels.

    Returns a VoxelDomain; its .mask is the ventricle mask.'''
    for port in (geom.inlet, geom.outlet):
        if port.radius / grid.spacing_mm < MIN_PORT_RADIUS_VOXELS:
            raise GeometryError(
                'geometry %s port radius %.2f mm is under %d voxels at %.3f mm'
                % (geom.id, port.radius, MIN_PORT_RADIUS_VOXELS, grid.spacing_mm))
    mask = ellipsoid_mask(geom, grid)
    domain = label_domain(mask, grid, _footprint(geom.inlet, grid),
                          _footprint(geom.outlet, grid))
    LOGGER.debug('voxelized %s: %s', geom.id, domain.counts())
    return domain


def tube_domain(grid, radius_voxels, length_voxels):
    '''Straight cylindrical tube along z whose ports span the whole
    cross-section. The end layers are placed so that the first inlet
    layer and the last outlet layer lie an even number of voxels apart.'''
    if length_voxels % 2:
        length_voxels -= 1
    if length_voxels < 2 * PORT_DEPTH + 2 or length_voxels > grid.size - 2:
        raise GeometryError('tube length %d does not fit a %d^3 grid'
                            % (length_voxels, grid.size))
    centre = (grid.size - 1) / 2.0
    idx = np.arange(grid.size)
    y, x = np.meshgrid(idx, idx, indexing='ij')
    disk = (x - centre) ** 2 + (y - centre) ** 2 <= radius_voxels ** 2
    if disk[0].any() or disk[:, 0].any():
        raise GeometryError('tube radius %s does not fit a %d^3 grid'
                            % (radius_voxels, grid.size))
    bottom = (grid.size - length_voxels) // 2
    top = bottom + length_voxels
    mask = np.zeros(grid.shape, dtype=bool)
    mask[bottom:top + 1] = disk
    shell = mask & ~binary_erosion(mask)
    labels = np.full(mask.shape, OUTSIDE, dtype=np.int8)
    labels[mask] = INTERIOR
    labels[shell] = WALL
    labels[top - PORT_DEPTH + 1:top + 1][mask[top - PORT_DEPTH + 1:top + 1]] = INLET
    labels[bottom:bottom + PORT_DEPTH][mask[bottom:bottom + PORT_DEPTH]] = OUTLET
    return VoxelDomain(labels, grid)


def compute_rdf(mask, spacing=1.0, normalize=True):
    '''Euclidean distance from every voxel centre to the centroid of the
    mask, over the whole grid. With normalize the field is divided by its
    maximum so it spans [0, 1].'''
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise GeometryError('cannot compute a distance field for an empty mask')
    centroid = np.argwhere(mask).mean(axis=0)
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in mask.shape),
                        indexing='ij')
    squared = sum((g - c) ** 2 for g, c in zip(grids, centroid))
    rdf = np.sqrt(squared) * spacing
    if normalize:
        peak = rdf.max()
        if peak > 0:
            rdf = rdf / peak
    return rdf
