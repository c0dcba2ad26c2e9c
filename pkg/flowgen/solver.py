"""
flowgen/solver.py

Chorin projection solver on a collocated voxel grid.

Each step advects (first-order upwind), diffuses explicitly, re-applies
the boundary conditions and projects. The projection is the least-squares
correction u = u* + F (D^T lam) with D(F D^T lam) = -D u* on the
constrained voxels, solved by Jacobi-preconditioned conjugate gradients.
D is the central-difference divergence and F masks the free velocity
components, so walls and the inlet are never touched by the correction.
"""
import logging

import numpy as np
import scipy.sparse.linalg as splinalg

from flowgen.geometry import voxelize
from flowgen.models import (COMPONENT_AXIS, FlowSnapshot, SolverError)

LOGGER = logging.getLogger(__name__)


def _shift(field, axis, offset):
    '''field[i + offset] along axis, zero beyond the grid'''
    out = np.zeros_like(field)
    src = [slice(None)] * field.ndim
    dst = [slice(None)] * field.ndim
    if offset > 0:
        src[axis] = slice(offset, None)
        dst[axis] = slice(None, -offset)
    else:
        src[axis] = slice(None, offset)
        dst[axis] = slice(-offset, None)
    out[tuple(dst)] = field[tuple(src)]
    return out


def central_difference(field, axis, spacing):
    return (_shift(field, axis, 1) - _shift(field, axis, -1)) / (2.0 * spacing)


def divergence(velocity, spacing):
    '''Central-difference divergence of a (3, D, H, W) velocity field'''
    return sum(central_difference(velocity[c], COMPONENT_AXIS[c], spacing)
               for c in range(3))


def laplacian(field, spacing):
    out = -6.0 * field
    for axis in range(3):
        out += _shift(field, axis, 1) + _shift(field, axis, -1)
    return out / spacing ** 2


def kinetic_energy(velocity, density, spacing):
    return 0.5 * density * float(np.sum(velocity ** 2)) * spacing ** 3


def flux(velocity, layer, spacing):
    '''Volume flow rate through z-layer `layer`, positive along -z'''
    return -float(np.sum(velocity[2, layer])) * spacing ** 2


def advect(velocity, dt, spacing):
    '''One explicit first-order upwind step of u . grad(u)'''
    out = velocity.copy()
    for c in range(3):
        q = velocity[c]
        for a in range(3):
            speed = velocity[a]
            axis = COMPONENT_AXIS[a]
            backward = (q - _shift(q, axis, -1)) / spacing
            forward = (_shift(q, axis, 1) - q) / spacing
            out[c] -= dt * np.where(speed > 0, speed * backward, speed * forward)
    return out


class FlowSolver(object):
    '''Time stepper for one domain and one configuration'''

    def __init__(self, domain, cfg):
        self.domain = domain
        self.cfg = cfg
        self.spacing = domain.grid.spacing
        self.free = np.stack([domain.free(c) for c in range(3)])
        self.fixed = ~self.free
        self._inlet = domain.inlet
        self._lambda = None
        self._prepare_projection()

    def _prepare_projection(self):
        h = self.spacing
        diag = np.zeros(self.domain.grid.shape)
        for c in range(3):
            axis = COMPONENT_AXIS[c]
            free = self.free[c].astype(np.float64)
            diag += (_shift(free, axis, 1) + _shift(free, axis, -1)) / (4.0 * h * h)
        # rows without a free neighbour have an identically zero divergence
        active = self.domain.constrained & (diag > 0)
        self.active = active
        self.n_active = int(np.count_nonzero(active))
        self._diag = diag[active]
        shape = (self.n_active, self.n_active)
        self.operator = splinalg.LinearOperator(
            shape=shape, matvec=self._apply, dtype=np.float64)
        self.preconditioner = splinalg.LinearOperator(
            shape=shape, matvec=lambda r: r / self._diag, dtype=np.float64)

    def _gradient_adjoint(self, lam):
        '''F * D^T lam as a velocity field'''
        out = np.empty((3,) + lam.shape)
        for c in range(3):
            out[c] = -central_difference(lam, COMPONENT_AXIS[c], self.spacing)
        out *= self.free
        return out

    def _apply(self, x):
        lam = np.zeros(self.domain.grid.shape)
        lam[self.active] = np.ravel(x)
        return divergence(self._gradient_adjoint(lam), self.spacing)[self.active]

    def apply_boundary(self, velocity, v_in):
        '''Zero velocity on walls and outside, v_in along the inlet normal,
        and a purely normal outlet'''
        inflow = v_in * np.asarray(self.domain.inlet_normal)
        for c in range(3):
            velocity[c][self.fixed[c]] = 0.0
            velocity[c][self._inlet] = inflow[c]
        return velocity

    def project(self, velocity):
        '''Removes the divergence on constrained voxels in place.
        Returns (converged, residual_norm, rhs_norm).'''
        rhs = -divergence(velocity, self.spacing)[self.active]
        rhs_norm = float(np.linalg.norm(rhs))
        if rhs_norm == 0.0 or self.n_active == 0:
            return True, 0.0, 0.0
        target = self.cfg.convergence_tol * rhs_norm
        x = self._lambda if self._lambda is not None else np.zeros(self.n_active)
        residual = np.inf
        for _ in range(self.cfg.inner_iterations):
            x, _info = splinalg.cg(self.operator, rhs, x0=x,
                                   rtol=self.cfg.convergence_tol, atol=0.0,
                                   maxiter=self.cfg.poisson_maxiter,
                                   M=self.preconditioner)
            residual = float(np.linalg.norm(rhs - self.operator.matvec(x)))
            if residual <= target:
                break
        self._lambda = x
        lam = np.zeros(self.domain.grid.shape)
        lam[self.active] = x
        velocity += self._gradient_adjoint(lam)
        return residual <= target, residual, rhs_norm

    def step(self, velocity, v_in):
        cfg = self.cfg
        if cfg.advection:
            velocity = advect(velocity, cfg.dt, self.spacing)
        velocity = velocity + cfg.dt * cfg.kinematic_viscosity * np.stack(
            [laplacian(velocity[c], self.spacing) for c in range(3)])
        self.apply_boundary(velocity, v_in)
        converged, _residual, _rhs = self.project(velocity)
        if not np.all(np.isfinite(velocity)):
            raise SolverError('velocity became non-finite; reduce dt '
                              '(dt %s, spacing %s)' % (cfg.dt, self.spacing))
        return velocity, converged

    def max_divergence(self, velocity):
        div = divergence(velocity, self.spacing)
        interior = self.domain.interior
        if not interior.any():
            return 0.0
        return float(np.abs(div[interior]).max())


def _snapshot(velocity, domain, v_in, geometry_id, time_index, converged,
              max_div):
    return FlowSnapshot(vx=velocity[0].copy(), vy=velocity[1].copy(),
                        vz=velocity[2].copy(),
                        mask=domain.mask.astype(np.float64), v_in=float(v_in),
                        geometry_id=geometry_id, time_index=time_index,
                        converged=converged, max_divergence=max_div)


def simulate(geom, cfg, v_in, initial=None, domain=None, geometry_id=None):
    '''Runs cfg.steps projection steps with uniform inflow v_in (m/s).

    geom may be None when a prebuilt domain is given (test tubes).
    initial is an optional (3, D, H, W) starting field. Returns the list
    of emitted FlowSnapshot objects, the final step always included.'''
    if domain is None:
        domain = voxelize(geom, cfg.grid)
    if geometry_id is None:
        geometry_id = geom.id if geom is not None else 'domain'
    solver = FlowSolver(domain, cfg)
    if initial is None:
        velocity = np.zeros((3,) + domain.grid.shape)
    else:
        velocity = np.array(initial, dtype=np.float64)
        if velocity.shape != (3,) + domain.grid.shape:
            raise SolverError('initial field %s does not match grid %s'
                              % (velocity.shape, domain.grid.shape))
    snapshots = []
    failed = 0
    for index in range(1, cfg.steps + 1):
        velocity, converged = solver.step(velocity, v_in)
        if not converged:
            failed += 1
        emit = index == cfg.steps or (
            cfg.snapshot_every and index % cfg.snapshot_every == 0)
        if emit:
            max_div = solver.max_divergence(velocity)
            if not converged:
                LOGGER.warning('%s v_in=%.3f step %d: pressure solve did not '
                               'converge (max |div| %.3g)', geometry_id, v_in,
                               index, max_div)
            snapshots.append(_snapshot(velocity, domain, v_in, geometry_id,
                                       index, converged, max_div))
    if failed:
        LOGGER.warning('%s v_in=%.3f: %d of %d pressure solves hit the '
                       'iteration cap', geometry_id, v_in, failed, cfg.steps)
    LOGGER.info('simulated %s v_in=%.3f: %d steps, %d snapshots',
                geometry_id, v_in, cfg.steps, len(snapshots))
    return snapshots
