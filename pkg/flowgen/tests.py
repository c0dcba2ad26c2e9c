"""
Unit tests for flowgen
"""
from dataclasses import replace

from django.test import SimpleTestCase
from unittest.mock import MagicMock

import numpy as np

from flowgen.geometry import compute_rdf, tube_domain, voxelize
from flowgen.models import (DIAMETER_RANGE, LONG_AXIS_RANGE, GeometryError,
                            GridSpec, SolverConfig, SolverError,
                            VentricleGeometry)
from flowgen.population import (generate_population, inlet_counts,
                                plan_population)
from flowgen.solver import flux, kinetic_energy, simulate

SPACING = 0.0045


def small_ventricle():
    return VentricleGeometry.create('test', 54.0, 78.0)


def small_config(**kwargs):
    cfg = SolverConfig(dt=0.004, steps=10, grid=GridSpec(20, SPACING))
    return replace(cfg, **kwargs)


class VoxelizeTests(SimpleTestCase):
    """Tests for voxelize and compute_rdf"""

    def test_sphere_volume(self):
        """A 64-voxel sphere on a 128^3 grid matches the analytic volume"""
        geom = VentricleGeometry.create('sphere', 64.0, 64.0)
        domain = voxelize(geom, GridSpec(128, 0.001))
        expected = 4.0 / 3.0 * np.pi * 32 ** 3
        self.assertLess(abs(domain.mask.sum() - expected) / expected, 0.02)

    def test_empty_geometry_rejected(self):
        """Zero diameter is rejected"""
        with self.assertRaises(GeometryError):
            VentricleGeometry.create('empty', 0.0, 80.0)

    def test_geometry_exceeding_grid_rejected(self):
        """A ventricle longer than the field of view is rejected"""
        with self.assertRaises(GeometryError):
            voxelize(VentricleGeometry.create('big', 60.0, 126.0),
                     GridSpec(20, SPACING))

    def test_unresolved_ports_rejected(self):
        """Ports narrower than two voxels are rejected"""
        with self.assertRaises(GeometryError):
            voxelize(VentricleGeometry.create('coarse', 30.0, 40.0),
                     GridSpec(20, 0.006))

    def test_mask_symmetry(self):
        """Mask is symmetric under the ellipsoid's axial symmetries"""
        domain = voxelize(VentricleGeometry.create('sym', 60.0, 90.0),
                          GridSpec(32, SPACING))
        mask = domain.mask
        np.testing.assert_array_equal(mask, mask[::-1])
        np.testing.assert_array_equal(mask, mask[:, ::-1])
        np.testing.assert_array_equal(mask, mask[:, :, ::-1])
        np.testing.assert_array_equal(mask, mask.transpose(0, 2, 1))

    def test_ports_tagged(self):
        """Inlet sits at the base, outlet at the apex, disjoint"""
        domain = voxelize(small_ventricle(), GridSpec(20, SPACING))
        self.assertGreater(domain.inlet.sum(), 0)
        self.assertGreater(domain.outlet.sum(), 0)
        self.assertFalse(np.any(domain.inlet & domain.outlet))
        inlet_z = np.nonzero(domain.inlet)[0]
        outlet_z = np.nonzero(domain.outlet)[0]
        self.assertGreater(inlet_z.min(), 10)
        self.assertLess(outlet_z.max(), 10)

    def test_rdf_centroid_is_zero(self):
        """The centroid voxel has distance 0"""
        mask = np.zeros((21, 21, 21), dtype=bool)
        mask[8:13, 8:13, 8:13] = True
        rdf = compute_rdf(mask, normalize=False)
        self.assertEqual(rdf[10, 10, 10], 0.0)

    def test_rdf_three_four_five(self):
        """Offset (3, 4, 0) at unit spacing is 5 before scaling"""
        mask = np.zeros((21, 21, 21), dtype=bool)
        mask[10, 10, 10] = True
        rdf = compute_rdf(mask, spacing=1.0, normalize=False)
        self.assertAlmostEqual(rdf[13, 14, 10], 5.0)

    def test_rdf_scaled_max_is_one(self):
        """Scaled field peaks at exactly 1"""
        domain = voxelize(small_ventricle(), GridSpec(20, SPACING))
        rdf = compute_rdf(domain.mask, spacing=SPACING)
        self.assertEqual(rdf.max(), 1.0)
        self.assertGreaterEqual(rdf.min(), 0.0)

    def test_rdf_empty_mask(self):
        """Empty mask is rejected"""
        with self.assertRaises(GeometryError):
            compute_rdf(np.zeros((4, 4, 4)))


class SolverTests(SimpleTestCase):
    """Tests for simulate"""

    def test_config_validation(self):
        """Non-positive constants are rejected"""
        with self.assertRaises(SolverError):
            SolverConfig(dt=0.0)
        with self.assertRaises(SolverError):
            SolverConfig(convergence_tol=0.0)

    def test_zero_inflow_stays_zero(self):
        """v_in = 0 from rest gives an all-zero field"""
        snapshot = simulate(small_ventricle(), small_config(steps=3), 0.0)[-1]
        self.assertFalse(np.any(snapshot.velocity))
        self.assertTrue(snapshot.converged)

    def test_boundary_conditions(self):
        """Walls and outside are zero, the inlet carries v_in inward"""
        geom = small_ventricle()
        cfg = small_config(steps=3)
        domain = voxelize(geom, cfg.grid)
        snapshot = simulate(geom, cfg, 0.3, domain=domain)[-1]
        velocity = snapshot.velocity
        still = domain.wall | ~domain.mask
        self.assertFalse(np.any(velocity[:, still]))
        np.testing.assert_array_equal(snapshot.vz[domain.inlet], -0.3)
        self.assertFalse(np.any(snapshot.vx[domain.inlet]))
        self.assertFalse(np.any(snapshot.vx[domain.outlet]))

    def test_divergence_bound(self):
        """Interior divergence after projection is below 1e-3 v_in / h"""
        v_in = 0.3
        for snapshot in simulate(small_ventricle(),
                                 small_config(snapshot_every=2), v_in):
            self.assertTrue(snapshot.converged)
            self.assertLess(snapshot.max_divergence, 1e-3 * v_in / SPACING)

    def test_tube_flux_balance(self):
        """Outlet flux equals inlet flux in a straight tube"""
        v_in = 0.2
        grid = GridSpec(16, SPACING)
        domain = tube_domain(grid, radius_voxels=4, length_voxels=12)
        cfg = replace(small_config(steps=20), grid=grid)
        snapshot = simulate(None, cfg, v_in, domain=domain)[-1]
        inlet_layers = np.nonzero(domain.inlet.any(axis=(1, 2)))[0]
        outlet_layers = np.nonzero(domain.outlet.any(axis=(1, 2)))[0]
        q_in = v_in * domain.inlet[inlet_layers.max()].sum() * SPACING ** 2
        q_out = flux(snapshot.velocity, outlet_layers.max(), SPACING)
        self.assertLess(abs(q_out - q_in) / q_in, 0.01)

    def test_energy_decays_without_inflow(self):
        """Stokes run with v_in = 0 never gains kinetic energy"""
        geom = small_ventricle()
        cfg = small_config(steps=8, snapshot_every=1, advection=False,
                           viscosity=0.35)
        rng = np.random.default_rng(0)
        initial = rng.standard_normal((3,) + cfg.grid.shape) * 0.1
        snapshots = simulate(geom, cfg, 0.0, initial=initial)
        energies = [kinetic_energy(s.velocity, cfg.density, SPACING)
                    for s in snapshots]
        for before, after in zip(energies, energies[1:]):
            self.assertLessEqual(after, before * (1 + 1e-10))
        self.assertLess(energies[-1], energies[0])

    def test_advective_decay(self):
        """Stopping the inflow lets an advected field lose energy"""
        geom = small_ventricle()
        cfg = small_config(steps=5)
        start = simulate(geom, cfg, 0.4)[-1].velocity
        end = simulate(geom, cfg, 0.0, initial=start)[-1].velocity
        self.assertLess(kinetic_energy(end, cfg.density, SPACING),
                        kinetic_energy(start, cfg.density, SPACING))

    def test_stokes_linearity(self):
        """Doubling v_in doubles the Stokes field"""
        geom = small_ventricle()
        cfg = small_config(steps=4, advection=False)
        single = simulate(geom, cfg, 0.15)[-1].velocity
        double = simulate(geom, cfg, 0.3)[-1].velocity
        np.testing.assert_allclose(double, 2 * single, rtol=1e-6, atol=1e-12)

    def test_non_converged_flagged(self):
        """Hitting the iteration cap flags the snapshot and warns"""
        cfg = small_config(steps=1, poisson_maxiter=1, inner_iterations=1,
                           convergence_tol=1e-14)
        with self.assertLogs('flowgen.solver', level='WARNING'):
            snapshot = simulate(small_ventricle(), cfg, 0.3)[-1]
        self.assertFalse(snapshot.converged)

    def test_initial_shape_checked(self):
        """An initial field on the wrong grid is rejected"""
        with self.assertRaises(SolverError):
            simulate(small_ventricle(), small_config(steps=1), 0.1,
                     initial=np.zeros((3, 4, 4, 4)))


class PopulationTests(SimpleTestCase):
    """Tests for plan_population and generate_population"""

    def test_default_population(self):
        """47 runs over 8 geometries"""
        plan = plan_population(seed=0)
        self.assertEqual(len(plan.runs), 47)
        self.assertEqual(len({r.geometry_id for r in plan.runs}), 8)
        self.assertEqual(len(plan.geometries), 8)

    def test_population_ranges(self):
        """Sizes are drawn from the population ranges, inlets span the sweep"""
        plan = plan_population(seed=3)
        for geom in plan.geometries:
            self.assertTrue(DIAMETER_RANGE[0] <= geom.diameter <= DIAMETER_RANGE[1])
            self.assertTrue(LONG_AXIS_RANGE[0] <= geom.long_axis <= LONG_AXIS_RANGE[1])
        velocities = [r.v_in for r in plan.runs]
        self.assertEqual(min(velocities), 0.1)
        self.assertEqual(max(velocities), 0.5)

    def test_population_deterministic(self):
        """Same seed gives identical plans"""
        self.assertEqual(plan_population(seed=7).to_dict(),
                         plan_population(seed=7).to_dict())
        self.assertNotEqual(plan_population(seed=7).to_dict(),
                            plan_population(seed=8).to_dict())

    def test_inlet_counts(self):
        """47 over 8 splits as seven 6s and one 5"""
        self.assertEqual(inlet_counts(8, 47), [6] * 7 + [5])
        with self.assertRaises(Exception):
            inlet_counts(8, 3)

    def test_single_run(self):
        """One geometry with one inlet gives one run at mid-sweep"""
        plan = plan_population(seed=0, n_geometries=1, inlets_per_geometry=1)
        self.assertEqual(len(plan.runs), 1)
        self.assertAlmostEqual(plan.runs[0].v_in, 0.3)

    def test_generate_single_run(self):
        """Generating a one-run population simulates it and reports progress"""
        cfg = SolverConfig(dt=0.004, steps=2, grid=GridSpec(32, SPACING))
        progress = MagicMock()
        population = generate_population(1, cfg, n_geometries=1,
                                         inlets_per_geometry=1, workers=2,
                                         output_fn=progress)
        run = population.plan.runs[0]
        snapshots = population.snapshots[run.run_id]
        self.assertEqual(len(snapshots), 1)
        self.assertEqual(snapshots[0].time_index, 2)
        self.assertEqual(snapshots[0].geometry_id, run.geometry_id)
        progress.assert_called_with(message='Simulated %s (1/1)' % run.run_id,
                                    percent_done=100)
