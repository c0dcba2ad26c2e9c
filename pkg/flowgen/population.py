"""
flowgen/population.py

Deterministic population plans (geometries x inlet velocities) and their
execution on a thread pool.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
from django.conf import settings

from flowgen.models import (DIAMETER_RANGE, LONG_AXIS_RANGE, INLET_RANGE,
                            VentricleGeometry, FlowgenError)
from flowgen.solver import simulate

LOGGER = logging.getLogger(__name__)

DEFAULT_GEOMETRIES = 8
DEFAULT_TOTAL_RUNS = 47

# get settings
try:
    WORKERS = settings.FLOWGEN_WORKERS
except:
    WORKERS = 4


@dataclass(frozen=True)
class SimulationRun:
    run_id: str
    geometry_id: str
    v_in: float

    def to_dict(self):
        return asdict(self)


@dataclass
class PopulationPlan:
    seed: int
    geometries: list
    runs: list

    def geometry(self, geometry_id):
        for geom in self.geometries:
            if geom.id == geometry_id:
                return geom
        raise KeyError(geometry_id)

    def to_dict(self):
        return {'seed': self.seed,
                'geometries': [g.to_dict() for g in self.geometries],
                'runs': [r.to_dict() for r in self.runs]}


@dataclass
class Population:
    plan: PopulationPlan
    # run_id -> list of FlowSnapshot
    snapshots: dict = field(default_factory=dict)


def inlet_counts(n_geometries, total_runs):
    '''Near-uniform split of total_runs; the first geometries take the
    remainder'''
    if n_geometries < 1 or total_runs < n_geometries:
        raise FlowgenError('need at least one run per geometry '
                           '(%d runs, %d geometries)' % (total_runs, n_geometries))
    base, extra = divmod(total_runs, n_geometries)
    return [base + (1 if index < extra else 0) for index in range(n_geometries)]


def inlet_velocities(count):
    '''Evenly spaced inlet velocities over the sweep; one run sits mid-sweep'''
    if count == 1:
        return [round(sum(INLET_RANGE) / 2.0, 6)]
    return [round(float(v), 6) for v in np.linspace(INLET_RANGE[0],
                                                   INLET_RANGE[1], count)]


def plan_population(seed, n_geometries=DEFAULT_GEOMETRIES,
                    inlets_per_geometry=None, total_runs=None):
    '''Draws geometry sizes uniformly from the population ranges and
    assigns inlet velocities. inlets_per_geometry fixes the per-geometry
    count; otherwise total_runs (default 47) is split near-uniformly.'''
    rng = np.random.default_rng(seed)
    if inlets_per_geometry is not None:
        counts = [int(inlets_per_geometry)] * n_geometries
    else:
        if total_runs is None:
            # same runs-per-geometry density as the 47 over 8 default
            total_runs = max(n_geometries, int(round(
                DEFAULT_TOTAL_RUNS * n_geometries / float(DEFAULT_GEOMETRIES))))
        counts = inlet_counts(n_geometries, total_runs)
    geometries = []
    runs = []
    for index in range(n_geometries):
        geometry_id = 'geom-%02d' % index
        diameter = round(float(rng.uniform(*DIAMETER_RANGE)), 3)
        long_axis = round(float(rng.uniform(*LONG_AXIS_RANGE)), 3)
        geometries.append(VentricleGeometry.create(geometry_id, diameter, long_axis))
        for run_index, v_in in enumerate(inlet_velocities(counts[index])):
            runs.append(SimulationRun('%s-r%02d' % (geometry_id, run_index),
                                      geometry_id, v_in))
    return PopulationPlan(seed=seed, geometries=geometries, runs=runs)


def run_plan(plan, cfg, workers=None, output_fn=None):
    '''Simulates every run of plan; results come back in plan order'''
    workers = workers or WORKERS
    geometries = {g.id: g for g in plan.geometries}
    total = len(plan.runs)

    def _run(run):
        return simulate(geometries[run.geometry_id], cfg, run.v_in)

    population = Population(plan=plan)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = executor.map(_run, plan.runs)
        for index, (run, snapshots) in enumerate(zip(plan.runs, results)):
            population.snapshots[run.run_id] = snapshots
            # progress is reported from the calling thread only
            if output_fn:
                output_fn(message='Simulated %s (%d/%d)'
                          % (run.run_id, index + 1, total),
                          percent_done=int(100 * (index + 1) / total))
    return population


def generate_population(seed, cfg, n_geometries=DEFAULT_GEOMETRIES,
                        inlets_per_geometry=None, total_runs=None,
                        workers=None, output_fn=None):
    '''Plans and simulates a population. Returns a Population holding the
    plan (the run manifest) and the snapshots per run.'''
    plan = plan_population(seed, n_geometries, inlets_per_geometry, total_runs)
    LOGGER.info('population seed %s: %d runs over %d geometries',
                seed, len(plan.runs), len(plan.geometries))
    return run_plan(plan, cfg, workers=workers, output_fn=output_fn)
