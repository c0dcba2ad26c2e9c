"""
Unit tests for datapipe
"""
import json
import os
import shutil
import tempfile

from django.test import SimpleTestCase
from unittest.mock import patch

import numpy as np

from flowgen.geometry import compute_rdf
from flowgen.models import FlowSnapshot
from flowgen.population import Population, plan_population

from datapipe import utils
from datapipe.dataset import build_dataset
from datapipe.folds import get_fold, kfold, read_folds, split_records, write_folds
from datapipe.manifest import (SampleStore, manifest_path, read_manifest,
                               verify_manifest, write_manifest)
from datapipe.models import (DataError, FoldError, FoldSplit, ManifestError,
                             MaskError, Normalization, NormalizationError,
                             Sample, VolumeFormatError)
from datapipe.preprocess import (assemble_batch, assemble_input, build_sample,
                                 denormalize, denormalize_v_in,
                                 fit_normalization, interpolate_to_grid,
                                 make_sparse_mask, normalize, peak_speed,
                                 rescale)
from datapipe.volumes import HEADER, read_header, read_volume, write_volume


def sphere_mask(size, radius):
    idx = np.arange(size) - (size - 1) / 2.0
    z, y, x = np.meshgrid(idx, idx, idx, indexing='ij')
    return (x ** 2 + y ** 2 + z ** 2 <= radius ** 2).astype(np.float64)


def fake_snapshot(geometry_id='geom-00', v_in=0.3, size=12, seed=0, scale=1.0):
    mask = sphere_mask(size, size / 2.0 - 1)
    rng = np.random.default_rng(seed)
    fields = [rng.uniform(-1, 1, mask.shape) * mask * scale for _ in range(3)]
    return FlowSnapshot(vx=fields[0], vy=fields[1], vz=fields[2], mask=mask,
                        v_in=v_in, geometry_id=geometry_id, time_index=10)


def fake_sample(seed=0, size=12):
    snapshot = fake_snapshot(seed=seed, size=size)
    return build_sample(snapshot, Normalization(1.0), 'run-%d' % seed, seed)


class TempDirMixin(object):

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir, ignore_errors=True)


class ChecksumTests(SimpleTestCase):
    """Tests for the FNV-1a checksum"""

    def test_known_vectors(self):
        """Published FNV-1a 64 test vectors"""
        self.assertEqual(utils.fnv1a64(b''), 0xcbf29ce484222325)
        self.assertEqual(utils.fnv1a64(b'a'), 0xaf63dc4c8601ec8c)
        self.assertEqual(utils.fnv1a64(b'foobar'), 0x85944171f73967e8)

    def test_kernel_matches_python_loop(self):
        """Compiled and fallback loops agree"""
        data = np.random.default_rng(1).integers(0, 256, 4096, dtype=np.uint8)
        self.assertEqual(utils.fnv1a64(data.tobytes()),
                         utils._fnv1a_python(data))

    def test_fallback_without_numba(self):
        """The python loop is used when no kernel is available"""
        with patch.object(utils, '_fnv1a_kernel', None):
            self.assertEqual(utils.fnv1a64(b'a'), 0xaf63dc4c8601ec8c)

    def test_derive_seed(self):
        """Derived seeds are deterministic and distinct per index"""
        self.assertEqual(utils.derive_seed(3, 1), utils.derive_seed(3, 1))
        self.assertNotEqual(utils.derive_seed(3, 1), utils.derive_seed(3, 2))


class VolumeTests(TempDirMixin, SimpleTestCase):
    """Tests for the SFV1 volume format"""

    def path(self, name='v.sfv'):
        return os.path.join(self.tmpdir, name)

    def test_round_trip_bit_exact(self):
        """read(write(x)) == x bit for bit"""
        volume = np.random.default_rng(0).standard_normal((3, 4, 5, 6)).astype(np.float32)
        volume[0, 0, 0, 0] = -0.0
        write_volume(self.path(), volume)
        restored = read_volume(self.path())
        self.assertEqual(restored.shape, volume.shape)
        np.testing.assert_array_equal(restored.view(np.uint32),
                                      volume.view(np.uint32))

    def test_three_dimensional_promoted(self):
        """A [D, H, W] field is stored with one channel"""
        write_volume(self.path(), np.ones((2, 3, 4), dtype=np.float32))
        self.assertEqual(read_volume(self.path()).shape, (1, 2, 3, 4))
        self.assertEqual(read_header(self.path())[0], (1, 2, 3, 4))

    def test_header_layout(self):
        """25-byte header, float32 payload, 8-byte trailer"""
        write_volume(self.path(), np.zeros((1, 2, 2, 2), dtype=np.float32))
        with open(self.path(), 'rb') as fileref:
            data = fileref.read()
        self.assertEqual(HEADER.size, 25)
        self.assertEqual(len(data), 25 + 8 * 4 + 8)
        self.assertEqual(data[:4], b'SFV1')

    def test_truncated_rejected(self):
        """A truncated file is rejected"""
        write_volume(self.path(), np.ones((1, 4, 4, 4), dtype=np.float32))
        with open(self.path(), 'rb') as fileref:
            data = fileref.read()
        with open(self.path(), 'wb') as fileref:
            fileref.write(data[:-20])
        with self.assertRaises(VolumeFormatError):
            read_volume(self.path())

    def test_declared_shape_mismatch_rejected(self):
        """Header shape disagreeing with the payload is rejected"""
        write_volume(self.path(), np.ones((1, 4, 4, 4), dtype=np.float32))
        with open(self.path(), 'r+b') as fileref:
            fileref.seek(8)
            fileref.write((2).to_bytes(4, 'little'))
        with self.assertRaisesRegex(VolumeFormatError, 'declares'):
            read_volume(self.path())

    def test_checksum_mismatch_rejected(self):
        """A flipped payload byte fails the checksum"""
        write_volume(self.path(), np.ones((1, 4, 4, 4), dtype=np.float32))
        with open(self.path(), 'r+b') as fileref:
            fileref.seek(30)
            fileref.write(b'\x01')
        with self.assertRaisesRegex(VolumeFormatError, 'checksum'):
            read_volume(self.path())

    def test_bad_magic_rejected(self):
        """Unknown magic is rejected"""
        write_volume(self.path(), np.ones((1, 2, 2, 2), dtype=np.float32))
        with open(self.path(), 'r+b') as fileref:
            fileref.write(b'XXXX')
        with self.assertRaisesRegex(VolumeFormatError, 'magic'):
            read_volume(self.path())

    def test_bad_rank_rejected(self):
        """2-D arrays are not volumes"""
        with self.assertRaises(VolumeFormatError):
            write_volume(self.path(), np.ones((4, 4)))

    def test_missing_file(self):
        """Missing files raise a data error naming the path"""
        with self.assertRaisesRegex(DataError, 'nope.sfv'):
            read_volume(self.path('nope.sfv'))


class NormalizationTests(SimpleTestCase):
    """Tests for normalize and denormalize"""

    def test_peak_becomes_one(self):
        """Speed with max |v| = 0.5 normalizes to peak 1"""
        snapshot = fake_snapshot(scale=0.2)
        snapshot.vx[5, 5, 5] = -0.5
        snapshot.vy[5, 5, 5] = 0.0
        snapshot.vz[5, 5, 5] = 0.0
        norm = fit_normalization([snapshot])
        self.assertEqual(norm.velocity_scale, 0.5)
        fields, v_in = normalize(snapshot, norm)
        speed = np.sqrt(sum(f ** 2 for f in fields.values()))
        self.assertEqual(speed.max(), 1.0)
        self.assertAlmostEqual(v_in, 0.6)

    def test_peak_is_speed(self):
        """The scale is the peak speed, not the peak component"""
        snapshot = fake_snapshot(scale=0.0)
        snapshot.vx[5, 5, 5] = 0.3
        snapshot.vy[5, 5, 5] = 0.4
        self.assertAlmostEqual(peak_speed([snapshot]), 0.5)

    def test_round_trip(self):
        """denormalize(normalize(x)) recovers x"""
        snapshot = fake_snapshot(scale=0.37)
        norm = fit_normalization([snapshot])
        fields, v_in = normalize(snapshot, norm)
        np.testing.assert_allclose(denormalize(fields['y'], norm), snapshot.vy,
                                   rtol=1e-6)
        self.assertAlmostEqual(denormalize_v_in(v_in, norm), snapshot.v_in)

    def test_global_over_runs(self):
        """The scale is the peak over every run"""
        low = fake_snapshot(seed=1, scale=0.1)
        high = fake_snapshot(seed=2, scale=0.8)
        norm = fit_normalization([low, high])
        self.assertEqual(norm.velocity_scale,
                         float(np.sqrt((high.velocity ** 2).sum(0)).max()))

    def test_zero_dataset_rejected(self):
        """An all-zero dataset cannot be normalized"""
        with self.assertRaises(NormalizationError):
            fit_normalization([fake_snapshot(scale=0.0)])

    def test_non_finite_rejected(self):
        """NaN velocities are rejected"""
        snapshot = fake_snapshot()
        snapshot.vz[0, 0, 0] = np.nan
        with self.assertRaises(NormalizationError):
            fit_normalization([snapshot])
        with self.assertRaises(NormalizationError):
            normalize(snapshot, Normalization(1.0))


class SparseMaskTests(SimpleTestCase):
    """Tests for make_sparse_mask"""

    def setUp(self):
        self.mask = np.zeros((10, 10, 20))
        self.mask[:, :, :10] = 1.0

    def test_exact_count(self):
        """N_in = 1000 at 5% selects exactly 50 voxels"""
        sparse = make_sparse_mask(self.mask, 0.05, seed=0)
        self.assertEqual(int(sparse.sum()), 50)

    def test_subset_of_ventricle(self):
        """Every selected voxel is inside the ventricle"""
        sparse = make_sparse_mask(self.mask, 0.05, seed=4)
        self.assertFalse(np.any((sparse > 0) & (self.mask == 0)))

    def test_deterministic(self):
        """Same seed gives the same mask, different seeds differ"""
        np.testing.assert_array_equal(make_sparse_mask(self.mask, seed=9),
                                      make_sparse_mask(self.mask, seed=9))
        for a, b in ((0, 1), (2, 3), (10, 11)):
            self.assertFalse(np.array_equal(make_sparse_mask(self.mask, seed=a),
                                            make_sparse_mask(self.mask, seed=b)))

    def test_floor_remainder(self):
        """Density misses 5% by less than one voxel"""
        mask = sphere_mask(16, 6.5)
        n_inside = int(mask.sum())
        count = int(make_sparse_mask(mask, seed=0).sum())
        self.assertLess(abs(count / n_inside - 0.05), 1.0 / n_inside)
        self.assertEqual(count, int(np.floor(0.05 * n_inside)))

    def test_invalid_fraction(self):
        """Fractions outside (0, 1) are rejected"""
        for fraction in (0.0, 1.0, -0.1):
            with self.assertRaises(MaskError):
                make_sparse_mask(self.mask, fraction)

    def test_degenerate_rejected(self):
        """A mask too small to yield a voxel is rejected"""
        mask = np.zeros((4, 4, 4))
        mask[:2, :2, :2] = 1
        with self.assertRaises(MaskError):
            make_sparse_mask(mask, 0.05)


class AssembleTests(SimpleTestCase):
    """Tests for build_sample and assemble_input"""

    def test_sample_invariants(self):
        """Sparse mask is 5% of the ventricle and inside it"""
        sample = fake_sample()
        self.assertEqual(sample.n_sparse, int(np.floor(0.05 * sample.n_inside)))
        self.assertFalse(np.any((sample.sparse_mask > 0) & (sample.ventricle_mask == 0)))
        self.assertEqual(sample.rdf.max(), 1.0)

    def test_input_layout(self):
        """Channel 0 is the sparse component, channel 1 the RDF"""
        sample = fake_sample()
        inputs, target = assemble_input(sample, 'y')
        self.assertEqual(inputs.shape, (2,) + sample.shape)
        self.assertEqual(target.shape, (1,) + sample.shape)
        np.testing.assert_array_equal(target[0], sample.vy)
        np.testing.assert_array_equal(inputs[0], sample.vy * sample.sparse_mask)
        self.assertLessEqual(np.count_nonzero(inputs[0]), sample.n_sparse)

    def test_rdf_pass_through(self):
        """RDF channel is the distance field untouched"""
        sample = fake_sample()
        inputs, _target = assemble_input(sample, 'x')
        expected = compute_rdf(sample.ventricle_mask > 0).astype(np.float32)
        np.testing.assert_array_equal(inputs[1], expected)

    def test_mask_shared_across_components(self):
        """The sparse supports of the three components are one set"""
        sample = fake_sample()
        supports = [assemble_input(sample, c)[0][0] != 0 for c in 'xyz']
        # random velocities are nonzero almost surely inside the ventricle
        np.testing.assert_array_equal(supports[0], supports[1])
        np.testing.assert_array_equal(supports[1], supports[2])
        np.testing.assert_array_equal(supports[0], sample.sparse_mask > 0)

    def test_zero_snapshot(self):
        """A zero-velocity sample gives zero sparse input and target"""
        sample = fake_sample()
        sample.vx = np.zeros_like(sample.vx)
        inputs, target = assemble_input(sample, 'x')
        self.assertFalse(np.any(inputs[0]))
        self.assertFalse(np.any(target))

    def test_input_variants(self):
        """RDF can be dropped and v_in appended as a channel"""
        sample = fake_sample()
        inputs, _target = assemble_input(sample, 'z', rdf=False)
        self.assertEqual(inputs.shape[0], 1)
        inputs, _target = assemble_input(sample, 'z', v_in_channel=True)
        self.assertEqual(inputs.shape[0], 3)
        self.assertTrue(np.all(inputs[2] == np.float32(sample.v_in)))

    def test_missing_rdf(self):
        """A sample without RDF cannot feed an RDF input"""
        sample = fake_sample()
        sample.rdf = None
        with self.assertRaises(DataError):
            assemble_input(sample, 'x')
        self.assertEqual(assemble_input(sample, 'x', rdf=False)[0].shape[0], 1)

    def test_unknown_component(self):
        with self.assertRaises(DataError):
            assemble_input(fake_sample(), 'w')

    def test_batch(self):
        """Batches stack inputs, targets and v_in"""
        samples = [fake_sample(seed) for seed in range(3)]
        inputs, targets, v_in = assemble_batch(samples, 'x')
        self.assertEqual(inputs.shape, (3, 2) + samples[0].shape)
        self.assertEqual(targets.shape, (3, 1) + samples[0].shape)
        self.assertEqual(v_in.shape, (3,))

    def test_trilinear_exact_on_affine(self):
        """Trilinear resampling reproduces an affine field"""
        idx = np.arange(16, dtype=np.float64)
        z, y, x = np.meshgrid(idx, idx, idx, indexing='ij')
        field = 1.0 + 2.0 * z + 3.0 * y - x
        out = interpolate_to_grid(field, (8, 8, 8))
        jdx = 2.0 * np.arange(8) + 0.5
        z, y, x = np.meshgrid(jdx, jdx, jdx, indexing='ij')
        np.testing.assert_allclose(out, 1.0 + 2.0 * z + 3.0 * y - x, atol=1e-10)

    def test_resample_to_sample_grid(self):
        """Samples can be built on a coarser grid than the solver's"""
        snapshot = fake_snapshot(size=16)
        sample = build_sample(snapshot, Normalization(1.0), 'r', 0, shape=(8, 8, 8))
        self.assertEqual(sample.shape, (8, 8, 8))
        self.assertFalse(np.any(sample.vx[sample.ventricle_mask == 0]))


class FoldTests(TempDirMixin, SimpleTestCase):
    """Tests for kfold"""

    ids = ['geom-%02d' % i for i in range(8)]

    def test_eight_geometry_protocol(self):
        """8 geometries in 5 folds give 6 / 1 / 1"""
        folds = kfold(self.ids, k=5, seed=0)
        self.assertEqual(len(folds), 5)
        for split in folds:
            self.assertEqual((len(split.train), len(split.val), len(split.test)),
                             (6, 1, 1))
            self.assertEqual(sorted(split.geometry_ids), self.ids)
            self.assertEqual(len(set(split.geometry_ids)), 8)

    def test_test_geometry_rotates(self):
        """No geometry is the test geometry twice"""
        tests = [split.test[0] for split in kfold(self.ids, k=8, seed=2)]
        self.assertEqual(sorted(tests), self.ids)

    def test_deterministic(self):
        self.assertEqual(kfold(self.ids, seed=5), kfold(self.ids, seed=5))

    def test_rejections(self):
        """Too many folds or too few geometries are rejected"""
        with self.assertRaises(FoldError):
            kfold(self.ids, k=9)
        with self.assertRaises(FoldError):
            kfold(self.ids[:2], k=1)
        with self.assertRaises(FoldError):
            FoldSplit(fold=0, train=('a', 'b'), val=('b',), test=('c',))

    def test_files(self):
        """folds.json round trips"""
        folds = kfold(self.ids, seed=1)
        write_folds(self.tmpdir, folds, seed=1)
        self.assertEqual(read_folds(self.tmpdir), folds)
        self.assertEqual(get_fold(self.tmpdir, 2), folds[2])
        with self.assertRaises(FoldError):
            get_fold(self.tmpdir, 5)


class DatasetTests(TempDirMixin, SimpleTestCase):
    """Tests for build_dataset, the manifest and SampleStore"""

    def make_population(self, n_geometries=3):
        plan = plan_population(seed=0, n_geometries=n_geometries,
                               inlets_per_geometry=2)
        population = Population(plan=plan)
        for index, run in enumerate(plan.runs):
            population.snapshots[run.run_id] = [
                fake_snapshot(run.geometry_id, run.v_in, seed=index, scale=0.2)]
        return population

    def build(self, name='data', **kwargs):
        path = os.path.join(self.tmpdir, name)
        manifest = build_dataset(self.make_population(), path, seed=4, k=3,
                                 **kwargs)
        return path, manifest

    def test_layout(self):
        """Manifest, folds and one sample file per run"""
        path, manifest = self.build(config={'scale': 'desk'})
        self.assertEqual(len(manifest.records), 6)
        self.assertTrue(os.path.exists(manifest_path(path)))
        self.assertEqual(len(read_folds(path)), 3)
        restored = read_manifest(path)
        self.assertEqual(restored.to_dict(), manifest.to_dict())
        self.assertEqual(restored.config, {'scale': 'desk'})
        self.assertTrue(verify_manifest(path, restored, full=True))

    def test_store_reads_samples(self):
        """Samples read back carry the manifest metadata"""
        path, manifest = self.build()
        store = SampleStore(path)
        record = manifest.records[1]
        sample = store.load(record.run_id)
        self.assertIsInstance(sample, Sample)
        self.assertEqual(sample.geometry_id, record.geometry_id)
        self.assertEqual(sample.n_sparse, record.n_sparse)
        self.assertAlmostEqual(sample.v_in, record.v_in / 0.5)
        self.assertEqual(store.shape(), (12, 12, 12))
        split = read_folds(path)[0]
        groups = split_records(store.records, split)
        self.assertEqual(sum(len(g) for g in groups.values()), 6)
        self.assertEqual(len(groups['test']), 2)

    def test_deterministic(self):
        """Same seed gives identical checksums"""
        _path, first = self.build('a')
        _path, second = self.build('b')
        self.assertEqual([r.checksum for r in first.records],
                         [r.checksum for r in second.records])

    def test_fold_scale_ignores_held_out_geometries(self):
        """A fold's velocity scale and train samples do not depend on the
        flow of its val and test geometries"""
        path, manifest = self.build('base')
        split = read_folds(path)[0]
        held_out = set(split.val) | set(split.test)
        population = self.make_population()
        for index, run in enumerate(population.plan.runs):
            if run.geometry_id in held_out:
                population.snapshots[run.run_id] = [fake_snapshot(
                    run.geometry_id, run.v_in, seed=index, scale=2.0)]
        other = os.path.join(self.tmpdir, 'louder')
        build_dataset(population, other, seed=4, k=3)
        other_split = read_folds(other)[0]
        self.assertEqual(other_split.train, split.train)
        self.assertEqual(other_split.velocity_scale, split.velocity_scale)
        first = SampleStore(path).fold_samples(split)
        second = SampleStore(other).fold_samples(other_split)
        for a, b in zip(first['train'], second['train']):
            np.testing.assert_allclose(a.vx, b.vx, rtol=1e-5, atol=1e-7)
        for a, b in zip(first['test'], second['test']):
            np.testing.assert_allclose(b.vy, 10.0 * a.vy, rtol=1e-4, atol=1e-6)

    def test_fold_train_peak_is_one(self):
        """Train samples of a fold reach normalized speed 1"""
        path, manifest = self.build()
        store = SampleStore(path)
        for split in read_folds(path):
            train_peak = max(r.peak_speed for r in manifest.records
                             if r.geometry_id in split.train)
            self.assertEqual(split.velocity_scale, train_peak)
            speed = max(float(np.sqrt(s.vx ** 2 + s.vy ** 2 + s.vz ** 2).max())
                        for s in store.fold_samples(split)['train'])
            self.assertAlmostEqual(speed, 1.0, places=5)

    def test_rescale(self):
        """rescale converts between two normalizations"""
        sample = fake_sample()
        moved = rescale(sample, Normalization(2.0), Normalization(4.0))
        np.testing.assert_allclose(moved.vz, sample.vz * 0.5, rtol=1e-6)
        self.assertIs(rescale(sample, Normalization(2.0), Normalization(2.0)),
                      sample)

    def test_verify_detects_tampering(self):
        """Checksum and missing-file mismatches are reported"""
        path, manifest = self.build()
        manifest.records[0].checksum = '0' * 16
        with self.assertRaisesRegex(ManifestError, 'checksum'):
            verify_manifest(path, manifest)
        os.remove(os.path.join(path, manifest.records[1].path))
        with self.assertRaisesRegex(ManifestError, 'missing'):
            verify_manifest(path, read_manifest(path))

    def test_bad_manifest_version(self):
        """Unknown manifest versions are rejected"""
        path, manifest = self.build()
        with open(manifest_path(path), encoding='utf-8') as fileref:
            data = json.load(fileref)
        data['version'] = 99
        with open(manifest_path(path), 'w', encoding='utf-8') as fileref:
            json.dump(data, fileref)
        with self.assertRaises(ManifestError):
            read_manifest(path)

    def test_missing_dataset(self):
        """Opening an empty directory names the expected manifest"""
        with self.assertRaisesRegex(ManifestError, 'manifest.json'):
            SampleStore(self.tmpdir)

    def test_unconverged_skipped(self):
        """Non-converged runs are dropped unless kept"""
        population = self.make_population()
        first = population.plan.runs[0].run_id
        population.snapshots[first][-1].converged = False
        path = os.path.join(self.tmpdir, 'skip')
        with self.assertLogs('datapipe.dataset', level='WARNING'):
            manifest = build_dataset(population, path, seed=0, k=3,
                                     keep_unconverged=False)
        self.assertNotIn(first, [r.run_id for r in manifest.records])
        manifest = build_dataset(population, path, seed=0, k=3,
                                 keep_unconverged=True)
        self.assertIn(first, [r.run_id for r in manifest.records])

    def test_write_manifest_round_trip(self):
        path, manifest = self.build()
        write_manifest(path, manifest)
        self.assertEqual(read_manifest(path).records, manifest.records)
