import os
from tempfile import TemporaryDirectory
from unittest import TestCase, main, skipUnless

import numpy as np

from nearmiss.BlockExtractor import BLOCK_COVARIATES, load_site_map
from nearmiss.HierarchicalGev import HBSGRP, MCMCConfig, ModelSpec, run_mcmc
from nearmiss.NearMissDetector import VI, VV, DetectionConfig, NearMissDetector, read_boundaries
from nearmiss.dynamics import DEFAULT_VEHICLE
from nearmiss.kinematics import ProcessedTrack, TrackProcessor, read_tracks, read_vehicle_table
from nearmiss.synth import SynthConfigError, SyntheticCorridorSpec, head_on_contact_time, \
    match_ground_truth, synthesize_corpus, synthesize_records, truth_coefficients, write_corpus
from nearmiss.utils import read_csv

SLOW = bool(os.environ.get('NEARMISS_SLOW_TESTS'))


def ideal_tracks(frame):
    ''' Processed tracks of a noise-free scripted scenario with constant speed and heading rate. '''

    tracks = []
    for agent_id, rows in frame.groupby('agent_id', sort=True):
        t = rows['t'].to_numpy()
        vx, vy = rows['vx'].to_numpy(), rows['vy'].to_numpy()
        theta = np.unwrap(np.arctan2(vy, vx))
        v = np.hypot(vx, vy)
        yaw_rate = np.gradient(theta, t)
        delta = np.arctan(DEFAULT_VEHICLE.wheelbase * yaw_rate / v)
        zeros = np.zeros(len(t))
        tracks.append(ProcessedTrack(agent_id, t, rows['x'].to_numpy(), rows['y'].to_numpy(), vx, vy,
                                     v, zeros, theta, yaw_rate, delta))
    return tracks


class TestSpec(TestCase):

    def test_validation(self):
        with self.assertRaises(SynthConfigError):
            SyntheticCorridorSpec(blocks_per_group=10)
        with self.assertRaises(SynthConfigError):
            SyntheticCorridorSpec(mu_fixed={'speed': 0.1})
        with self.assertRaises(SynthConfigError):
            SyntheticCorridorSpec(random_covariate='lane_count')
        with self.assertRaises(SynthConfigError):
            SyntheticCorridorSpec(slot_spacing=20.0)
        with self.assertRaises(SynthConfigError):
            SyntheticCorridorSpec(drift_rate=3.0)

    def test_contact_formula(self):
        self.assertAlmostEqual(head_on_contact_time(20.0, 10.0, 0.3), 1.97)


class TestRecords(TestCase):

    def test_layout_and_determinism(self):
        spec = SyntheticCorridorSpec(groups=4, blocks_per_group=30)
        records, coeffs = synthesize_records(spec, 5)
        self.assertEqual(len(records), 120)
        self.assertEqual(sorted({r.group_id for r in records}), ['G1', 'G2', 'G3', 'G4'])
        self.assertTrue(all(r.y >= 1 for r in records))
        self.assertEqual(sorted(records[0].covariates), ['rel_distance', 'rel_speed'])
        self.assertTrue(set(records[0].covariates) <= set(BLOCK_COVARIATES))

        again, _ = synthesize_records(spec, 5)
        self.assertEqual([r.z for r in again], [r.z for r in records])
        other, _ = synthesize_records(spec, 6)
        self.assertNotEqual([r.z for r in other], [r.z for r in records])

        expected = truth_coefficients(spec, np.random.SeedSequence(5).spawn(2)[0])
        np.testing.assert_array_equal(coeffs.mu_random['rel_speed'], expected.mu_random['rel_speed'])
        self.assertEqual(coeffs.mu, {'intercept': -1.8, 'rel_distance': 0.15})

    @skipUnless(SLOW, "set NEARMISS_SLOW_TESTS to run long MCMC tests")
    def test_recovery(self):
        spec = SyntheticCorridorSpec(groups=3, blocks_per_group=200, random_sd=0.0)
        records, coeffs = synthesize_records(spec, 8)
        model = ModelSpec(HBSGRP, mu_fixed=('rel_distance',), mu_random=('rel_speed',))
        chain = run_mcmc(records, model, mcmc_cfg=MCMCConfig(iterations=20000, burn_in=5000), seed=1)
        self.assertAlmostEqual(float(chain.column('mu.intercept').mean()), -1.8, delta=0.1)
        self.assertAlmostEqual(float(chain.column('mu.rel_distance').mean()), 0.15, delta=0.05)
        self.assertAlmostEqual(float(chain.column('xi.intercept').mean()), -0.3, delta=0.1)
        for group in coeffs.groups:
            self.assertAlmostEqual(float(chain.column(f"mu.rel_speed[{group}]").mean()), 0.25, delta=0.1)


class TestCorpus(TestCase):

    def test_head_on_truth(self):
        spec = SyntheticCorridorSpec(groups=1, head_on=1, drift=0, turning=0)
        corpus = synthesize_corpus(spec, 3)
        self.assertEqual(list(corpus.scenarios), ['G1-head_on-000'])
        self.assertEqual(len(corpus.truth), 1)
        row = corpus.truth.iloc[0]
        self.assertEqual((row['kind'], row['ego'], row['other']), (VV, 'A', 'B'))

        frame = corpus.scenarios['G1-head_on-000']
        a, b = frame[frame['agent_id'] == 'A'], frame[frame['agent_id'] == 'B']
        gap = b['x'].iloc[0] - a['x'].iloc[0] - DEFAULT_VEHICLE.length
        self.assertAlmostEqual(row['contact_time'], head_on_contact_time(gap, 2 * spec.speed, 0.3))
        # contact lies beyond the recording, inside the horizon of the truth frame
        self.assertGreater(row['contact_time'], frame['t'].max())
        self.assertTrue(0.0 < row['t_c'] <= 2.9 + 1e-9)
        self.assertAlmostEqual(row['frame_t'] + row['t_c'], row['contact_time'])

    def test_head_on_detection_recovers_truth(self):
        spec = SyntheticCorridorSpec(groups=2, head_on=4, drift=0, turning=0)
        corpus = synthesize_corpus(spec, 9)
        detector = NearMissDetector(DetectionConfig())
        events = detector.scan_all({sid: ideal_tracks(frame) for sid, frame in corpus.scenarios.items()})
        matched = match_ground_truth(corpus.truth, events, tolerance=0.1)
        self.assertEqual(len(matched), 8)
        self.assertTrue(matched['recovered'].all())
        self.assertTrue((matched['detected_t_c'] >= matched['t_c'] - 1e-9).all())

    def test_preprocessed_corpus_recovers_truth(self):
        spec = SyntheticCorridorSpec(groups=1, head_on=4, drift=4, turning=4)
        corpus = synthesize_corpus(spec, 21)
        with TemporaryDirectory() as tmp:
            tracks_dir = os.path.join(tmp, 'tracks')
            write_corpus(corpus, tracks_dir, os.path.join(tmp, 'vehicles.csv'), os.path.join(tmp, 'boundaries.json'),
                         os.path.join(tmp, 'site_map.json'), os.path.join(tmp, 'truth.csv'))
            vehicles = read_vehicle_table(os.path.join(tmp, 'vehicles.csv'))
            processor = TrackProcessor()
            scenarios = {sid: processor.process_all(read_tracks(os.path.join(tracks_dir, f"{sid}.csv")), vehicles)
                         for sid in corpus.scenarios}
            detector = NearMissDetector(DetectionConfig(), read_boundaries(os.path.join(tmp, 'boundaries.json')))
            events = detector.scan_all(scenarios)

        matched = match_ground_truth(corpus.truth, events, tolerance=0.1)
        self.assertEqual(sorted(matched['scenario'].unique()), ['drift', 'head_on', 'turn'])
        for scenario, rows in matched.groupby('scenario'):
            self.assertGreaterEqual(rows['recovered'].mean(), 0.95, scenario)

    def test_edge_scenarios(self):
        spec = SyntheticCorridorSpec(groups=1, head_on=0, drift=3, turning=3)
        corpus = synthesize_corpus(spec, 4)
        self.assertEqual(len(corpus.boundaries), 6)
        self.assertEqual(len(corpus.truth), 6)
        self.assertTrue((corpus.truth['kind'] == VI).all())
        self.assertTrue(((corpus.truth['t_c'] > 0) & (corpus.truth['t_c'] <= 3.0)).all())
        self.assertEqual(sorted(corpus.truth['scenario'].unique()), ['drift', 'turn'])

    def test_determinism_and_noise(self):
        spec = SyntheticCorridorSpec(groups=1, head_on=2, drift=1, turning=1)
        first, again = synthesize_corpus(spec, 12), synthesize_corpus(spec, 12)
        for sid in first.scenarios:
            self.assertTrue(first.scenarios[sid].equals(again.scenarios[sid]))
        self.assertTrue(first.truth.equals(again.truth))

        noisy = synthesize_corpus(SyntheticCorridorSpec(groups=1, head_on=2, drift=1, turning=1, noise=0.05), 12)
        sid = sorted(first.scenarios)[0]
        self.assertFalse(np.allclose(first.scenarios[sid]['x'], noisy.scenarios[sid]['x']))
        self.assertTrue(first.truth.equals(noisy.truth))

    def test_written_corpus_reads_back(self):
        spec = SyntheticCorridorSpec(groups=2, head_on=1, drift=1, turning=0)
        corpus = synthesize_corpus(spec, 1)
        with TemporaryDirectory() as tmp:
            written = write_corpus(corpus, os.path.join(tmp, 'tracks'), os.path.join(tmp, 'vehicles.csv'),
                                   os.path.join(tmp, 'boundaries.json'), os.path.join(tmp, 'site_map.json'),
                                   os.path.join(tmp, 'truth.csv'), 'seed=1 config=x')
            self.assertEqual(len(written), 4 + 4)
            self.assertEqual(len(read_boundaries(os.path.join(tmp, 'boundaries.json'))), 2)
            site_map = load_site_map(os.path.join(tmp, 'site_map.json'))
            self.assertEqual([g.group_id for g in site_map], ['G1', 'G2'])
            tracks = read_tracks(os.path.join(tmp, 'tracks', 'G1-head_on-000.csv'))
            self.assertEqual(sorted(t.agent_id for t in tracks), ['A', 'B'])
            self.assertEqual(len(read_csv(os.path.join(tmp, 'truth.csv'))), len(corpus.truth))


if __name__ == "__main__":
    main()
