import json
import os
from tempfile import TemporaryDirectory
from unittest import TestCase, main

import numpy as np
from shapely.geometry import Point, Polygon

from nearmiss.BlockExtractor import BlockConfig, BlockDataError, BlockExtractor, BlockRecord, GroupSpec, \
    GroupedEvent, OverlappingRegionsError, SiteMapError, StandardizationReport, apply_standardization, \
    assign_groups, destandardize, exposure_by_group, extract_block_maxima, load_site_map, read_blocks, \
    read_report, small_groups, standardize_covariates, write_blocks, write_report
from nearmiss.NearMissDetector import VI, VV, NearMissEvent
from nearmiss.kinematics import ProcessedTrack


def box(x0, y0, x1, y1) -> Polygon:
    return Polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


site_map = [
    GroupSpec('G1', box(0, 0, 100, 10), lane_count=2, lane_width=3.5),
    GroupSpec('G2', box(100, 0, 200, 10), kind='intersection', median='divided', lane_count=4),
]


def event(ttc, t=0.0, x=50.0, y=5.0, kind=VV, ego='A', other='B', scenario='S', rel_accel=0.0):
    return NearMissEvent(kind, ttc, ttc, ego, other, 1, 2, t, scenario, x, y,
                         {'rel_speed': 10.0 - ttc, 'rel_accel': rel_accel, 'rel_distance': 2.0 * ttc,
                          'volume': 3.0, 'turn_left': 0.0, 'turn_right': 1.0, 'lane_change': 1.0})


class TestGroups(TestCase):

    def test_assignment_and_drops(self):
        events = [event(1.0, x=50.0), event(1.0, x=150.0), event(1.0, x=250.0)]
        grouped, dropped = assign_groups(events, site_map)
        self.assertEqual([g.group_id for g in grouped], ['G1', 'G2'])
        self.assertEqual(dropped, 1)

    def test_random_events_match_point_in_polygon(self):
        rng = np.random.default_rng(2)
        regions = [GroupSpec('T', Polygon([(0, 0), (10, 0), (5, 8)])),
                   GroupSpec('Q', box(20, 0, 30, 10))]
        xs, ys = rng.uniform(-5, 35, 100), rng.uniform(-2, 12, 100)
        events = [event(1.0, x=x, y=y) for x, y in zip(xs, ys)]
        grouped, dropped = assign_groups(events, regions)

        expected = []
        for x, y in zip(xs, ys):
            for region in regions:
                if region.polygon.intersects(Point(x, y)):
                    expected.append(region.group_id)
                    break
        self.assertEqual([g.group_id for g in grouped], expected)
        self.assertEqual(dropped, 100 - len(expected))

    def test_overlapping_regions(self):
        overlapping = [GroupSpec('a', box(0, 0, 10, 10)), GroupSpec('b', box(5, 5, 15, 15))]
        with self.assertRaises(OverlappingRegionsError):
            BlockExtractor(overlapping)
        # shared edges are fine
        BlockExtractor(site_map)

    def test_site_map_file(self):
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'site_map.json')
            with open(path, 'w') as fh:
                json.dump([{'group_id': 'G1', 'kind': 'segment', 'direction': 'NB',
                            'polygon': [[0, 0], [10, 0], [10, 10], [0, 10]], 'lane_count': 3,
                            'median': 'divided'}], fh)
            groups = load_site_map(path)
            self.assertEqual(groups[0].covariates['lane_count'], 3.0)
            self.assertEqual(groups[0].covariates['median_divided'], 1.0)

            with open(path, 'w') as fh:
                json.dump([{'group_id': 'G1', 'kind': 'roundabout',
                            'polygon': [[0, 0], [10, 0], [10, 10]]}], fh)
            with self.assertRaises(SiteMapError):
                load_site_map(path)


class TestBlockMaxima(TestCase):

    def test_single_event(self):
        records = extract_block_maxima([GroupedEvent('G1', event(1.2))], BlockConfig(), site_map)
        self.assertEqual(len(records), 1)
        self.assertAlmostEqual(records[0].z, -1.2)
        self.assertEqual(records[0].y, 1)
        self.assertEqual(records[0].covariates['lane_width'], 3.5)

    def test_window_minimum(self):
        grouped = [GroupedEvent('G1', event(ttc, t=t)) for ttc, t in ((2.5, 0.1), (0.4, 3.0), (1.1, 7.5))]
        records = extract_block_maxima(grouped, BlockConfig(block_duration=11.0), site_map)
        self.assertEqual(len(records), 1)
        self.assertAlmostEqual(records[0].z, -0.4)
        self.assertEqual(records[0].y, 3)
        # covariates come from the extremal event
        self.assertAlmostEqual(records[0].covariates['rel_distance'], 0.8)

    def test_random_windows_match_brute_force(self):
        rng = np.random.default_rng(8)
        ttc = rng.uniform(0.1, 3.0, 1000)
        times = rng.uniform(0.0, 50 * 11.0, 1000)
        grouped = [GroupedEvent('G1', event(a, t=b)) for a, b in zip(ttc, times)]
        records = extract_block_maxima(grouped, BlockConfig(block_duration=11.0))

        windows = np.floor(times / 11.0).astype(int)
        self.assertEqual(len(records), len(np.unique(windows)))
        for record in records:
            members = windows == record.window
            self.assertAlmostEqual(record.z, -ttc[members].min())
            self.assertEqual(record.y, int(members.sum()))
        self.assertEqual(sum(r.y for r in records), 1000)

    def test_zero_ttc_is_excluded(self):
        grouped = [GroupedEvent('G1', event(0.0)), GroupedEvent('G1', event(0.5))]
        records = extract_block_maxima(grouped, BlockConfig())
        self.assertEqual(len(records), 1)
        self.assertEqual(records[0].y, 1)

    def test_one_block_per_interaction(self):
        grouped = [GroupedEvent('G1', event(1.0, other='B')), GroupedEvent('G1', event(0.7, other='C')),
                   GroupedEvent('G1', event(0.9, t=0.1, other='C'))]
        records = extract_block_maxima(grouped, BlockConfig(block_duration=0.0))
        self.assertEqual([(r.z, r.y) for r in records], [(-1.0, 1), (-0.7, 2)])

    def test_kinds_are_separate(self):
        grouped = [GroupedEvent('G1', event(1.0)), GroupedEvent('G1', event(0.5, kind=VI, other='edge'))]
        records = extract_block_maxima(grouped, BlockConfig())
        self.assertEqual(sorted(r.kind for r in records), [VI, VV])
        self.assertEqual([r.block_index for r in records], [0, 0])

    def test_acceleration_split(self):
        records = extract_block_maxima([GroupedEvent('G1', event(1.0, rel_accel=-2.0))], BlockConfig())
        self.assertEqual((records[0].covariates['rel_acc'], records[0].covariates['rel_dec']), (0.0, 2.0))

    def test_small_groups_are_flagged(self):
        records = [BlockRecord('G1', i, -1.0, 1) for i in range(3)]
        self.assertEqual(small_groups(records, BlockConfig(min_blocks_per_group=30)), ['G1'])
        self.assertEqual(small_groups(records, BlockConfig(min_blocks_per_group=3)), [])


class TestStandardization(TestCase):

    def _records(self, values, indicator):
        return [BlockRecord('G1', i, -1.0, 1, {'rel_speed': v, 'turn_left': f})
                for i, (v, f) in enumerate(zip(values, indicator))]

    def test_center_and_scale(self):
        scaled, report = standardize_covariates(self._records([1.0, 2.0, 3.0], [0.0, 1.0, 1.0]))
        self.assertEqual([r.covariates['rel_speed'] for r in scaled], [-1.0, 0.0, 1.0])
        self.assertEqual([r.covariates['turn_left'] for r in scaled], [0.0, 1.0, 1.0])
        self.assertEqual(report.scales['rel_speed'], (2.0, 1.0))

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(4)
        records = self._records(rng.normal(5.0, 3.0, 20), rng.integers(0, 2, 20).astype(float))
        scaled, report = standardize_covariates(records)
        restored = destandardize(scaled, report)
        for a, b in zip(records, restored):
            self.assertAlmostEqual(a.covariates['rel_speed'], b.covariates['rel_speed'], places=12)

        again = apply_standardization(records, report)
        self.assertEqual([r.covariates for r in again], [r.covariates for r in scaled])

    def test_lane_change_is_an_indicator(self):
        grouped = [GroupedEvent('G1', event(1.0 + 0.1 * i, t=11.0 * i)) for i in range(3)]
        records = extract_block_maxima(grouped, BlockConfig())
        self.assertEqual([r.covariates['lane_change'] for r in records], [1.0, 1.0, 1.0])
        records[0].covariates['lane_change'] = 0.0
        scaled, report = standardize_covariates(records)
        self.assertEqual([r.covariates['lane_change'] for r in scaled], [0.0, 1.0, 1.0])
        self.assertNotIn('lane_change', report.scales)
        # no deceleration in these events
        self.assertIn('rel_dec', report.excluded)

    def test_zero_variance_is_excluded(self):
        scaled, report = standardize_covariates(self._records([4.0, 4.0, 4.0], [0.0, 1.0, 0.0]))
        self.assertEqual(report.excluded, ['rel_speed'])
        self.assertNotIn('rel_speed', scaled[0].covariates)

    def test_needs_two_records(self):
        with self.assertRaises(BlockDataError):
            standardize_covariates(self._records([1.0], [0.0]))


class TestExposureAndFiles(TestCase):

    def test_exposure(self):
        t = np.arange(11) * 0.1
        n = np.zeros(11)
        inside = ProcessedTrack('A', t, 10.0 + t, n + 5.0, n, n, n, n, n, n, n)
        outside = ProcessedTrack('B', t, 500.0 + t, n + 5.0, n, n, n, n, n, n, n)
        exposure = exposure_by_group({'s1': [inside, outside], 's2': [outside]}, site_map)
        self.assertAlmostEqual(exposure['G1'], 1.1)
        self.assertEqual(exposure['G2'], 0.0)

    def test_blocks_and_report_round_trip(self):
        records = extract_block_maxima([GroupedEvent('G1', event(1.2)),
                                        GroupedEvent('G2', event(0.3, x=150.0, kind=VI, other='edge'))],
                                       BlockConfig(), site_map)
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'blocks.csv')
            write_blocks(path, records, 'seed=1 config=x')
            self.assertEqual(len(read_blocks(path)), 2)
            vv = read_blocks(path, VV)
            self.assertEqual(len(vv), 1)
            self.assertEqual(vv[0].group_id, 'G1')
            self.assertAlmostEqual(vv[0].z, -1.2)
            self.assertAlmostEqual(vv[0].covariates['rel_speed'], 8.8)
            self.assertNotIn('jerk', vv[0].covariates)

            report_path = os.path.join(tmp, 'report.json')
            report = StandardizationReport({'rel_speed': (1.0, 2.0)}, ['jerk'])
            write_report(report_path, report)
            self.assertEqual(read_report(report_path), report)

    def test_extractor_counts_drops(self):
        extractor = BlockExtractor(site_map, BlockConfig(min_blocks_per_group=1))
        records = extractor.extract([event(1.0), event(0.5, x=-20.0)])
        self.assertEqual(extractor.dropped, 1)
        self.assertEqual(len(records), 1)


if __name__ == "__main__":
    main()
