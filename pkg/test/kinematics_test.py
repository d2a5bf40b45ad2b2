import os
from tempfile import TemporaryDirectory
from unittest import TestCase, main

import numpy as np

from nearmiss.dynamics import VehicleSpec
from nearmiss.kinematics import PROCESSED_COLUMNS, InvalidFilterError, InvalidTrackError, \
    KinematicsConfig, MalformedRowError, RawTrack, TrackProcessor, TrackTooShortError, derive_dynamics, \
    derive_speed, is_stationary, read_processed, read_tracks, read_vehicle_table, sg_filter, \
    smooth_positions, write_processed
from nearmiss.utils import read_csv


def make_track(agent_id='A', n=50, dt=0.1, x=None, y=None, vx=None, vy=None) -> RawTrack:
    t = np.arange(n) * dt
    zeros = np.zeros(n)
    return RawTrack(agent_id, t,
                    zeros if x is None else x(t), zeros if y is None else y(t),
                    zeros if vx is None else vx(t), zeros if vy is None else vy(t))


class TestSmoothing(TestCase):

    def test_straight_line_is_reproduced(self):
        track = make_track(n=50, x=lambda t: t.copy(), y=lambda t: 0.0 * t)
        smoothed = smooth_positions(track)
        np.testing.assert_allclose(smoothed.x, track.x, atol=1e-9)
        np.testing.assert_allclose(smoothed.y, track.y, atol=1e-9)

    def test_cubic_is_reproduced(self):
        track = make_track(n=200, dt=0.01, x=lambda t: t ** 3, y=lambda t: 2.0 - t ** 2)
        smoothed = smooth_positions(track)
        np.testing.assert_allclose(smoothed.x, track.x, atol=1e-6)
        np.testing.assert_allclose(smoothed.y, track.y, atol=1e-6)

    def test_noise_is_reduced(self):
        rng = np.random.default_rng(3)
        n = 300
        truth = make_track(n=n, x=lambda t: 8.0 * t, y=lambda t: 1.0 + 0.5 * t)
        noisy = RawTrack('A', truth.t, truth.x + rng.normal(0.0, 0.05, n),
                         truth.y + rng.normal(0.0, 0.05, n), truth.vx, truth.vy)
        smoothed = smooth_positions(noisy)

        before = np.sqrt(np.mean((noisy.x - truth.x) ** 2 + (noisy.y - truth.y) ** 2))
        after = np.sqrt(np.mean((smoothed.x - truth.x) ** 2 + (smoothed.y - truth.y) ** 2))
        self.assertLess(after, before)

    def test_track_validation(self):
        with self.assertRaises(TrackTooShortError):
            smooth_positions(make_track(n=4))

        t = np.array([0.0, 0.1, 0.2, 0.35, 0.4, 0.5])
        with self.assertRaises(InvalidTrackError):
            smooth_positions(RawTrack('A', t, t, t, t, t))

        with self.assertRaises(InvalidFilterError):
            smooth_positions(make_track(), control_point_spacing=1)


class TestSpeedAndFilter(TestCase):

    def test_derive_speed(self):
        track = RawTrack('A', np.arange(3) * 0.1, np.zeros(3), np.zeros(3),
                         np.array([3.0, 0.0, -6.0]), np.array([4.0, 0.0, 8.0]))
        np.testing.assert_allclose(derive_speed(track), [5.0, 0.0, 10.0])

    def test_speed_is_rotation_invariant(self):
        rng = np.random.default_rng(5)
        vx, vy = rng.normal(size=20), rng.normal(size=20)
        t = np.arange(20) * 0.1
        angle = 1.1
        rotated = RawTrack('A', t, t, t, np.cos(angle) * vx - np.sin(angle) * vy,
                           np.sin(angle) * vx + np.cos(angle) * vy)
        np.testing.assert_allclose(derive_speed(rotated), derive_speed(RawTrack('A', t, t, t, vx, vy)))

    def test_constant_signal(self):
        np.testing.assert_allclose(sg_filter(np.full(40, 7.3), 11, 2), 7.3)
        np.testing.assert_allclose(sg_filter(np.full(40, 7.3), 109, 2), 7.3)

    def test_quadratic_is_reproduced(self):
        s = (np.arange(60) * 0.1) ** 2
        out = sg_filter(s, 11, 2)
        np.testing.assert_allclose(out[5:-5], s[5:-5], atol=1e-9)

    def test_interior_matches_normal_equations(self):
        rng = np.random.default_rng(11)
        signal = rng.normal(size=30)
        out = sg_filter(signal, 5, 2)
        offsets = np.arange(-2, 3, dtype=float)
        design = np.vander(offsets, 3, increasing=True)
        for i in range(2, 28):
            coeffs = np.linalg.solve(design.T @ design, design.T @ signal[i - 2:i + 3])
            self.assertAlmostEqual(out[i], coeffs[0], places=10)

    def test_invalid_window(self):
        with self.assertRaises(InvalidFilterError):
            sg_filter(np.zeros(20), 10, 2)
        with self.assertRaises(InvalidFilterError):
            sg_filter(np.zeros(20), 5, 5)


class TestDynamics(TestCase):

    def test_constant_speed_has_no_acceleration(self):
        track = make_track(x=lambda t: 10.0 * t, vx=lambda t: np.full_like(t, 10.0))
        out = derive_dynamics(track, 2.7)
        np.testing.assert_allclose(out.a, 0.0, atol=1e-12)
        np.testing.assert_allclose(out.delta, 0.0, atol=1e-12)

    def test_speed_ramp(self):
        track = make_track(n=101, x=lambda t: 0.5 * t ** 2, vx=lambda t: t.copy())
        out = derive_dynamics(track, 2.7)
        np.testing.assert_allclose(out.a[1:-1], 1.0, atol=1e-9)
        np.testing.assert_allclose(out.theta, 0.0, atol=1e-12)

    def test_circular_motion_steering(self):
        radius, v = 20.0, 10.0
        omega = v / radius
        track = make_track(n=100, x=lambda t: radius * np.sin(omega * t),
                           y=lambda t: radius * (1.0 - np.cos(omega * t)),
                           vx=lambda t: v * np.cos(omega * t), vy=lambda t: v * np.sin(omega * t))
        out = derive_dynamics(track, 2.7)
        np.testing.assert_allclose(out.yaw_rate[1:-1], omega, atol=1e-9)
        np.testing.assert_allclose(out.delta[1:-1], np.arctan(2.7 / 20.0), atol=1e-3)
        self.assertAlmostEqual(float(out.delta[50]), 0.1342, places=4)
        # the heading is unwrapped past pi
        self.assertGreater(out.theta[-1], np.pi)

    def test_steering_is_zero_when_stopped(self):
        track = make_track(n=20)
        out = derive_dynamics(track, 2.7)
        np.testing.assert_array_equal(out.delta, np.zeros(20))
        self.assertTrue(np.all(np.abs(out.delta) < np.pi / 2))


class TestTrackProcessor(TestCase):

    def test_stationary_agents_are_skipped(self):
        moving = make_track('A', x=lambda t: 5.0 * t, vx=lambda t: np.full_like(t, 5.0))
        parked = make_track('B', x=lambda t: 3.0 + 0.0 * t)
        self.assertTrue(is_stationary(parked))
        self.assertFalse(is_stationary(moving))

        spec = VehicleSpec(2.6, 4.4, 1.8)
        processed = TrackProcessor(KinematicsConfig(sg_window=11)).process_all([moving, parked], {'A': spec})
        self.assertEqual([p.agent_id for p in processed], ['A'])
        self.assertEqual(processed[0].spec, spec)
        np.testing.assert_allclose(processed[0].v, 5.0, atol=1e-9)


class TestFiles(TestCase):

    def test_read_tracks_and_round_trip(self):
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'scenario.csv')
            with open(path, 'w') as fh:
                fh.write('agent_id,t,x,y,vx,vy\n')
                for i in range(10):
                    fh.write(f'B,{i * 0.1:.1f},{i * 0.5:.2f},0,5,0\n')
                for i in range(10):
                    fh.write(f'A,{i * 0.1:.1f},0,{i * 0.3:.2f},0,3\n')
            tracks = read_tracks(path)
            self.assertEqual([t.agent_id for t in tracks], ['A', 'B'])
            self.assertEqual(len(tracks[0]), 10)

            processed = TrackProcessor(KinematicsConfig(sg_window=5)).process_all(tracks, {})
            out = os.path.join(tmp, 'processed', 'scenario.csv')
            write_processed(out, processed, 'seed=1 config=x')
            self.assertEqual(list(read_csv(out).columns), PROCESSED_COLUMNS)

            back = read_processed(out, {})
            self.assertEqual([t.agent_id for t in back], ['A', 'B'])
            np.testing.assert_allclose(back[1].v, processed[1].v)

    def test_malformed_row_names_the_line(self):
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'bad.csv')
            with open(path, 'w') as fh:
                fh.write('agent_id,t,x,y,vx,vy\nA,0.0,0,0,1,0\nA,0.1,oops,0,1,0\n')
            with self.assertRaises(MalformedRowError) as ctx:
                read_tracks(path)
            self.assertIn(':3:', ctx.exception.args[0])

    def test_line_numbers_count_comments_and_blank_lines(self):
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'bad.csv')
            with open(path, 'w') as fh:
                fh.write('# seed=1 config=abc\nagent_id,t,x,y,vx,vy\nA,0.0,0,0,1,0\n\nA,0.1,0,oops,1,0\n')
            with self.assertRaises(MalformedRowError) as ctx:
                read_tracks(path)
            self.assertIn(':5:', ctx.exception.args[0])

            with open(path, 'w') as fh:
                fh.write('# seed=1 config=abc\nagent_id,t,x,y\nA,0.0,0,0\n')
            with self.assertRaises(MalformedRowError) as ctx:
                read_tracks(path)
            self.assertIn(':2:', ctx.exception.args[0])

            vehicles = os.path.join(tmp, 'vehicles.csv')
            with open(vehicles, 'w') as fh:
                fh.write('# seed=1 config=abc\nagent_id,length,width,wheelbase\n7,5.0,2.0,3.0\n8,5.0,2.0,-1.0\n')
            with self.assertRaises(MalformedRowError) as ctx:
                read_vehicle_table(vehicles)
            self.assertIn(':4:', ctx.exception.args[0])

    def test_vehicle_table(self):
        self.assertEqual(read_vehicle_table(None), {})
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'vehicles.csv')
            self.assertEqual(read_vehicle_table(path), {})
            with open(path, 'w') as fh:
                fh.write('agent_id,length,width,wheelbase\n7,5.0,2.0,3.0\n')
            self.assertEqual(read_vehicle_table(path), {'7': VehicleSpec(3.0, 5.0, 2.0)})


if __name__ == "__main__":
    main()
