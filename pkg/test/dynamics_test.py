from unittest import TestCase, main

import numpy as np

from nearmiss.dynamics import ControlInput, DynamicsConfigError, IntegrationConfig, JointState, \
    VehicleSpec, VehicleState, integrate_vehicle, rk4_step, simulate_horizon, vector_field

car = VehicleSpec(wheelbase=2.5, length=4.5, width=1.8)
still = VehicleState(0.0, 0.0, 0.0, 0.0)


def circle_error(dt: float, horizon: float, v=10.0, delta=0.1, wheelbase=2.5) -> float:
    ''' Final position error against the constant-curvature closed form. '''

    spec = VehicleSpec(wheelbase, 4.5, 1.8)
    steps = int(round(horizon / dt))
    s = JointState(VehicleState(0.0, 0.0, 0.0, v), still)
    controls = (ControlInput(0.0, delta), ControlInput())
    for _ in range(steps):
        s = rk4_step(s, controls, (spec, car), dt)

    radius = wheelbase / np.tan(delta)
    phi = v * steps * dt / radius
    expected = np.array([radius * np.sin(phi), radius * (1.0 - np.cos(phi))])
    return float(np.linalg.norm([s.a.x - expected[0], s.a.y - expected[1]]))


class TestVectorField(TestCase):

    def test_stationary_vehicle_has_zero_rates(self):
        s = JointState(still, VehicleState(5.0, 1.0, 0.3, 4.0))
        rates = vector_field(s, ControlInput(), ControlInput(1.0, 0.1), car, car)
        np.testing.assert_array_equal(rates[:4], np.zeros(4))
        self.assertEqual(rates.shape, (8,))

    def test_straight_acceleration(self):
        s = JointState(VehicleState(0.0, 0.0, 0.0, 10.0), still)
        rates = vector_field(s, ControlInput(2.0, 0.0), ControlInput(), car, car)
        np.testing.assert_allclose(rates[:4], [10.0, 0.0, 0.0, 2.0], atol=1e-12)

    def test_turning_rates(self):
        spec = VehicleSpec(2.5, 4.5, 1.8)
        s = JointState(VehicleState(0.0, 0.0, np.pi / 2, 8.0), still)
        rates = vector_field(s, ControlInput(1.5, 0.2), ControlInput(), spec, car)
        np.testing.assert_allclose(rates[:4], [0.0, 8.0, 8.0 * np.tan(0.2) / 2.5, 1.5], atol=1e-6)
        self.assertAlmostEqual(rates[2], 0.6487, places=4)


class TestRK4(TestCase):

    def test_fixed_point(self):
        s = JointState(still, still)
        out = rk4_step(s, (ControlInput(), ControlInput()), (car, car), 0.1)
        self.assertEqual(out, s)

    def test_straight_line_is_exact(self):
        s = JointState(VehicleState(0.0, 0.0, 0.0, 10.0), still)
        out = rk4_step(s, (ControlInput(), ControlInput()), (car, car), 0.1)
        self.assertAlmostEqual(out.a.x, 1.0, places=12)
        self.assertEqual((out.a.y, out.a.theta, out.a.v), (0.0, 0.0, 10.0))

    def test_constant_curvature_circle(self):
        self.assertLess(circle_error(0.1, 10.0), 1e-5)

    def test_fourth_order_convergence(self):
        coarse = circle_error(0.1, 3.0, delta=0.3)
        fine = circle_error(0.05, 3.0, delta=0.3)
        self.assertGreater(coarse, 0.0)
        self.assertGreaterEqual(coarse / fine, 14.0)

    def test_speed_never_reverses(self):
        s = JointState(VehicleState(0.0, 0.0, 0.0, 0.2), still)
        out = rk4_step(s, (ControlInput(-5.0, 0.0), ControlInput()), (car, car), 0.1)
        self.assertEqual(out.a.v, 0.0)

    def test_stages_are_not_clamped(self):
        # stage speeds 1, 0, 0, -1 cancel in the position update
        s = JointState(VehicleState(0.0, 0.0, 0.0, 1.0), still)
        out = rk4_step(s, (ControlInput(-4.0, 0.0), ControlInput()), (car, car), 0.5)
        self.assertEqual(out.a.v, 0.0)
        self.assertAlmostEqual(out.a.x, 0.0, places=12)

    def test_invalid_step(self):
        s = JointState(still, still)
        with self.assertRaises(DynamicsConfigError):
            rk4_step(s, (ControlInput(), ControlInput()), (car, car), 0.0)

    def test_invalid_steering(self):
        with self.assertRaises(DynamicsConfigError):
            ControlInput(0.0, np.pi / 2)


class TestSimulateHorizon(TestCase):

    def test_single_step_composition(self):
        s0 = JointState(VehicleState(1.0, 2.0, 0.4, 6.0), VehicleState(-3.0, 0.5, 2.0, 3.0))
        controls = (ControlInput(0.5, 0.05), ControlInput(-0.2, -0.1))
        path = simulate_horizon(s0, controls, (car, car), IntegrationConfig(dt=0.1, steps=1))
        self.assertEqual(len(path), 2)
        self.assertEqual(path[0], s0)
        expected = rk4_step(s0, controls, (car, car), 0.1)
        np.testing.assert_allclose(path[1].as_array(), expected.as_array(), atol=1e-12)

    def test_stationary_pair(self):
        s0 = JointState(VehicleState(1.0, 2.0, 0.4, 0.0), VehicleState(-3.0, 0.5, 2.0, 0.0))
        path = simulate_horizon(s0, (ControlInput(), ControlInput()), (car, car), IntegrationConfig())
        self.assertEqual(len(path), 31)
        for s in path:
            np.testing.assert_array_equal(s.as_array(), s0.as_array())

    def test_straight_line_positions(self):
        s0 = JointState(VehicleState(3.0, 0.0, 0.0, 10.0), still)
        path = simulate_horizon(s0, (ControlInput(), ControlInput()), (car, car),
                                IntegrationConfig(dt=0.1, steps=30))
        for n, s in enumerate(path):
            self.assertAlmostEqual(s.a.x, 3.0 + n * 1.0, places=9)

    def test_batch_matches_pairwise(self):
        states = np.array([[0.0, 0.0, 0.1, 5.0], [2.0, 1.0, -0.3, 8.0], [4.0, -1.0, 1.0, 2.0]])
        controls = np.array([[0.2, 0.05], [0.0, -0.02], [-1.0, 0.3]])
        cfg = IntegrationConfig(dt=0.1, steps=5)
        batch = integrate_vehicle(states, controls, car.wheelbase, cfg)
        self.assertEqual(batch.shape, (3, 6, 4))

        pair = simulate_horizon(JointState.from_array(states[:2]),
                                (ControlInput(*controls[0]), ControlInput(*controls[1])), (car, car), cfg)
        np.testing.assert_allclose(batch[0, -1], pair[-1].a.as_array(), atol=1e-12)
        np.testing.assert_allclose(batch[1, -1], pair[-1].b.as_array(), atol=1e-12)


if __name__ == "__main__":
    main()
