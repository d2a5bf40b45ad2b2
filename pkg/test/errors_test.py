from unittest import TestCase, main

from nearmiss.errors import ConfigError, DataError, NearMissError, NumericError, exit_code_for, \
    EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC
from nearmiss.kinematics import TrackTooShortError
from nearmiss.HierarchicalGev import InitializationError, ModelSpecError


class TestErrors(TestCase):

    def test_categories(self):
        for error in (ConfigError, DataError, NumericError):
            self.assertTrue(issubclass(error, NearMissError))

    def test_exit_codes(self):
        self.assertEqual(exit_code_for(ConfigError("bad")), EXIT_CONFIG)
        self.assertEqual(exit_code_for(DataError("bad")), EXIT_DATA)
        self.assertEqual(exit_code_for(NumericError("bad")), EXIT_NUMERIC)
        self.assertEqual(exit_code_for(RuntimeError("bad")), 1)

    def test_module_errors_map_to_their_category(self):
        self.assertEqual(exit_code_for(TrackTooShortError("short")), EXIT_DATA)
        self.assertEqual(exit_code_for(ModelSpecError("spec")), EXIT_CONFIG)
        self.assertEqual(exit_code_for(InitializationError("init")), EXIT_NUMERIC)


if __name__ == "__main__":
    main()
