import json
import os
from io import StringIO
from unittest import TestCase, main
from unittest.mock import patch

from nearmiss.logger import Logger, LoggerError


class TestLogger(TestCase):

    def _logger(self, level='debug'):
        stream = StringIO()
        return Logger('nearmiss.test', level, stream), stream

    def test_json_records(self):
        logger, stream = self._logger()
        logger.info("block extracted", {"group": "G1", "blocks": 3})

        record = json.loads(stream.getvalue().strip())
        self.assertEqual(record['level'], 'INFO')
        self.assertEqual(record['message'], 'block extracted')
        self.assertEqual(record['logger_name'], 'nearmiss.test')
        self.assertEqual(record['group'], 'G1')
        self.assertEqual(record['blocks'], 3)
        self.assertIn('timestamp', record)

    def test_level_filtering(self):
        logger, stream = self._logger('warn')
        logger.debug("hidden")
        logger.info("hidden")
        logger.warn("shown")
        logger.error("shown too")

        lines = stream.getvalue().strip().splitlines()
        self.assertEqual([json.loads(line)['level'] for line in lines], ['WARNING', 'ERROR'])

    def test_non_json_fields_fall_back_to_strings(self):
        logger, stream = self._logger()
        logger.info("path", {"where": os.path.join('a', 'b'), "value": object()})
        record = json.loads(stream.getvalue())
        self.assertEqual(record['where'], os.path.join('a', 'b'))
        self.assertIsInstance(record['value'], str)

    def test_invalid_level(self):
        with self.assertRaises(LoggerError):
            Logger('nearmiss.test', 'critical', StringIO())

    def test_level_from_environment(self):
        stream = StringIO()
        with patch.dict(os.environ, {'NEARMISS_LOG_LEVEL': 'ERROR'}):
            logger = Logger('nearmiss.env', stream=stream)
        logger.warn("hidden")
        self.assertEqual(stream.getvalue(), '')

    def test_reserved_field_is_rejected(self):
        logger, _ = self._logger()
        with self.assertRaises(KeyError):
            logger.info("clash", {"message": "x"})


if __name__ == "__main__":
    main()
