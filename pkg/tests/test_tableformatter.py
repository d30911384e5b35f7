import json
from unittest import TestCase

from tableformatter import CsvFormatter, JsonFormatter, TableFormatter, TextFormatter

ROWS = [
    {"view": "2d", "weight": 0.25},
    {"view": "fp", "weight": 0.75, "note": "largest"},
]


class TableFormatterTestCase(TestCase):
    def test_create(self):
        for table_format, expected in [
            (TableFormatter.TEXT, TextFormatter),
            (TableFormatter.CSV, CsvFormatter),
            (TableFormatter.FORMAT_JSON, JsonFormatter),
        ]:
            with self.subTest(table_format):
                self.assertIsInstance(TableFormatter.create(table_format), expected)
        with self.assertRaises(KeyError):
            TableFormatter.create("xml")

    def test_text(self):
        self.assertEqual(
            "View Weight Note\n"
            "2d   0.25\n"
            "fp   0.75   largest",
            TextFormatter().to_string(ROWS),
        )
        self.assertEqual("", TextFormatter().to_string([]))

    def test_csv(self):
        self.assertEqual("view,weight,note\n2d,0.25,\nfp,0.75,largest\n", CsvFormatter().to_string(ROWS))

    def test_json(self):
        self.assertEqual(ROWS, json.loads(JsonFormatter().to_string(ROWS)))
