import abc
import csv
import io
import json
from typing import Dict, List, Sequence


class TableFormatter(abc.ABC):
    TEXT = "text"
    CSV = "csv"
    FORMAT_JSON = "json"
    FORMATS = (TEXT, CSV, FORMAT_JSON)

    @abc.abstractmethod
    def to_string(self, rows: List[Dict]) -> str:
        pass

    @staticmethod
    def create(table_format: str):
        if table_format == TableFormatter.TEXT:
            return TextFormatter()
        if table_format == TableFormatter.CSV:
            return CsvFormatter()
        if table_format == TableFormatter.FORMAT_JSON:
            return JsonFormatter()
        raise KeyError(table_format)


def columns_of(rows: Sequence[Dict]) -> List[str]:
    columns: List[str] = []
    for row in rows:
        columns.extend(key for key in row.keys() if key not in columns)
    return columns


class TextFormatter(TableFormatter):
    def to_string(self, rows) -> str:
        rows = rows_to_dicts(rows)
        columns = columns_of(rows)
        if not columns:
            return ""
        header = {key: key.capitalize().replace("_", " ") for key in columns}
        rows.insert(0, header)

        column_lengths = {
            key: max([len(str(row.get(key, ""))) for row in rows]) for key in columns
        }

        def format_cell(column, value):
            template = f"{{value:{column_lengths[column]}}}"
            return template.format(value=str(value))

        def format_row(row):
            return " ".join([format_cell(key, row.get(key, "")) for key in columns]).rstrip()

        lines = [format_row(row) for row in rows]

        return "\n".join(lines)


class CsvFormatter(TableFormatter):
    def to_string(self, rows) -> str:
        rows = rows_to_dicts(rows)
        columns = columns_of(rows)

        memstr = io.StringIO("")
        writer = csv.DictWriter(memstr, columns, lineterminator="\n", restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

        return memstr.getvalue()


class JsonFormatter(TableFormatter):
    def to_string(self, rows) -> str:
        return json.dumps(rows_to_dicts(rows), indent=2)


def rows_to_dicts(rows) -> List[Dict]:
    return [{key: row[key] for key in row.keys()} for row in rows]
