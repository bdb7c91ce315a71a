"""Versioned-CSV reading.

Every poisonforge CSV starts with a `# schema: poisonforge.<kind> v1 ...`
comment; consumers validate kind and version before touching the columns.
"""

import csv

import numpy as np

SCHEMA_PREFIX = "# schema: poisonforge."
SCHEMA_VERSION = "v1"


class SchemaError(ValueError):
    """CSV is missing, has the wrong kind, or lacks required columns."""


class Table:
    def __init__(self, columns, rows):
        self.columns = columns
        self.rows = rows        # list of dicts, values are str

    def __len__(self):
        return len(self.rows)

    def require(self, *names):
        missing = [n for n in names if n not in self.columns]
        if missing:
            raise SchemaError(f"missing column(s): {', '.join(missing)}")

    def floats(self, name):
        self.require(name)
        return np.array([float(r[name]) for r in self.rows])

    def strings(self, name):
        self.require(name)
        return [r[name] for r in self.rows]

    def group_count(self, prefix):
        g = 0
        while f"{prefix}{g}_mean" in self.columns or f"{prefix}{g}" in self.columns:
            g += 1
        return g


def read_table(path, expected_kind):
    try:
        f = open(path)
    except OSError as exc:
        raise SchemaError(f"cannot open {path}: {exc}") from exc
    with f:
        header = f.readline().strip()
        expected = f"{SCHEMA_PREFIX}{expected_kind} {SCHEMA_VERSION}"
        if not header.startswith(expected):
            raise SchemaError(
                f"{path}: expected schema `{expected}`, found `{header}`"
            )
        reader = csv.DictReader(f)
        rows = list(reader)
        if not rows:
            raise SchemaError(f"{path}: no data rows")
        return Table(reader.fieldnames, rows)
