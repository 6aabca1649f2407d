"""JSON-lines persistence of run records, validated against the versioned schema."""
from __future__ import annotations

import json
import threading
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, List

import jsonschema

SCHEMA_VERSION = "1"
SCHEMA_FILE = f"run_record.v{SCHEMA_VERSION}.json"


@lru_cache(maxsize=None)
def record_schema() -> dict:
    text = resources.files("intact_vae.schemas").joinpath(SCHEMA_FILE).read_text()
    return json.loads(text)


def validate_record(record: dict) -> dict:
    """Raise ``jsonschema.ValidationError`` if ``record`` does not match the schema."""
    jsonschema.validate(record, record_schema())
    return record


class RecordWriter:
    """Append-only JSON-lines sink; the single writer of a sweep's results."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        validate_record(record)
        line = json.dumps(record, sort_keys=True)
        with self._lock, open(self.path, "a") as fh:
            fh.write(line + "\n")


def load_records(paths: Iterable) -> List[dict]:
    """Read and validate every record from one or more JSON-lines files."""
    records = []
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no records at {path}")
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        records.append(validate_record(json.loads(line)))
                    except (ValueError, jsonschema.ValidationError) as err:
                        raise IOError(f"{path}:{n}: invalid record ({err})") from err
    if not records:
        raise IOError("no records found")
    return records
