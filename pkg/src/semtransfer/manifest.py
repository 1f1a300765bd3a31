"""Append-only run manifests.

One ``manifest.jsonl`` per run directory; every record is a JSON object with
an event name and a UTC timestamp.  Records are only ever appended.
"""

import json
import time
from pathlib import Path

MANIFEST_NAME = "manifest.jsonl"


def manifest_path(run_dir) -> Path:
    return Path(run_dir) / MANIFEST_NAME


def append_event(run_dir, event: str, **fields) -> None:
    path = manifest_path(run_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {"event": event,
              "time": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    record.update(fields)
    with open(path, "a") as f:
        f.write(json.dumps(record) + "\n")


def read_events(run_dir):
    path = manifest_path(run_dir)
    if not path.is_file():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
