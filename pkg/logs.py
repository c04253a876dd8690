import json
import logging
import os
import sys

LOG_FORMAT = "[%(asctime)s] %(message)s"
LOG_DATEFMT = "%H:%M:%S"


def setup_logging(run_dir=None, filename="keyreid.log"):
    """
    Configure the root logger once per process.

    Logs go to the screen and, when a run directory is given, to a file
    inside it so a run can be followed with `tail -f` while it trains.
    """
    level = os.environ.get("KEYREID_LOG_LEVEL", "INFO").upper()
    handlers = [logging.StreamHandler(sys.stdout)]
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        handlers.append(logging.FileHandler(os.path.join(run_dir, filename)))
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATEFMT,
                        handlers=handlers, force=True)


def log(msg):
    logging.info(msg)
    for handler in logging.getLogger().handlers:
        handler.flush()


class EventLog:
    """Append-only line-delimited JSON event stream (one dict per line)."""

    def __init__(self, path):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def write(self, event, **fields):
        record = {"event": event}
        record.update(fields)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, default=_jsonable) + "\n")

    def read(self):
        if not os.path.exists(self.path):
            return []
        with open(self.path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]


def _jsonable(value):
    # numpy scalars and arrays
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
