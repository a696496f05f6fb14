import logging
import os

from communication.shared.protocol import LIBRARY_VERSION, RECORD_HEADER, encode_record, decode_record
from memory_metrics import KL_LOG_BASE


class MetricsRecorder:
    """Append-only JSONL metrics stream. The first line is a header record
    carrying the library version, KL log base and run configuration."""

    def __init__(self, path, header=None):
        self._l = logging.getLogger("MetricsRecorder")
        self.path = path
        self.header = dict(header or {})
        self.records = 0
        self._file = None

    def __enter__(self):
        self.open()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def open(self):
        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self._file = open(self.path, "w", encoding="utf-8", newline="\n")
        self.write({"kind": RECORD_HEADER, "library_version": LIBRARY_VERSION, "kl_log_base": KL_LOG_BASE,
                    **self.header})
        self._l.info("Recording metrics to %s.", self.path)

    def write(self, record):
        if self._file is None:
            raise RuntimeError("MetricsRecorder is not open")
        self._file.write(encode_record(record) + "\n")
        self.records += 1
        self._l.debug(record)

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None
            self._l.debug("Closed %s after %s records.", self.path, self.records)


def read_metrics(path):
    """Parse a metrics stream; corrupt lines are skipped with a warning.

    Returns (records, skipped).
    """
    log = logging.getLogger("MetricsReader")
    records, skipped = [], 0
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(decode_record(line))
            except ValueError as e:
                skipped += 1
                log.warning("Skipping corrupt metrics line %s of %s: %s", number, path, e)
    return records, skipped
