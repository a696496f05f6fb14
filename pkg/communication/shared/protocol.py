import json

import numpy as np

ENCODING = "utf-8"
LIBRARY_VERSION = "pkm-memorization 0.3.0"

RECORD_HEADER = "header"
RECORD_STEP = "step"
RECORD_EPOCH = "epoch"
RECORD_EVAL = "eval"
RECORD_REINIT = "reinit"
RECORD_KINDS = (RECORD_HEADER, RECORD_STEP, RECORD_EPOCH, RECORD_EVAL, RECORD_REINIT)

# JSON record fields exported as plot series
SERIES_FIELDS = ("loss", "top1", "top5", "util_frac", "kl")


def _to_builtin(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def encode_json(object):
    return json.dumps(object, sort_keys=True, default=_to_builtin).encode(ENCODING)


def encode_record(record):
    """One JSONL line (without the newline) with stable key order."""
    return json.dumps(record, sort_keys=True, separators=(",", ":"), default=_to_builtin)


def decode_record(line):
    record = json.loads(line)
    if not isinstance(record, dict) or record.get("kind") not in RECORD_KINDS:
        raise ValueError(f"Not a metrics record: {line[:80]!r}")
    return record


def from_ns_to_ms(time_ns):
    return time_ns / 1e6
