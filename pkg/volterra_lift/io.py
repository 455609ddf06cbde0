"""Reading and writing run artifacts: JSON documents, CSV tables, digests."""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .kernels import kernel_from_dict, measure_from_dict
from .liftspace import LiftState

logger = logging.getLogger(__name__)


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), default=_plain)


def config_hash(doc):
    """First 16 hex digits of the SHA-256 of the canonical config document."""
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()[:16]


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_plain)
        fh.write("\n")
    logger.info("wrote %s", path)
    return path


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_csv(path, frame):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")
    logger.info("wrote %s (%d rows)", path, len(frame))
    return path


# ----- DOCUMENTS -----

def save_kernel(path, kernel):
    return write_json(path, kernel.to_dict())


def load_kernel(path):
    return kernel_from_dict(read_json(path))


def save_measure(path, dm):
    return write_json(path, dm.to_dict())


def load_measure(path):
    return measure_from_dict(read_json(path))


def save_state(path, state):
    return write_json(path, state.to_dict())


def load_state(path, dm):
    return LiftState.from_dict(read_json(path), dm)
