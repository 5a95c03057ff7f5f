import os
import hashlib
import logging
import tempfile
from typing import Dict, List

import numpy as np
import yaml

logger = logging.getLogger(__name__)

# Files carry ordinary frequencies in kHz and times in microseconds.
ANGULAR_PER_KHZ = 2 * np.pi * 1e3
SECONDS_PER_US = 1e-6


def khz_to_angular(value):
    return np.multiply(value, ANGULAR_PER_KHZ)


def angular_to_khz(value):
    return np.divide(value, ANGULAR_PER_KHZ)


def us_to_s(value):
    return np.multiply(value, SECONDS_PER_US)


def s_to_us(value):
    return np.divide(value, SECONDS_PER_US)


def ensure_parent_dir(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def atomic_write_text(path: str, text: str):
    """Write the whole file or nothing: temp file in the target directory, then rename."""
    ensure_parent_dir(path)
    fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(path) or '.', prefix='.tmp-', suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'w', newline='') as f:
            f.write(text)
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.debug(f"Wrote {len(text)} bytes to {path}")


def content_signature(record: Dict) -> str:
    """Stable short hash of a config record, stored next to generated data."""
    canonical = yaml.safe_dump(record, sort_keys=True, default_flow_style=False)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def local_minima(values) -> List[int]:
    """Indices of interior samples strictly below both neighbours (plateaus count once)."""
    values = np.asarray(values, dtype=float)
    minima = []
    i = 1
    while i < len(values) - 1:
        j = i
        while j + 1 < len(values) - 1 and values[j + 1] == values[i]:
            j += 1
        if values[i - 1] > values[i] and values[j + 1] > values[j]:
            minima.append(i)
        i = j + 1
    return minima
