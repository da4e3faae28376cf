"""Utility functions for receiver masks, bound formatting and CSV artifacts."""

from pathlib import Path
from typing import Sequence, Union

import numpy as np
import pandas as pd
import structlog

logger = structlog.get_logger(__name__)


def mask_bits(mask: Sequence[int]) -> str:
    """Format a receiver mask as a bit string, receiver 0 first."""
    return "".join("1" if int(v) else "0" for v in np.asarray(mask).ravel())


def format_bound(value: float) -> str:
    """Human-readable CRB bound; unconstrained bounds print as ``inf``."""
    if not np.isfinite(value):
        return "inf"
    return f"{value:.4g}"


def write_csv(frame: pd.DataFrame, output_dir: Union[str, Path], name: str) -> Path:
    """Write ``frame`` to ``output_dir/name``, creating the directory.

    Floats are written with full precision so reruns compare byte for byte.
    """
    directory = Path(output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info("Artifact written", path=str(path), rows=len(frame))
    return path
