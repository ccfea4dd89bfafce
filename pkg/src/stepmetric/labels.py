"""Label conventions and the image record shared by all modules."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

ERROR_LABEL = "error"

_STEP_RE = re.compile(r"^step_(\d{2,})$")
_ANOMALY_RE = re.compile(r"^anomaly\[(.+)\]$")


def step_label(step: int) -> str:
    if step < 1:
        raise ValueError(f"step index must be >= 1, got {step}")
    return f"step_{step:02d}"


def step_index(label: str) -> int:
    """Step number of a step label, or raise ValueError for other labels."""
    m = _STEP_RE.match(label)
    if m is None:
        raise ValueError(f"not a step label: {label!r}")
    return int(m.group(1))


def is_step_label(label: str) -> bool:
    return _STEP_RE.match(label) is not None


def anomaly_label(source_label: str) -> str:
    """Tag for a pseudo-occluded sample derived from `source_label`."""
    return f"anomaly[{source_label}]"


def anomaly_source(label: str) -> str:
    m = _ANOMALY_RE.match(label)
    if m is None:
        raise ValueError(f"not an anomaly label: {label!r}")
    return m.group(1)


def ordered_labels(n_steps: int, include_error: bool = True) -> list[str]:
    """Canonical label order: step_01..step_NN, then the error label."""
    labels = [step_label(i) for i in range(1, n_steps + 1)]
    if include_error:
        labels.append(ERROR_LABEL)
    return labels


@dataclass
class LabeledImage:
    """An H x W x 3 float image in [0, 1] with a label and a stable id."""

    pixels: np.ndarray
    label: str
    id: str

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]
