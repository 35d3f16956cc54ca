"""Localization accuracy report: median errors and recall at threshold pairs."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError
from ..geometry import Pose, rotation_error_deg, translation_error

# (cm, degrees), loosest first
THRESHOLDS = ((10.0, 5.0), (5.0, 5.0), (2.0, 2.0), (1.0, 1.0))
METRES_TO_CM = 100.0


def lower_median(x) -> float:
    """Median that picks the lower middle element for even counts."""
    x = np.sort(np.asarray(x, dtype=float))
    if len(x) == 0:
        return float("nan")
    return float(x[(len(x) - 1) // 2])


@dataclass
class EvalReport:
    names: list[str]
    translation_cm: np.ndarray
    rotation_deg: np.ndarray
    recall: dict[tuple[float, float], float] = field(default_factory=dict)  # percent

    @property
    def median_translation_cm(self) -> float:
        return lower_median(self.translation_cm)

    @property
    def median_rotation_deg(self) -> float:
        return lower_median(self.rotation_deg)

    def summary(self) -> str:
        lines = [f"queries: {len(self.names)}",
                 f"median error: {self.median_translation_cm:.3f} cm / {self.median_rotation_deg:.4f} deg"]
        for (cm, deg), pct in self.recall.items():
            lines.append(f"  < {cm:g}cm/{deg:g}deg: {pct:.1f}%")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "translation_cm", "rotation_deg"])
            for n, t, r in zip(self.names, self.translation_cm, self.rotation_deg):
                w.writerow([n, repr(float(t)), repr(float(r))])
            w.writerow(["median", repr(self.median_translation_cm), repr(self.median_rotation_deg)])
            for (cm, deg), pct in self.recall.items():
                w.writerow([f"recall_{cm:g}cm_{deg:g}deg", repr(pct), ""])


def evaluate(estimates: list[Pose], ground_truth: list[Pose], names: list[str] | None = None) -> EvalReport:
    """Compare estimated poses against ground truth (scene units are metres)."""
    if len(estimates) != len(ground_truth):
        raise InvalidInputError(f"{len(estimates)} estimates but {len(ground_truth)} ground-truth poses")
    if names is None:
        names = [str(i) for i in range(len(estimates))]
    t = np.array([translation_error(e, g) for e, g in zip(estimates, ground_truth)]) * METRES_TO_CM
    r = np.array([rotation_error_deg(e, g) for e, g in zip(estimates, ground_truth)])
    recall = {}
    for cm, deg in THRESHOLDS:
        recall[(cm, deg)] = 100.0 * float(np.mean((t < cm) & (r < deg))) if len(t) else 0.0
    return EvalReport(list(names), t, r, recall)


def evaluate_named(estimates: dict[str, Pose], ground_truth: dict[str, Pose]) -> EvalReport:
    """Evaluate the images present in ``estimates``; each must have a ground-truth pose."""
    missing = [n for n in estimates if n not in ground_truth]
    if missing:
        raise InvalidInputError(f"no ground truth for {', '.join(sorted(missing))}")
    names = sorted(estimates)
    return evaluate([estimates[n] for n in names], [ground_truth[n] for n in names], names)
