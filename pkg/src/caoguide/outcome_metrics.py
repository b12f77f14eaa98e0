"""Post-procedure scoring: char segmentation, area/darkening margins, cut-surface RMSE."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .colmap_model import Label, LabeledCloud
from .errors import (
    DomainMismatch,
    NoCharPoints,
    TooFewTracheaPoints,
    ZeroTracheaDarkness,
    ZeroTumorArea,
)
from .surface_fit import N_TERMS, fit_poly55

DEFAULT_TAU = 60


def char_mask(img, tau: int = DEFAULT_TAU) -> np.ndarray:
    return np.asarray(img) < tau


def area_margin(char_area: float, tumor_area: float) -> float:
    """``(char - tumor) / tumor``; negative when less was charred than the tumor covered."""
    if tumor_area <= 0:
        raise ZeroTumorArea("tumor area must be positive")
    return (char_area - tumor_area) / tumor_area


def darkness(intensities) -> float:
    """Mean of ``(255 - I) / 255`` over a region."""
    a = np.asarray(intensities, dtype=np.float64)
    return float(np.mean((255.0 - a) / 255.0)) if a.size else 0.0


def darkening_margin(char_darkness: float, trachea_darkness: float) -> float:
    if trachea_darkness <= 0:
        raise ZeroTracheaDarkness("trachea darkness must be positive")
    return (char_darkness - trachea_darkness) / trachea_darkness


@dataclass(frozen=True)
class CharReport:
    char_area: int
    tumor_area: float
    area_domain: str
    tumor_area_source: str
    am: float
    char_darkness: float
    trachea_darkness: float
    dm: float
    tau: int

    def to_dict(self) -> dict:
        return asdict(self)


def char_report(img, tumor_area: float, tumor_area_domain: str = "pixels",
                tissue_mask=None, tau: int = DEFAULT_TAU,
                tumor_area_source: str = "unspecified") -> CharReport:
    """Both margins from one post-procedure grayscale image.

    ``tissue_mask`` restricts the analysis to tissue pixels; non-charred
    tissue pixels form the trachea reference region.
    """
    if tumor_area_domain != "pixels":
        raise DomainMismatch(
            f"char area is counted in pixels but tumor area is given in {tumor_area_domain}"
        )
    img = np.asarray(img)
    tissue = np.ones(img.shape, dtype=bool) if tissue_mask is None else np.asarray(tissue_mask, dtype=bool)
    charred = char_mask(img, tau) & tissue
    trachea = tissue & ~charred
    n_char = int(charred.sum())
    cd, td = darkness(img[charred]), darkness(img[trachea])
    return CharReport(
        char_area=n_char,
        tumor_area=float(tumor_area),
        area_domain="pixels",
        tumor_area_source=tumor_area_source,
        am=area_margin(n_char, tumor_area),
        char_darkness=cd,
        trachea_darkness=td,
        dm=darkening_margin(cd, td),
        tau=int(tau),
    )


@dataclass(frozen=True)
class RmseReport:
    rmse: float
    n_char: int
    n_trachea: int

    def to_dict(self) -> dict:
        return asdict(self)


def cut_surface_rmse(post_cloud: LabeledCloud) -> RmseReport:
    """RMS z-deviation of char points from a poly55 goal surface fit to healthy trachea."""
    trachea = post_cloud.select(Label.TRACHEA)
    char = post_cloud.select(Label.CHAR)
    if len(trachea) < N_TERMS:
        raise TooFewTracheaPoints(f"need {N_TERMS} non-char trachea points, got {len(trachea)}")
    if len(char) == 0:
        raise NoCharPoints("post-procedure cloud has no char points")
    goal = fit_poly55(trachea)
    resid = char[:, 2] - np.atleast_1d(goal.eval(char[:, 0], char[:, 1]))
    return RmseReport(math.sqrt(math.fsum(resid * resid) / len(resid)), len(char), len(trachea))


def save_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def append_csv(path, model: str, report: dict) -> None:
    """Append one row per model; header is written when the file is new."""
    path = Path(path)
    flat = {"model": model}
    for k, v in report.items():
        if isinstance(v, dict):
            flat.update({f"{k}.{kk}": vv for kk, vv in v.items()})
        else:
            flat[k] = v
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(flat), lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(flat)
