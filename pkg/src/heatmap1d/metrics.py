"""NRMSE evaluation of predicted landmark sets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np

from .codec import LandmarkSet

Normalization = Literal["inter-ocular", "face-size"]

# eye-centre landmarks in 5-point mode; outer eye corners in 68-point (300W) mode
DEFAULT_EYES = {5: (0, 1), 68: (36, 45)}

GROUPS_68 = {
    "contour": list(range(0, 17)),
    "eyebrows": list(range(17, 27)),
    "nose": list(range(27, 36)),
    "eyes": list(range(36, 48)),
    "mouth": list(range(48, 68)),
}
GROUPS_5 = {"eyes": [0, 1], "nose": [2], "mouth": [3, 4]}


def default_eyes(N: int) -> tuple[int, int]:
    try:
        return DEFAULT_EYES[N]
    except KeyError:
        raise ValueError(f"no default eye indices for N={N}; pass eye_indices explicitly") from None


def _coords(x) -> np.ndarray:
    return x.coords if isinstance(x, LandmarkSet) else np.asarray(x, dtype=np.float64)


def normalizer(gt, normalization: Normalization = "inter-ocular",
               eye_indices: tuple[int, int] | None = None, face_size: float | None = None) -> float:
    g = _coords(gt)
    if normalization == "inter-ocular":
        i, j = eye_indices if eye_indices is not None else default_eyes(len(g))
        if i == j:
            raise ValueError("inter-ocular normalization needs two distinct eye indices")
        d = float(np.hypot(*(g[i] - g[j])))
    elif normalization == "face-size":
        if face_size is None:
            w, h = g.max(axis=0) - g.min(axis=0)
            face_size = float(np.sqrt(w * h))
        d = float(face_size)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    if not d > 0:
        raise ValueError("NRMSE normalizer is zero")
    return d


def nrmse(pred, gt, normalization: Normalization = "inter-ocular",
          eye_indices: tuple[int, int] | None = None, face_size: float | None = None,
          norm_value: float | None = None) -> float:
    """Mean landmark Euclidean error over the normalizer, in percent.

    ``norm_value`` overrides the normalizer outright (used for N=1 cases and
    when the caller already knows the inter-ocular distance).
    """
    p, g = _coords(pred), _coords(gt)
    if p.shape != g.shape:
        raise ValueError(f"landmark count mismatch: {p.shape} vs {g.shape}")
    d = norm_value if norm_value is not None else normalizer(g, normalization, eye_indices, face_size)
    if not d > 0:
        raise ValueError("NRMSE normalizer is zero")
    return float(np.mean(np.hypot(*(p - g).T)) / d * 100.0)


def normalizers(gt: np.ndarray, normalization: Normalization = "inter-ocular",
                eye_indices: tuple[int, int] | None = None) -> np.ndarray:
    """Per-sample normalizer for an (S, N, 2) array of ground-truth sets."""
    gt = np.asarray(gt, dtype=np.float64)
    if normalization == "inter-ocular":
        i, j = eye_indices if eye_indices is not None else default_eyes(gt.shape[1])
        if i == j:
            raise ValueError("inter-ocular normalization needs two distinct eye indices")
        d = np.hypot(*(gt[:, i] - gt[:, j]).T)
    elif normalization == "face-size":
        w, h = (gt.max(axis=1) - gt.min(axis=1)).T
        d = np.sqrt(w * h)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    if np.any(~(d > 0)):
        raise ValueError("NRMSE normalizer is zero")
    return d


def _landmark_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"landmark count mismatch: {pred.shape} vs {gt.shape}")
    return np.hypot(pred[..., 0] - gt[..., 0], pred[..., 1] - gt[..., 1])


def nrmse_batch(pred: np.ndarray, gt: np.ndarray, eye_indices: tuple[int, int] | None = None,
                normalization: Normalization = "inter-ocular") -> np.ndarray:
    """Per-sample NRMSE (percent) for (S, N, 2) arrays."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    d = normalizers(gt, normalization, eye_indices)
    return _landmark_errors(pred, gt).mean(axis=1) / d * 100.0


@dataclass
class EvalReport:
    per_sample: np.ndarray
    groups: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_sample))


def evaluate(pred: np.ndarray, gt: np.ndarray, groups: Mapping[str, Sequence[int]] | None = None,
             eye_indices: tuple[int, int] | None = None, config: dict | None = None,
             normalization: Normalization = "inter-ocular") -> EvalReport:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if groups is None:
        groups = GROUPS_68 if gt.shape[1] == 68 else GROUPS_5 if gt.shape[1] == 5 else {}
    d = normalizers(gt, normalization, eye_indices)
    err = _landmark_errors(pred, gt)
    breakdown = {name: float(np.mean(err[:, list(idx)].mean(axis=1) / d) * 100.0)
                 for name, idx in groups.items()}
    return EvalReport(err.mean(axis=1) / d * 100.0, breakdown, dict(config or {}))


def fmt6(x: float) -> str:
    """Six significant digits, the CSV float convention."""
    return f"{x:.6g}"
