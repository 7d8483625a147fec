"""Resolution sweep and gamma/lambda ablation harnesses.

Every cell of a table shares the same data and seed list, so differences
between rows isolate the swept parameter. Cells can be memoised in a plain
dict keyed by the resolved config, which lets an ablation reuse cells that a
sweep already trained.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .codec import output_size
from .detector import DetectorConfig, DetectorParams, Split, evaluate_nrmse, train_detector
from .metrics import fmt6
from .synth import ClipDataset, LandmarkDataset
from .tracker import TrackerConfig, evaluate_tracker, train_tracker

Progress = Callable[[str], None] | None


def _key(cfg) -> str:
    return repr(dataclasses.asdict(cfg))


def detector_cell(train: LandmarkDataset, test: LandmarkDataset, config: DetectorConfig,
                  cache: dict | None = None, progress: Progress = None) -> tuple[float, DetectorParams]:
    """Train one detector and return its final test NRMSE."""
    key = ("detector", _key(config))
    if cache is not None and key in cache:
        return cache[key]
    params = train_detector(Split(train, test), config, progress=progress).params
    out = (evaluate_nrmse(params, test), params)
    if cache is not None:
        cache[key] = out
    return out


@dataclass
class SweepRow:
    L: int
    L_over_F: float
    seed: int
    nrmse: float
    output_points_1d: int
    output_points_2d: int


SWEEP_HEADER = "L,L_over_F,seed,nrmse,output_points_1d,output_points_2d"


def sweep_csv(rows: Iterable[SweepRow]) -> str:
    lines = [SWEEP_HEADER]
    lines += [f"{r.L},{fmt6(r.L_over_F)},{r.seed},{fmt6(r.nrmse)},{r.output_points_1d},{r.output_points_2d}"
              for r in rows]
    return "\n".join(lines) + "\n"


def resolution_sweep(L_list: Sequence[int], train: LandmarkDataset, test: LandmarkDataset,
                     base: DetectorConfig, seeds: Sequence[int], cache: dict | None = None,
                     progress: Progress = None) -> list[SweepRow]:
    rows = []
    for L in L_list:
        for seed in seeds:
            cfg = dataclasses.replace(base, L=L, M=0, seed=seed)
            err, _ = detector_cell(train, test, cfg, cache)
            rows.append(SweepRow(L, L / base.F, seed, err, output_size(base.N, L, "1d"),
                                 output_size(base.N, L, "2d")))
            if progress is not None:
                progress(f"L={L} seed={seed} nrmse={err:.6g}")
    return rows


def mean_by(rows, attr: str) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(getattr(r, attr), []).append(r.nrmse)
    return {k: float(np.mean(v)) for k, v in groups.items()}


@dataclass
class AblationRow:
    param: str
    value: float
    seed: int
    nrmse: float


ABLATION_HEADER = "param,value,seed,nrmse"


def ablation_csv(rows: Iterable[AblationRow]) -> str:
    lines = [ABLATION_HEADER] + [f"{r.param},{fmt6(r.value)},{r.seed},{fmt6(r.nrmse)}" for r in rows]
    return "\n".join(lines) + "\n"


def gamma_ablation(values: Sequence[float], train: LandmarkDataset, test: LandmarkDataset,
                   base: DetectorConfig, seeds: Sequence[int], cache: dict | None = None,
                   progress: Progress = None) -> list[AblationRow]:
    rows = []
    for g in values:
        for seed in seeds:
            err, _ = detector_cell(train, test, dataclasses.replace(base, gamma=g, seed=seed), cache)
            rows.append(AblationRow("gamma", g, seed, err))
            if progress is not None:
                progress(f"gamma={g} seed={seed} nrmse={err:.6g}")
    return rows


def lambda_ablation(values: Sequence[float], train: ClipDataset, test: ClipDataset,
                    base: TrackerConfig, seeds: Sequence[int], cache: dict | None = None,
                    progress: Progress = None) -> list[AblationRow]:
    """Phase 1 (detector on frames) runs once per seed and is shared by every lambda."""
    rows = []
    for seed in seeds:
        det_cfg = dataclasses.replace(base.detector, seed=seed)
        _, det = detector_cell(train.as_images(), test.as_images(), det_cfg, cache)
        for lam in values:
            cfg = dataclasses.replace(base, detector=det_cfg, lam=lam, seed=seed)
            key = ("tracker", _key(cfg))
            if cache is not None and key in cache:
                err = cache[key]
            else:
                params = train_tracker(train, cfg, val=test, detector=det).params
                err = evaluate_tracker(params, test)
                if cache is not None:
                    cache[key] = err
            rows.append(AblationRow("lambda", lam, seed, err))
            if progress is not None:
                progress(f"lambda={lam} seed={seed} nrmse={err:.6g}")
    rows.sort(key=lambda r: (r.value, r.seed))
    return rows
