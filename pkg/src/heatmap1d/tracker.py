"""Video tracker: per-frame detector heatmaps refined by decayed temporal context.

For each axis the stacked N x L heatmap matrix E_t is treated as an image
with N channels, one row and L columns:

* CNN3 (encoder, bias-free): a width-5 conv at stride 1 then a width-4 conv at
  stride 2, giving U_t of shape K x 1 x L/2.
* fusion: V_t = U_t + A_t, A_{t+1} = lambda * (A_t + U_t), A_1 = 0.
* CNN4 (decoder): a kernel = stride = 2 transposed conv (bias-free) and a 1x1
  transposed conv with bias back to N x L. The result E'_t is added to E_t.

The final decoder weights start at zero so an untrained tracker reproduces the
detector exactly.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .codec import decode_batch, encode_targets
from .detector import (DetectorConfig, DetectorParams, Split, TrainingDiverged, forward, predict_heatmaps,
                       train_detector)
from .metrics import fmt6, nrmse_batch
from .optim import Adam
from .synth import ClipDataset
from .tensor import Tensor, conv2d, conv_transpose2d, kaiming_uniform, make_rng, no_grad, relu, reshape, scale, \
    sum_squares

AXES = ("x", "y")


@dataclass
class TrackerConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    lam: float = 0.3
    clip_length: int = 8
    learning_rate: float = 1e-3
    epochs: int = 10
    seed: int = 0
    channels: int = 16
    finetune: bool = False

    def __post_init__(self):
        if isinstance(self.detector, dict):
            self.detector = DetectorConfig(**self.detector)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.clip_length < 1:
            raise ValueError(f"clip_length must be >= 1, got {self.clip_length}")
        if self.channels < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("channels must be positive; epochs and learning_rate non-negative")
        if self.detector.L % 2:
            raise ValueError(f"tracker needs an even heatmap length, got L={self.detector.L}")

    def to_dict(self) -> dict:
        return asdict(self)


class TrackerParams:
    def __init__(self, config: TrackerConfig, detector: DetectorParams, tensors: dict[str, Tensor]):
        self.config = config
        self.detector = detector
        self.tensors = tensors

    @classmethod
    def init(cls, config: TrackerConfig, detector: DetectorParams | None = None,
             seed: int | None = None) -> "TrackerParams":
        seed = config.seed if seed is None else seed
        if detector is None:
            detector = DetectorParams.init(config.detector, seed)
        rng = make_rng(seed + 7919)
        N, K = config.detector.N, config.channels
        t: dict[str, Tensor] = {}

        def add(name, arr):
            t[name] = Tensor(arr, requires_grad=True, name=name)

        for axis in AXES:
            add(f"cnn3_{axis}.0.w", kaiming_uniform(rng, (K, N, 1, 5), N * 5))
            add(f"cnn3_{axis}.1.w", kaiming_uniform(rng, (K, K, 1, 4), K * 4))
            add(f"cnn4_{axis}.0.w", kaiming_uniform(rng, (K, K, 1, 2), K))
            add(f"cnn4_{axis}.1.w", np.zeros((K, N, 1, 1)))
            add(f"cnn4_{axis}.1.b", np.zeros(N))
        return cls(config, detector, t)

    def named(self) -> dict[str, Tensor]:
        out = {"det." + k: v for k, v in self.detector.named().items()}
        out.update(self.tensors)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def tracker_parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        det = {k[4:]: v for k, v in state.items() if k.startswith("det.")}
        own = {k: v for k, v in state.items() if not k.startswith("det.")}
        if set(own) != set(self.tensors):
            raise ValueError(f"tracker state mismatch: got {sorted(own)}, expected {sorted(self.tensors)}")
        self.detector.load_state_dict(det)
        for k, v in own.items():
            if self.tensors[k].shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} != expected {self.tensors[k].shape}")
            self.tensors[k].data = np.array(v, dtype=np.float64)

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, self.state_dict())

    @classmethod
    def load(cls, path: str | Path, config: TrackerConfig) -> "TrackerParams":
        p = cls.init(config)
        p.load_state_dict(checkpoint.load(path))
        return p


@dataclass
class TrackerState:
    acc_x: Tensor | None = None
    acc_y: Tensor | None = None
    frame: int = 0

    def accumulator(self, axis: str) -> Tensor | None:
        return self.acc_x if axis == "x" else self.acc_y


def _batched(E) -> tuple[Tensor, bool]:
    if not isinstance(E, Tensor):
        E = Tensor(np.asarray(E, dtype=np.float64))
    if E.ndim == 2:
        return reshape(E, (1,) + E.shape), True
    if E.ndim != 3:
        raise ValueError(f"expected (B,) N x L heatmaps, got shape {E.shape}")
    return E, False


def encode_heatmaps(E, params: TrackerParams, axis: str = "x") -> Tensor:
    """(B,) N x L heatmaps -> B x K x 1 x L/2 features."""
    cfg = params.config.detector
    E, _ = _batched(E)
    if E.shape[1:] != (cfg.N, cfg.L):
        raise ValueError(f"expected heatmaps of shape ({cfg.N}, {cfg.L}), got {E.shape[1:]}")
    x = reshape(E, (E.shape[0], cfg.N, 1, cfg.L))
    x = relu(conv2d(x, params.tensors[f"cnn3_{axis}.0.w"], None, stride=1, padding=(0, 2)))
    return conv2d(x, params.tensors[f"cnn3_{axis}.1.w"], None, stride=(1, 2), padding=(0, 1))


def feature_shape(config: TrackerConfig) -> tuple[int, int, int]:
    return config.channels, 1, config.detector.L // 2


def fuse_step(u: Tensor, acc: Tensor | None, lam: float) -> tuple[Tensor, Tensor | None]:
    """One step of V = U + A, A' = lam * (A + U) with A = None meaning zero."""
    v = u if acc is None else u + acc
    if lam == 0.0:
        return v, None
    return v, scale(v, lam)


def temporal_fuse(ux: Tensor, uy: Tensor, state: TrackerState, lam: float,
                  t: int | None = None) -> tuple[tuple[Tensor, Tensor], TrackerState]:
    """Fuse frame ``t`` (1-based) into the decayed accumulators."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if t is not None and t != state.frame + 1:
        raise ValueError(f"out-of-order frame: expected t={state.frame + 1}, got t={t}")
    for u, acc in ((ux, state.acc_x), (uy, state.acc_y)):
        if acc is not None and acc.shape != u.shape:
            raise ValueError(f"feature shape {u.shape} does not match accumulator {acc.shape}")
    vx, ax = fuse_step(ux, state.acc_x, lam)
    vy, ay = fuse_step(uy, state.acc_y, lam)
    return (vx, vy), TrackerState(ax, ay, state.frame + 1)


def decode_refinement(V: Tensor, params: TrackerParams, axis: str = "x") -> Tensor:
    """B x K x 1 x L/2 features -> B x N x L refinement."""
    cfg = params.config
    if V.ndim != 4 or V.shape[1:] != feature_shape(cfg):
        raise ValueError(f"expected features of shape (B,) {feature_shape(cfg)}, got {V.shape}")
    x = relu(conv_transpose2d(V, params.tensors[f"cnn4_{axis}.0.w"], None, stride=(1, 2)))
    x = conv_transpose2d(x, params.tensors[f"cnn4_{axis}.1.w"], params.tensors[f"cnn4_{axis}.1.b"], stride=1)
    return reshape(x, (x.shape[0], cfg.detector.N, cfg.detector.L))


def refine_step(ex, ey, state: TrackerState, params: TrackerParams,
                t: int | None = None) -> tuple[Tensor, Tensor, TrackerState]:
    """Detected heatmaps of one frame -> refined heatmaps E + E'."""
    ex, squeezed = _batched(ex)
    ey, _ = _batched(ey)
    ux = encode_heatmaps(ex, params, "x")
    uy = encode_heatmaps(ey, params, "y")
    (vx, vy), state = temporal_fuse(ux, uy, state, params.config.lam, t)
    hx = ex + decode_refinement(vx, params, "x")
    hy = ey + decode_refinement(vy, params, "y")
    if squeezed:
        hx, hy = reshape(hx, hx.shape[1:]), reshape(hy, hy.shape[1:])
    return hx, hy, state


def track_step(frame: np.ndarray, state: TrackerState, params: TrackerParams):
    """Detector forward, encode, fuse, decode, add; returns (landmarks, (hx, hy), state')."""
    ex, ey = forward(frame, params.detector)
    hx, hy, state = refine_step(ex, ey, state, params)
    coords = decode_batch(hx.data, hy.data, params.config.detector.F)
    return coords, (hx, hy), state


def unroll(ex_seq, ey_seq, params: TrackerParams) -> list[tuple[Tensor, Tensor]]:
    """Refine a B x T x N x L stack of detected heatmaps frame by frame."""
    state = TrackerState()
    out = []
    for t in range(len(ex_seq) if isinstance(ex_seq, list) else ex_seq.shape[1]):
        ex = ex_seq[t] if isinstance(ex_seq, list) else ex_seq[:, t]
        ey = ey_seq[t] if isinstance(ey_seq, list) else ey_seq[:, t]
        hx, hy, state = refine_step(ex, ey, state, params, t + 1)
        out.append((hx, hy))
    return out


def track_clip(frames: np.ndarray, params: TrackerParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Track a T x 3 x F x F clip; returns (T, N, 2) coordinates and refined x/y heatmaps."""
    ex, ey = predict_heatmaps(frames, params.detector)
    with no_grad():
        steps = unroll(ex[None], ey[None], params)
    hx = np.stack([a.data[0] for a, _ in steps])
    hy = np.stack([b.data[0] for _, b in steps])
    return decode_batch(hx, hy, params.config.detector.F), hx, hy


def tracking_csv(coords: np.ndarray) -> str:
    rows = ["frame,landmark,x,y"]
    for t, frame in enumerate(coords):
        for n, (x, y) in enumerate(frame):
            rows.append(f"{t},{n},{fmt6(x)},{fmt6(y)}")
    return "\n".join(rows) + "\n"


def tracker_loss(preds: Sequence[tuple[Tensor, Tensor]], gtx, gty) -> Tensor:
    """Squared heatmap error summed over frames, landmarks and bins; mean over clips.

    ``preds`` holds one (B x N x L, B x N x L) pair per frame; targets are B x T x N x L.
    """
    gtx, gty = np.asarray(gtx, dtype=np.float64), np.asarray(gty, dtype=np.float64)
    if gtx.shape != gty.shape or gtx.ndim != 4 or gtx.shape[1] != len(preds):
        raise ValueError(f"targets {gtx.shape}/{gty.shape} do not match {len(preds)} predicted frames")
    total = None
    for t, (hx, hy) in enumerate(preds):
        if hx.shape != gtx[:, t].shape or hy.shape != gty[:, t].shape:
            raise ValueError(f"frame {t}: prediction {hx.shape}/{hy.shape} vs target {gtx[:, t].shape}")
        term = sum_squares(hx - Tensor(gtx[:, t])) + sum_squares(hy - Tensor(gty[:, t]))
        total = term if total is None else total + term
    return scale(total, 1.0 / gtx.shape[0])


# -- training ---------------------------------------------------------------------------


@dataclass
class TrackerResult:
    params: TrackerParams
    log: list[tuple[str, int, float, float]]

    def log_csv(self) -> str:
        rows = ["phase,epoch,train_loss,val_nrmse"]
        rows += [f"{p},{e},{fmt6(l)},{fmt6(v)}" for p, e, l, v in self.log]
        return "\n".join(rows) + "\n"


def clip_heatmaps(clips: ClipDataset, detector: DetectorParams) -> tuple[np.ndarray, np.ndarray]:
    n, T = clips.frames.shape[:2]
    ex, ey = predict_heatmaps(clips.frames.reshape((n * T,) + clips.frames.shape[2:]), detector)
    return ex.reshape((n, T) + ex.shape[1:]), ey.reshape((n, T) + ey.shape[1:])


def predict_tracks(clips: ClipDataset, params: TrackerParams, heatmaps=None) -> np.ndarray:
    """(n, T, N, 2) tracked coordinates for every clip."""
    ex, ey = clip_heatmaps(clips, params.detector) if heatmaps is None else heatmaps
    out = np.empty(clips.tracks.shape)
    with no_grad():
        for i in range(0, len(clips), 50):
            steps = unroll(ex[i:i + 50], ey[i:i + 50], params)
            hx = np.stack([a.data for a, _ in steps], axis=1)
            hy = np.stack([b.data for _, b in steps], axis=1)
            out[i:i + 50] = decode_batch(hx, hy, params.config.detector.F)
    return out


def evaluate_tracker(params: TrackerParams, clips: ClipDataset, heatmaps=None) -> float:
    """Mean NRMSE (percent) over every frame of every clip."""
    if len(clips) == 0:
        return float("nan")
    pred = predict_tracks(clips, params, heatmaps)
    N = clips.tracks.shape[2]
    return float(np.mean(nrmse_batch(pred.reshape(-1, N, 2), clips.tracks.reshape(-1, N, 2))))


def train_tracker(train: ClipDataset, config: TrackerConfig, val: ClipDataset | None = None,
                  detector: DetectorParams | None = None,
                  log_path: str | Path | None = None,
                  checkpoint_path: str | Path | None = None,
                  progress: Callable[[str], None] | None = None) -> TrackerResult:
    """Two phases: detector on individual frames (skipped when ``detector`` is given),
    then CNN3/CNN4 on whole clips with backpropagation through the unrolled fusion."""
    if train.T != config.clip_length:
        raise ValueError(f"clips have T={train.T}, config expects clip_length={config.clip_length}")
    if len(train) == 0:
        raise ValueError("training set is empty")
    val = val if val is not None else ClipDataset(train.frames[:0], train.tracks[:0], train.occluded[:0])
    log: list[tuple[str, int, float, float]] = []

    def emit(row, seconds=None):
        log.append(row)
        if log_path is not None:
            Path(log_path).write_text(TrackerResult(None, log).log_csv())  # type: ignore[arg-type]
        if progress is not None:
            extra = f" ({seconds:.1f}s)" if seconds is not None else ""
            progress(f"{row[0]} epoch {row[1]}: train_loss={row[2]:.6g} val_nrmse={row[3]:.6g}{extra}")

    if detector is None:
        res = train_detector(Split(train.as_images(), val.as_images()), config.detector)
        detector = res.params
        for e, l, v in res.log:
            emit(("detect", e, l, v))
    params = TrackerParams.init(config, detector)
    detector.set_requires_grad(config.finetune)
    trainable = params.parameters() if config.finetune else params.tracker_parameters()
    opt = Adam(trainable, lr=config.learning_rate)

    spec = config.detector.heatmap_spec
    gtx, gty = encode_targets(train.tracks, spec)
    fixed = None if config.finetune else clip_heatmaps(train, detector)
    val_maps = clip_heatmaps(val, detector) if len(val) and not config.finetune else None

    def epoch_loss() -> float:
        maps = fixed if fixed is not None else clip_heatmaps(train, detector)
        total = 0.0
        with no_grad():
            for i in range(0, len(train), 50):
                total += tracker_loss(unroll(maps[0][i:i + 50], maps[1][i:i + 50], params),
                                      gtx[i:i + 50], gty[i:i + 50]).item() * len(gtx[i:i + 50])
        return total / len(train)

    emit(("track", 0, epoch_loss(), evaluate_tracker(params, val, val_maps)))
    rng = make_rng(config.seed + 2)
    B = config.detector.batch_size
    good = params.state_dict()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        order = rng.permutation(len(train))
        for start in range(0, len(train), B):
            idx = np.sort(order[start:start + B])
            if fixed is not None:
                ex, ey = fixed[0][idx], fixed[1][idx]
            else:
                seq = [forward(train.frames[idx, t], detector) for t in range(train.T)]
                ex, ey = [a for a, _ in seq], [b for _, b in seq]
            loss = tracker_loss(unroll(ex, ey, params), gtx[idx], gty[idx])
            value = loss.item()
            if not math.isfinite(value):
                params.load_state_dict(good)
                if checkpoint_path is not None:
                    params.save(checkpoint_path)
                raise TrainingDiverged(f"non-finite tracker loss at epoch {epoch}", None, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
        good = params.state_dict()
        if checkpoint_path is not None:
            params.save(checkpoint_path)
        emit(("track", epoch, total / len(train), evaluate_tracker(params, val, val_maps)),
             time.perf_counter() - t0)
    detector.set_requires_grad(True)
    return TrackerResult(params, log)
