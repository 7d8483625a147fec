"""Image -> per-axis 1D heatmap detector.

Pipeline for a B x 3 x F x F batch:

* backbone: two stride-2 stem convs (F -> F/4) and one hourglass of
  ``hourglass_depth`` levels (stride-2 encoder, nearest-upsample decoder,
  additive skips), giving ``base_channels`` x F/4 x F/4.
* per-axis heads. The y-axis head sees the feature map transposed, so both
  heads compress rows and keep columns as positions along their axis.
  CNN1 halves the row extent with stride-(2, 1) 3x3 convs until it reaches
  ``attention_dim`` rows; co-attention couples the two stacks; CNN2 keeps
  halving to one row and a 1x1 conv emits ``deconv_channels`` maps per
  landmark; a kernel = stride = M transposed conv (weights shared across
  landmarks) expands F/4 positions to L bins.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .coattention import CoAttentionParams, coattention_forward
from .codec import HeatmapSpec, LandmarkSet, decode_batch, encode_targets
from .metrics import fmt6, nrmse_batch
from .optim import Adam
from .synth import LandmarkDataset
from .tensor import (Tensor, conv2d, conv_transpose2d, kaiming_uniform, make_rng, no_grad,
                     relu, reshape, scale, sum_squares, swap_last, transpose, upsample_nearest)


@dataclass
class DetectorConfig:
    F: int = 64
    L: int = 192
    N: int = 5
    hourglass_depth: int = 2
    base_channels: int = 16
    head_channels: int = 128
    M: int = 0  # 0: derive from L
    gamma: float = 0.4
    sigma: float = 2.5
    learning_rate: float = 1e-4
    batch_size: int = 10
    epochs: int = 10
    seed: int = 0
    attention_dim: int = 4
    deconv_channels: int = 32

    def __post_init__(self):
        for name in ("F", "L", "N", "hourglass_depth", "base_channels", "head_channels", "batch_size",
                     "attention_dim", "deconv_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0 or self.M < 0 or self.learning_rate < 0:
            raise ValueError("epochs, M and learning_rate must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.F % 4:
            raise ValueError(f"F must be divisible by 4, got {self.F}")
        c = self.feature_extent
        if c % (2 ** self.hourglass_depth):
            raise ValueError(f"feature extent {c} (F/4) not divisible by 2**hourglass_depth")
        if self.M == 0:
            if self.L % c:
                raise ValueError(f"L={self.L} is not a multiple of the pre-deconv extent {c}")
            self.M = self.L // c
        elif self.M * c != self.L:
            raise ValueError(f"L must equal M x pre-deconv extent: {self.M} x {c} != {self.L}")
        compression_steps(c, self.attention_dim, "CNN1")

    @property
    def feature_extent(self) -> int:
        return self.F // 4

    @property
    def heatmap_spec(self) -> HeatmapSpec:
        return HeatmapSpec(self.F, self.L, self.sigma)

    def to_dict(self) -> dict:
        return asdict(self)


def config_field_names(cls=DetectorConfig) -> list[str]:
    return [f.name for f in fields(cls)]


def compression_steps(extent: int, target: int, stage: str) -> int:
    """Number of stride-2 (3x3, pad 1) convs taking ``extent`` down to ``target``."""
    n, steps = extent, 0
    while n > target:
        n = (n - 1) // 2 + 1
        steps += 1
    if n != target:
        raise ValueError(f"{stage}: extent {extent} cannot be halved onto {target} (stops at {n})")
    return steps


class DetectorParams:
    """Named trainable tensors of the detector plus its co-attention block."""

    def __init__(self, config: DetectorConfig, tensors: dict[str, Tensor], coatt: CoAttentionParams):
        self.config = config
        self.tensors = tensors
        self.coatt = coatt

    @classmethod
    def init(cls, config: DetectorConfig, seed: int | None = None) -> "DetectorParams":
        seed = config.seed if seed is None else seed
        rng = make_rng(seed)
        C, K = config.base_channels, config.head_channels
        t: dict[str, Tensor] = {}

        def conv(name, cin, cout, kh=3, kw=3):
            w = kaiming_uniform(rng, (cout, cin, kh, kw), cin * kh * kw)
            t[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
            t[name + ".b"] = Tensor(np.zeros(cout), requires_grad=True, name=name + ".b")

        conv("stem0", 3, C)
        conv("stem1", C, C)
        prefix = "hg"
        for d in range(config.hourglass_depth, 0, -1):
            conv(prefix + ".skip", C, C)
            conv(prefix + ".down", C, C)
            conv(prefix + ".up", C, C)
            if d == 1:
                conv(prefix + ".bottom", C, C)
            prefix += ".inner"
        c, r, J = config.feature_extent, config.attention_dim, config.deconv_channels
        for axis in ("x", "y"):
            for i in range(compression_steps(c, r, "CNN1")):
                conv(f"head_{axis}.cnn1_{i}", C if i == 0 else K, K)
            for i in range(compression_steps(r, 1, "CNN2")):
                conv(f"head_{axis}.cnn2_{i}", K, K)
            conv(f"head_{axis}.out", K, config.N * J, 1, 1)
            w = kaiming_uniform(rng, (J, 1, 1, config.M), J)
            t[f"head_{axis}.deconv.w"] = Tensor(w, requires_grad=True, name=f"head_{axis}.deconv.w")
            t[f"head_{axis}.deconv.b"] = Tensor(np.zeros(1), requires_grad=True, name=f"head_{axis}.deconv.b")
        coatt = CoAttentionParams.init(r, config.gamma, seed=int(rng.integers(2 ** 63)))
        coatt.P.name, coatt.Q.name = "coatt.P", "coatt.Q"
        return cls(config, t, coatt)

    def named(self) -> dict[str, Tensor]:
        out = dict(self.tensors)
        out["coatt.P"] = self.coatt.P
        out["coatt.Q"] = self.coatt.Q
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named()
        if set(state) != set(named):
            missing, extra = set(named) - set(state), set(state) - set(named)
            raise ValueError(f"state mismatch; missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if named[k].shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} != expected {named[k].shape}")
            named[k].data = np.array(v, dtype=np.float64)

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, self.state_dict())

    @classmethod
    def load(cls, path: str | Path, config: DetectorConfig) -> "DetectorParams":
        p = cls.init(config)
        p.load_state_dict(checkpoint.load(path))
        return p

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def _conv(params: DetectorParams, name: str, x: Tensor, stride=1, padding=1) -> Tensor:
    return conv2d(x, params.tensors[name + ".w"], params.tensors[name + ".b"], stride, padding)


def _as_batch(x: Tensor | np.ndarray) -> tuple[Tensor, bool]:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    return x, False


def _hourglass(params: DetectorParams, x: Tensor, depth: int, prefix: str) -> Tensor:
    skip = relu(_conv(params, prefix + ".skip", x))
    down = relu(_conv(params, prefix + ".down", x, stride=2))
    if depth > 1:
        inner = _hourglass(params, down, depth - 1, prefix + ".inner")
    else:
        inner = relu(_conv(params, prefix + ".bottom", down))
    up = relu(_conv(params, prefix + ".up", upsample_nearest(inner, 2)))
    return skip + up


def backbone_forward(image: Tensor | np.ndarray, params: DetectorParams) -> Tensor:
    """(B,) 3 x F x F image in [0, 1] -> (B,) C x F/4 x F/4 feature map."""
    cfg = params.config
    x, squeezed = _as_batch(image)
    if x.shape[1:] != (3, cfg.F, cfg.F):
        raise ValueError(f"expected image of shape (3, {cfg.F}, {cfg.F}), got {x.shape[1:]}")
    x = relu(_conv(params, "stem0", x, stride=2))
    x = relu(_conv(params, "stem1", x, stride=2))
    x = _hourglass(params, x, cfg.hourglass_depth, "hg")
    return reshape(x, x.shape[1:]) if squeezed else x


def _cnn1(params: DetectorParams, axis: str, x: Tensor) -> Tensor:
    cfg = params.config
    for i in range(compression_steps(x.shape[-2], cfg.attention_dim, f"CNN1_{axis}")):
        x = relu(_conv(params, f"head_{axis}.cnn1_{i}", x, stride=(2, 1)))
    return x


def _cnn2(params: DetectorParams, axis: str, x: Tensor) -> Tensor:
    cfg = params.config
    for i in range(compression_steps(x.shape[-2], 1, f"CNN2_{axis}")):
        x = relu(_conv(params, f"head_{axis}.cnn2_{i}", x, stride=(2, 1)))
    x = _conv(params, f"head_{axis}.out", x, padding=0)  # B, N*J, 1, c
    B, c = x.shape[0], x.shape[-1]
    J = cfg.deconv_channels
    x = reshape(x, (B * cfg.N, J, 1, c))
    x = conv_transpose2d(x, params.tensors[f"head_{axis}.deconv.w"], params.tensors[f"head_{axis}.deconv.b"],
                         stride=(1, cfg.M))
    return reshape(x, (B, cfg.N, c * cfg.M))


def heads_forward(feat: Tensor, params: DetectorParams) -> tuple[Tensor, Tensor]:
    """Feature map -> (H_x, H_y), each (B,) N x L."""
    feat, squeezed = _as_batch(feat)
    if feat.shape[-1] != feat.shape[-2]:
        raise ValueError(f"feature map must be square, got {feat.shape}")
    ax = _cnn1(params, "x", feat)  # B, K, r, c_x   (rows: compressed y)
    ay = _cnn1(params, "y", transpose(feat, (0, 1, 3, 2)))  # B, K, r, c_y (rows: compressed x)
    dx, dy = coattention_forward(swap_last(ax), ay, params.coatt)
    hx = _cnn2(params, "x", swap_last(dx))
    hy = _cnn2(params, "y", dy)
    if squeezed:
        hx, hy = reshape(hx, hx.shape[1:]), reshape(hy, hy.shape[1:])
    return hx, hy


def forward(images: Tensor | np.ndarray, params: DetectorParams) -> tuple[Tensor, Tensor]:
    return heads_forward(backbone_forward(images, params), params)


def predict_heatmaps(images: np.ndarray, params: DetectorParams, batch_size: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Inference over a (S, 3, F, F) stack, returning (S, N, L) x/y heatmaps."""
    hx, hy = [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            bx, by = forward(images[i:i + batch_size], params)
            hx.append(bx.data)
            hy.append(by.data)
    return np.concatenate(hx), np.concatenate(hy)


def detect(image: np.ndarray, params: DetectorParams) -> LandmarkSet:
    hx, hy = predict_heatmaps(np.asarray(image)[None], params)
    return LandmarkSet(decode_batch(hx[0], hy[0], params.config.F))


def detect_batch(images: np.ndarray, params: DetectorParams) -> np.ndarray:
    hx, hy = predict_heatmaps(images, params)
    return decode_batch(hx, hy, params.config.F)


def detector_loss(hx: Tensor, hy: Tensor, gtx, gty) -> Tensor:
    """Sum over landmarks and bins of squared error on both axes, mean over batch."""
    gtx = gtx if isinstance(gtx, Tensor) else Tensor(np.asarray(gtx, dtype=np.float64))
    gty = gty if isinstance(gty, Tensor) else Tensor(np.asarray(gty, dtype=np.float64))
    if hx.shape != gtx.shape or hy.shape != gty.shape:
        raise ValueError(f"loss shape mismatch: pred {hx.shape}/{hy.shape}, target {gtx.shape}/{gty.shape}")
    B = hx.shape[0] if hx.ndim == 3 else 1
    return scale(sum_squares(hx - gtx) + sum_squares(hy - gty), 1.0 / B)


# -- training ---------------------------------------------------------------------------


@dataclass
class Split:
    train: LandmarkDataset
    val: LandmarkDataset

    def __post_init__(self):
        if len(self.train) == 0:
            raise ValueError("training set is empty")


@dataclass
class TrainResult:
    params: DetectorParams
    log: list[tuple[int, float, float]]

    def log_csv(self) -> str:
        rows = ["epoch,train_loss,val_nrmse"]
        rows += [f"{e},{fmt6(l)},{fmt6(v)}" for e, l, v in self.log]
        return "\n".join(rows) + "\n"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: DetectorParams | None = None, epoch: int = 0):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


def evaluate_nrmse(params: DetectorParams, data: LandmarkDataset) -> float:
    if len(data) == 0:
        return float("nan")
    pred = detect_batch(data.images, params)
    return float(np.mean(nrmse_batch(pred, data.landmarks)))


def dataset_loss(params: DetectorParams, data: LandmarkDataset) -> float:
    spec = params.config.heatmap_spec
    gtx, gty = encode_targets(data.landmarks, spec)
    hx, hy = predict_heatmaps(data.images, params)
    return float((np.sum((hx - gtx) ** 2) + np.sum((hy - gty) ** 2)) / len(data))


def train_detector(data: Split | LandmarkDataset, config: DetectorConfig,
                   params: DetectorParams | None = None,
                   log_path: str | Path | None = None,
                   checkpoint_path: str | Path | None = None,
                   progress: Callable[[str], None] | None = None) -> TrainResult:
    """Adam training with seeded shuffling; one log row per epoch (row 0 = untrained)."""
    if isinstance(data, LandmarkDataset):
        data = Split(data, data.subset([]))
    if params is None:
        params = DetectorParams.init(config)
    spec = config.heatmap_spec
    gtx_all, gty_all = encode_targets(data.train.landmarks, spec)
    opt = Adam(params.parameters(), lr=config.learning_rate)
    rng = make_rng(config.seed + 1)
    log = [(0, dataset_loss(params, data.train), evaluate_nrmse(params, data.val))]
    _emit(log, log_path, progress)
    n = len(data.train)
    good = params.state_dict()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            hx, hy = forward(data.train.images[idx], params)
            loss = detector_loss(hx, hy, gtx_all[idx], gty_all[idx])
            value = loss.item()
            if not math.isfinite(value):
                params.load_state_dict(good)
                if checkpoint_path is not None:
                    params.save(checkpoint_path)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", params, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
        good = params.state_dict()
        if checkpoint_path is not None:
            params.save(checkpoint_path)
        log.append((epoch, total / n, evaluate_nrmse(params, data.val)))
        _emit(log, log_path, progress, time.perf_counter() - t0)
    return TrainResult(params, log)


def _emit(log, log_path, progress, seconds: float | None = None) -> None:
    if log_path is not None:
        Path(log_path).write_text(TrainResult(None, log).log_csv())  # type: ignore[arg-type]
    if progress is not None:
        e, l, v = log[-1]
        extra = f" ({seconds:.1f}s)" if seconds is not None else ""
        progress(f"epoch {e}: train_loss={l:.6g} val_nrmse={v:.6g}{extra}")
