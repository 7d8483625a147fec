"""Parametric face renderer with exact continuous landmark ground truth.

Faces are an ellipse with two eye discs, a nose dot, a mouth arc and two
eyebrow strokes, drawn with soft edges so sub-pixel landmark positions are
visible in the pixels. Pixel (row i, col j) is sampled at (j + 0.5, i + 0.5);
landmark coordinates are (p, q) = (x, y) in that frame.

Images are float64 in [0, 1], quantized to multiples of 1/255 so they
round-trip through 8-bit PGM files exactly.
"""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import LandmarkSet

SUPPORTED_N = (5, 68)

# centre jitter and the largest landmark radius (as fractions of F) are chosen
# so that every landmark stays inside [0, F) without rejection sampling
CENTER_JITTER = 0.08
ROT_LIMIT = 0.35
ROT_STEP = 0.02  # radians of rotation per unit of motion_scale


@dataclass
class SceneParams:
    F: int
    cx: float
    cy: float
    a: float  # horizontal semi-axis
    b: float  # vertical semi-axis
    theta: float
    eye_dx: float  # fraction of a
    eye_dy: float  # fraction of b, above centre
    eye_r: float  # pixels
    nose_dy: float  # fraction of b, below centre
    mouth_dx: float
    mouth_dy: float
    mouth_curve: float  # fraction of b; positive sags downward (smile)
    background: float
    face_level: float
    feature_level: float
    grad_x: float
    grad_y: float
    noise_std: float


def sample_scene(rng: np.random.Generator, F: int) -> SceneParams:
    u = rng.uniform
    return SceneParams(
        F=F,
        cx=F / 2 + u(-CENTER_JITTER, CENTER_JITTER) * F,
        cy=F / 2 + u(-CENTER_JITTER, CENTER_JITTER) * F,
        a=u(0.28, 0.34) * F,
        b=u(0.33, 0.38) * F,
        theta=u(-ROT_LIMIT, ROT_LIMIT),
        eye_dx=u(0.36, 0.44),
        eye_dy=u(0.22, 0.32),
        eye_r=u(0.045, 0.06) * F,
        nose_dy=u(0.0, 0.15),
        mouth_dx=u(0.28, 0.40),
        mouth_dy=u(0.45, 0.58),
        mouth_curve=u(-0.08, 0.08),
        background=u(0.05, 0.35),
        face_level=u(0.55, 0.85),
        feature_level=u(0.0, 0.2),
        grad_x=u(-0.2, 0.2),
        grad_y=u(-0.2, 0.2),
        noise_std=u(0.01, 0.04),
    )


def _to_image(s: SceneParams, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Map face-frame points (u right, v down) to image coordinates, shape (..., 2)."""
    c, sn = math.cos(s.theta), math.sin(s.theta)
    return np.stack([s.cx + c * u - sn * v, s.cy + sn * u + c * v], axis=-1)


def _face_frame_points(s: SceneParams, N: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = s.a, s.b
    ex, ey = s.eye_dx * a, -s.eye_dy * b
    nose_v = s.nose_dy * b
    mx, my = s.mouth_dx * a, s.mouth_dy * b
    if N == 5:
        u = np.array([-ex, ex, 0.0, -mx, mx])
        v = np.array([ey, ey, nose_v, my, my])
        return u, v

    pts: list[tuple[float, float]] = []
    # jaw contour 0-16, left ear -> chin -> right ear
    for k in range(17):
        phi = math.pi - k * math.pi / 16
        pts.append((0.97 * a * math.cos(phi), 0.97 * b * math.sin(phi)))
    # eyebrows 17-26
    brow_v = ey - 0.28 * b
    for side in (-1, 1):
        for k in range(5):
            t = (k - 2) / 2.0
            pts.append((side * ex + 0.15 * a * t, brow_v - 0.03 * b * (1 - t * t)))
    # nose bridge 27-30 and base 31-35
    for k in range(4):
        pts.append((0.0, ey + (nose_v - ey) * (k + 1) / 4))
    for k in range(5):
        pts.append((0.08 * a * (k - 2), nose_v + 0.05 * b))
    # eyes 36-47, six points per eye starting at the outer/left corner
    for side in (-1, 1):
        for deg in (180, 120, 60, 0, 300, 240):
            th = math.radians(deg)
            pts.append((side * ex + s.eye_r * math.cos(th), ey - s.eye_r * math.sin(th)))
    # mouth 48-59 outer ring, 60-67 inner ring
    sag = s.mouth_curve * b
    for k in range(12):
        th = math.pi - k * 2 * math.pi / 12
        pts.append((mx * math.cos(th), my + 0.06 * b * math.sin(-th) + sag * (1 - math.cos(th) ** 2)))
    for k in range(8):
        th = math.pi - k * 2 * math.pi / 8
        pts.append((0.7 * mx * math.cos(th), my + 0.02 * b * math.sin(-th) + sag * (1 - math.cos(th) ** 2)))
    arr = np.array(pts)
    return arr[:, 0], arr[:, 1]


def scene_landmarks(s: SceneParams, N: int) -> np.ndarray:
    if N not in SUPPORTED_N:
        raise ValueError(f"unsupported landmark count N={N}; choose one of {SUPPORTED_N}")
    u, v = _face_frame_points(s, N)
    return _to_image(s, u, v)


def _soft(d: np.ndarray, width: float = 0.5) -> np.ndarray:
    """Soft inside-indicator for a signed distance (positive inside)."""
    return 0.5 * (1.0 + np.tanh(d / width))


def _curve_points(s: SceneParams, u0: float, u1: float, v0: float, sag: float, n: int = 48) -> np.ndarray:
    t = np.linspace(-1.0, 1.0, n)
    u = 0.5 * (u0 + u1) + 0.5 * (u1 - u0) * t
    v = v0 + sag * (1 - t * t)
    return _to_image(s, u, v)


def _stroke(xx: np.ndarray, yy: np.ndarray, pts: np.ndarray, half_width: float) -> np.ndarray:
    d = np.full(xx.shape, np.inf)
    for px, py in pts:
        np.minimum(d, np.hypot(xx - px, yy - py), out=d)
    return _soft(half_width - d)


def render_scene(s: SceneParams, noise: np.ndarray | None = None) -> np.ndarray:
    """Render to a (F, F) grayscale array in [0, 1] (unquantized)."""
    F = s.F
    coords = np.arange(F, dtype=np.float64) + 0.5
    xx, yy = np.meshgrid(coords, coords)
    img = s.background + s.grad_x * (xx - F / 2) / F + s.grad_y * (yy - F / 2) / F

    c, sn = math.cos(s.theta), math.sin(s.theta)
    du, dv = xx - s.cx, yy - s.cy
    u = c * du + sn * dv
    v = -sn * du + c * dv
    rho = np.sqrt((u / s.a) ** 2 + (v / s.b) ** 2)
    face = _soft((1.0 - rho) * min(s.a, s.b))
    img = img * (1 - face) + (s.face_level + 0.5 * (s.grad_x * u + s.grad_y * v) / F) * face

    dark = s.feature_level
    eyes = _to_image(s, np.array([-s.eye_dx * s.a, s.eye_dx * s.a]), np.array([-s.eye_dy * s.b] * 2))
    for ex, ey in eyes:
        m = _soft(s.eye_r - np.hypot(xx - ex, yy - ey))
        img = img * (1 - m) + dark * m
    nose = _to_image(s, np.array(0.0), np.array(s.nose_dy * s.b))
    m = _soft(0.035 * F - np.hypot(xx - nose[0], yy - nose[1]))
    img = img * (1 - m) + dark * m

    mx, my = s.mouth_dx * s.a, s.mouth_dy * s.b
    m = _stroke(xx, yy, _curve_points(s, -mx, mx, my, s.mouth_curve * s.b), 0.012 * F)
    img = img * (1 - m) + dark * m
    brow_v = -s.eye_dy * s.b - 0.28 * s.b
    for side in (-1, 1):
        cu = side * s.eye_dx * s.a
        pts = _curve_points(s, cu - 0.15 * s.a, cu + 0.15 * s.a, brow_v, -0.03 * s.b, n=24)
        m = _stroke(xx, yy, pts, 0.008 * F)
        img = img * (1 - m) + (0.5 * (dark + s.face_level)) * m

    if noise is not None:
        img = img + s.noise_std * noise
    return np.clip(img, 0.0, 1.0)


def quantize_image(gray: np.ndarray) -> np.ndarray:
    return np.rint(gray * 255.0) / 255.0


def to_rgb(gray: np.ndarray) -> np.ndarray:
    return np.repeat(gray[None], 3, axis=0)


def sample_seed(base_seed: int, index: int) -> int:
    """Stable per-sample seed derived from a base seed and an index."""
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF, int(base_seed) >> 32, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_scene(seed: int, F: int, N: int) -> tuple[np.ndarray, LandmarkSet]:
    """Render one face. Returns a (3, F, F) image and its landmarks."""
    if N not in SUPPORTED_N:
        raise ValueError(f"unsupported landmark count N={N}; choose one of {SUPPORTED_N}")
    rng = np.random.Generator(np.random.PCG64(seed))
    s = sample_scene(rng, F)
    noise = rng.standard_normal((F, F))
    img = quantize_image(render_scene(s, noise))
    return to_rgb(img), LandmarkSet(scene_landmarks(s, N))


# -- clips -------------------------------------------------------------------------


@dataclass
class Clip:
    frames: np.ndarray  # (T, 3, F, F)
    tracks: np.ndarray  # (T, N, 2)
    seed: int
    occluded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def T(self) -> int:
        return len(self.frames)


def motion_bound(motion_scale: float, F: int) -> float:
    """Upper bound on any landmark's displacement between consecutive frames.

    Centre moves at most ``motion_scale`` per axis, rotation at most
    ``ROT_STEP * motion_scale``, and landmarks lie within 0.38 F of the centre.
    """
    return motion_scale * (math.sqrt(2.0) + ROT_STEP * 0.38 * F)


def _reflect(x: float, lo: float, hi: float) -> float:
    if x < lo:
        x = 2 * lo - x
    elif x > hi:
        x = 2 * hi - x
    return min(max(x, lo), hi)


def generate_clip(seed: int, F: int, N: int, T: int, motion_scale: float = 1.0,
                  occlusion_prob: float = 0.0) -> Clip:
    if T < 1:
        raise ValueError(f"clip length must be >= 1, got {T}")
    if N not in SUPPORTED_N:
        raise ValueError(f"unsupported landmark count N={N}; choose one of {SUPPORTED_N}")
    scene_ss, motion_ss, occ_ss = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.Generator(np.random.PCG64(scene_ss))
    s = sample_scene(rng, F)
    noise = rng.standard_normal((F, F))
    mrng = np.random.Generator(np.random.PCG64(motion_ss))
    orng = np.random.Generator(np.random.PCG64(occ_ss))

    lo, hi = F / 2 - CENTER_JITTER * F, F / 2 + CENTER_JITTER * F
    frames = np.empty((T, 3, F, F))
    tracks = np.empty((T, N, 2))
    occluded = np.zeros(T, dtype=bool)
    for t in range(T):
        if t > 0:
            step = mrng.uniform(-1.0, 1.0, size=3) * motion_scale
            s = dataclasses.replace(
                s,
                cx=_reflect(s.cx + step[0], lo, hi),
                cy=_reflect(s.cy + step[1], lo, hi),
                theta=_reflect(s.theta + ROT_STEP * step[2], -ROT_LIMIT, ROT_LIMIT),
            )
        gray = render_scene(s, noise)
        lms = scene_landmarks(s, N)
        # draws happen every frame so the stream stays aligned across probabilities
        hit, which, jx, jy, w, h, level = (orng.uniform(), orng.integers(N), orng.uniform(-0.5, 0.5),
                                           orng.uniform(-0.5, 0.5), orng.uniform(0.2, 0.3),
                                           orng.uniform(0.2, 0.3), orng.uniform(0.0, 1.0))
        if hit < occlusion_prob:
            occluded[t] = True
            cx, cy = lms[which]
            half_w, half_h = w * F / 2, h * F / 2
            cx += jx * half_w
            cy += jy * half_h
            x0, x1 = int(max(0, math.floor(cx - half_w))), int(min(F, math.ceil(cx + half_w)))
            y0, y1 = int(max(0, math.floor(cy - half_h))), int(min(F, math.ceil(cy + half_h)))
            gray = gray.copy()
            gray[y0:y1, x0:x1] = level
        frames[t] = to_rgb(quantize_image(gray))
        tracks[t] = lms
    return Clip(frames, tracks, seed, occluded)


# -- datasets ------------------------------------------------------------------------


@dataclass
class LandmarkDataset:
    images: np.ndarray  # (n, 3, F, F)
    landmarks: np.ndarray  # (n, N, 2)
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def F(self) -> int:
        return self.images.shape[-1]

    @property
    def N(self) -> int:
        return self.landmarks.shape[1]

    def subset(self, idx) -> "LandmarkDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return LandmarkDataset(self.images[idx], self.landmarks[idx], [self.seeds[i] for i in idx] if self.seeds else [])


def generate_dataset(n: int, F: int, N: int, seed: int) -> LandmarkDataset:
    seeds = [sample_seed(seed, i) for i in range(n)]
    imgs = np.empty((n, 3, F, F))
    lms = np.empty((n, N, 2))
    for i, s in enumerate(seeds):
        imgs[i], ls = generate_scene(s, F, N)
        lms[i] = ls.coords
    return LandmarkDataset(imgs, lms, seeds)


@dataclass
class ClipDataset:
    frames: np.ndarray  # (n, T, 3, F, F)
    tracks: np.ndarray  # (n, T, N, 2)
    occluded: np.ndarray  # (n, T)
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def T(self) -> int:
        return self.frames.shape[1]

    def as_images(self) -> LandmarkDataset:
        n, T = self.frames.shape[:2]
        return LandmarkDataset(self.frames.reshape((n * T,) + self.frames.shape[2:]),
                               self.tracks.reshape((n * T,) + self.tracks.shape[2:]))


def generate_clip_dataset(n: int, F: int, N: int, T: int, seed: int, motion_scale: float = 1.0,
                          occlusion_prob: float = 0.0) -> ClipDataset:
    seeds = [sample_seed(seed, i) for i in range(n)]
    clips = [generate_clip(s, F, N, T, motion_scale, occlusion_prob) for s in seeds]
    return ClipDataset(np.stack([c.frames for c in clips]), np.stack([c.tracks for c in clips]),
                       np.stack([c.occluded for c in clips]), seeds)


# -- file formats -------------------------------------------------------------------------


class FormatError(ValueError):
    pass


def write_pts(path: str | Path, landmarks: LandmarkSet | np.ndarray) -> None:
    coords = landmarks.coords if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks).reshape(-1, 2)
    lines = ["version: 1", f"n_points: {len(coords)}", "{"]
    lines += [f"{x:.6f} {y:.6f}" for x, y in coords]
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_pts(path: str | Path) -> LandmarkSet:
    lines = Path(path).read_text().splitlines()
    if not lines or not re.fullmatch(r"version:\s*1", lines[0].strip()):
        raise FormatError(f"{path}:1: expected 'version: 1'")
    m = re.fullmatch(r"n_points:\s*(\d+)", lines[1].strip()) if len(lines) > 1 else None
    if m is None:
        raise FormatError(f"{path}:2: expected 'n_points: <N>'")
    n = int(m.group(1))
    if len(lines) < 3 or lines[2].strip() != "{":
        raise FormatError(f"{path}:3: expected '{{'")
    coords = []
    lineno = 3
    for lineno, line in enumerate(lines[3:], start=4):
        text = line.strip()
        if text == "}":
            break
        parts = text.split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'x y', got {line!r}")
        try:
            coords.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric coordinate {line!r}") from None
    else:
        raise FormatError(f"{path}:{lineno}: missing closing '}}'")
    if len(coords) != n:
        raise FormatError(f"{path}:{lineno}: n_points is {n} but {len(coords)} points were listed")
    return LandmarkSet(np.array(coords))


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a binary (P5) 8-bit PGM.

    Accepts a uint8 (H, W) array, or floats in [0, 1] of shape (H, W) or
    (C, H, W) (first channel used).
    """
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[0]
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM into a uint8 (H, W) array."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: bad PGM magic {data[:2]!r}")
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    raw = data[pos:pos + w * h]
    if len(raw) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def image_from_pgm(path: str | Path) -> np.ndarray:
    return to_rgb(read_pgm(path).astype(np.float64) / 255.0)


def save_dataset(root: str | Path, data: LandmarkDataset, params: dict) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annots").mkdir(parents=True, exist_ok=True)
    for i in range(len(data)):
        write_pgm(root / "images" / f"{i:06d}.pgm", data.images[i])
        write_pts(root / "annots" / f"{i:06d}.pts", data.landmarks[i])
    _write_manifest(root, params, data.seeds)


def save_clips(root: str | Path, clips: ClipDataset, params: dict) -> None:
    root = Path(root)
    for c in range(len(clips)):
        d = root / "clips" / f"{c:04d}"
        d.mkdir(parents=True, exist_ok=True)
        for t in range(clips.T):
            write_pgm(d / f"frame_{t:03d}.pgm", clips.frames[c, t])
            write_pts(d / f"frame_{t:03d}.pts", clips.tracks[c, t])
    _write_manifest(root, params, clips.seeds, name="clips_manifest.txt" if (root / "manifest.txt").exists() else "manifest.txt")


def _write_manifest(root: Path, params: dict, seeds: list[int], name: str = "manifest.txt") -> None:
    lines = [f"{k} = {v}" for k, v in params.items()]
    lines += [f"seed[{i}] = {s}" for i, s in enumerate(seeds)]
    (root / name).write_text("\n".join(lines) + "\n")


def load_dataset(root: str | Path) -> LandmarkDataset:
    root = Path(root)
    names = sorted(p.stem for p in (root / "images").glob("*.pgm"))
    if not names:
        raise FileNotFoundError(f"no images under {root / 'images'}")
    imgs = np.stack([image_from_pgm(root / "images" / f"{n}.pgm") for n in names])
    lms = np.stack([read_pts(root / "annots" / f"{n}.pts").coords for n in names])
    return LandmarkDataset(imgs, lms)


def load_clips(root: str | Path) -> ClipDataset:
    root = Path(root)
    dirs = sorted(p for p in (root / "clips").iterdir() if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no clips under {root / 'clips'}")
    frames, tracks = [], []
    for d in dirs:
        names = sorted(p.stem for p in d.glob("frame_*.pgm"))
        frames.append(np.stack([image_from_pgm(d / f"{n}.pgm") for n in names]))
        tracks.append(np.stack([read_pts(d / f"{n}.pts").coords for n in names]))
    frames_arr = np.stack(frames)
    return ClipDataset(frames_arr, np.stack(tracks), np.zeros(frames_arr.shape[:2], dtype=bool))
