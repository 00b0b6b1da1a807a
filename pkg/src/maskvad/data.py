"""Dataset ingestion, temporal window sampling, and a deterministic
synthetic video generator.

On-disk layout: ``<root>/<split>/<clip_id>/######.png`` (8-bit PNG, 6-digit
zero-padded frame index). Test clips additionally carry ``labels.txt`` with
one 0/1 per line, line k labeling frame k. The synthetic writer emits the
same layout plus a ``spec.json`` echo of its generator spec.
"""

import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, IngestionError

TRAIN, TEST = "train", "test"


@dataclass
class VideoClip:
    clip_id: str
    frames: np.ndarray  # (n, H, W, C) float64 in [0, 1]
    labels: np.ndarray | None = None  # (n,) int {0,1}, test clips only

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise IngestionError(f"clip {self.clip_id}: frames must be (n, H, W, C)")
        if self.labels is not None and len(self.labels) != len(self.frames):
            raise IngestionError(
                f"clip {self.clip_id}: {len(self.labels)} labels for "
                f"{len(self.frames)} frames"
            )

    @property
    def num_frames(self) -> int:
        return len(self.frames)


@dataclass
class VideoDataset:
    videos: list
    split: str
    frame_height: int
    frame_width: int
    channels: int

    def __post_init__(self):
        if self.split not in (TRAIN, TEST):
            raise ConfigError(f"split must be 'train' or 'test', got {self.split!r}")
        want = (self.frame_height, self.frame_width, self.channels)
        for clip in self.videos:
            if clip.frames.shape[1:] != want:
                raise IngestionError(
                    f"clip {clip.clip_id}: frames {clip.frames.shape[1:]} "
                    f"differ from dataset geometry {want}"
                )

    @property
    def num_frames(self) -> int:
        return sum(c.num_frames for c in self.videos)

    def strip_labels(self) -> "VideoDataset":
        """Label-free view of the same frames (one-class training contract)."""
        videos = [VideoClip(c.clip_id, c.frames, None) for c in self.videos]
        return VideoDataset(videos, self.split, self.frame_height,
                            self.frame_width, self.channels)


@dataclass(frozen=True)
class FrameWindow:
    """T stacked input frames plus the next frame as prediction target."""

    inputs: np.ndarray  # (H, W, T*C), frames concatenated oldest-first
    target: np.ndarray  # (H, W, C)
    clip_id: str
    target_index: int


def from_clips(videos: list, split: str) -> VideoDataset:
    if not videos:
        raise IngestionError(f"no clips for split {split!r}")
    h, w, c = videos[0].frames.shape[1:]
    return VideoDataset(videos, split, h, w, c)


# ---------------------------------------------------------------------------
# loading / writing the on-disk layout

def _load_frame(path: Path, channels: int, resize_to) -> np.ndarray:
    img = Image.open(path)
    img = img.convert("L" if channels == 1 else "RGB")
    if resize_to is not None and (img.height, img.width) != tuple(resize_to):
        h, w = resize_to
        img = img.resize((w, h), resample=Image.Resampling.BILINEAR)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if channels == 1:
        arr = arr[:, :, None]
    return arr


def load_dataset(root_path, split: str, resize_to=None, channels: int = 3,
                 patch_size: int | None = None) -> VideoDataset:
    """Load one split from the frames-on-disk layout.

    Clips are ordered lexicographically by directory name; frames by file
    name. With ``patch_size`` given, the effective frame size must divide
    by it. Test clips must carry a labels.txt aligned with their frames.
    """
    if channels not in (1, 3):
        raise ConfigError(f"channels must be 1 or 3, got {channels}")
    if resize_to is not None and patch_size is not None:
        h, w = resize_to
        if h % patch_size or w % patch_size:
            raise ConfigError(
                f"resize {h}x{w} not divisible by patch size {patch_size}"
            )
    split_dir = Path(root_path) / split
    if not split_dir.is_dir():
        raise IngestionError(f"missing split directory {split_dir}")
    clip_dirs = sorted(d for d in split_dir.iterdir() if d.is_dir())
    if not clip_dirs:
        raise IngestionError(f"no clip directories under {split_dir}")

    videos = []
    for clip_dir in clip_dirs:
        frame_files = sorted(clip_dir.glob("*.png"))
        if not frame_files:
            raise IngestionError(f"clip {clip_dir.name}: no PNG frames")
        frames = np.stack([_load_frame(p, channels, resize_to) for p in frame_files])
        labels = None
        if split == TEST:
            label_file = clip_dir / "labels.txt"
            if not label_file.is_file():
                raise IngestionError(f"clip {clip_dir.name}: missing labels.txt")
            raw = [ln.strip() for ln in label_file.read_text().splitlines() if ln.strip()]
            if len(raw) != len(frames):
                raise IngestionError(
                    f"clip {clip_dir.name}: {len(raw)} labels for {len(frames)} frames"
                )
            if any(v not in ("0", "1") for v in raw):
                raise IngestionError(f"clip {clip_dir.name}: labels must be 0 or 1")
            labels = np.array([int(v) for v in raw], dtype=np.int64)
        videos.append(VideoClip(clip_dir.name, frames, labels))

    if patch_size is not None:
        h, w = videos[0].frames.shape[1:3]
        if h % patch_size or w % patch_size:
            raise ConfigError(
                f"frame size {h}x{w} not divisible by patch size {patch_size}"
            )
    return from_clips(videos, split)


def write_dataset(dataset: VideoDataset, root_path):
    """Write a dataset split to the on-disk layout (deterministic bytes)."""
    root = Path(root_path)
    for clip in dataset.videos:
        clip_dir = root / dataset.split / clip.clip_id
        clip_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(clip.frames):
            arr = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
            img = Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr)
            img.save(clip_dir / f"{i:06d}.png", format="PNG",
                     optimize=False, compress_level=6)
        if clip.labels is not None:
            text = "\n".join(str(int(v)) for v in clip.labels) + "\n"
            (clip_dir / "labels.txt").write_text(text)


# ---------------------------------------------------------------------------
# window sampling

def sample_windows(dataset: VideoDataset, t: int) -> list:
    """All length-(t+1) windows: t stacked inputs plus the next frame.

    A clip of n frames yields n - t windows with target indices t..n-1;
    windows never cross clip boundaries. Clips with <= t frames are
    skipped with a warning.
    """
    if t < 1:
        raise ConfigError(f"window length T must be >= 1, got {t}")
    windows = []
    for clip in dataset.videos:
        n = clip.num_frames
        if n <= t:
            warnings.warn(
                f"clip {clip.clip_id}: {n} frames <= T={t}, no windows sampled"
            )
            continue
        for target_index in range(t, n):
            inputs = np.concatenate(list(clip.frames[target_index - t:target_index]), axis=-1)
            windows.append(FrameWindow(inputs=inputs, target=clip.frames[target_index],
                                       clip_id=clip.clip_id, target_index=target_index))
    return windows


# ---------------------------------------------------------------------------
# synthetic generator

ANOMALY_KINDS = ("fast_motion", "odd_shape")


@dataclass(frozen=True)
class SyntheticSpec:
    """Moving-sprite videos: a bouncing anti-aliased square on a static
    textured background, with fast-motion or odd-shape anomalies inside
    a fixed frame span of the anomalous test clips."""

    num_train_clips: int = 8
    num_test_clips: int = 8
    frames_per_clip: int = 24
    sprite_speed_normal: float = 2.0  # pixels/frame
    anomaly_kind: str = "fast_motion"
    anomaly_span: tuple = (8, 16)
    seed: int = 0
    frame_size: int = 64
    channels: int = 1
    sprite_size: float = 11.0
    sprite_intensity: float = 0.95
    anomaly_speed_factor: float = 4.0  # fast_motion multiplier, >= 3
    noise_std: float = 0.01
    texture_cells: int = 8

    def __post_init__(self):
        if self.anomaly_kind not in ANOMALY_KINDS:
            raise ConfigError(
                f"anomaly_kind must be one of {ANOMALY_KINDS}, got {self.anomaly_kind!r}"
            )
        lo, hi = self.anomaly_span
        if not (0 <= lo < hi <= self.frames_per_clip):
            raise ConfigError(
                f"anomaly_span {self.anomaly_span} must lie within "
                f"[0, {self.frames_per_clip})"
            )
        if self.anomaly_speed_factor < 3.0:
            raise ConfigError("anomaly_speed_factor must be >= 3")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.sprite_speed_normal <= 0 or self.sprite_size <= 0:
            raise ConfigError("sprite speed and size must be positive")
        if min(self.num_train_clips, self.num_test_clips, self.frames_per_clip) < 1:
            raise ConfigError("clip counts and frames_per_clip must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anomaly_span"] = list(self.anomaly_span)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["anomaly_span"] = tuple(d["anomaly_span"])
        return cls(**d)


def _smooth_texture(rng, size: int, cells: int, lo=0.25, hi=0.55) -> np.ndarray:
    """Bilinear upsampling of a coarse uniform grid: a static background."""
    g = rng.uniform(lo, hi, size=(cells + 1, cells + 1))
    xs = np.linspace(0.0, cells, size)
    i0 = np.minimum(xs.astype(int), cells - 1)
    f = xs - i0
    rows = g[i0] * (1 - f)[:, None] + g[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _interval_overlap(centers: np.ndarray, lo: float, hi: float) -> np.ndarray:
    # coverage of unit pixel cells [c-0.5, c+0.5] by the interval [lo, hi]
    return np.clip(np.minimum(centers + 0.5, hi) - np.maximum(centers - 0.5, lo), 0.0, 1.0)


def _sprite_alpha(size: int, cy: float, cx: float, half: float, shape: str) -> np.ndarray:
    ys = np.arange(size, dtype=np.float64)
    xs = np.arange(size, dtype=np.float64)
    if shape == "square":
        ay = _interval_overlap(ys, cy - half, cy + half)
        ax = _interval_overlap(xs, cx - half, cx + half)
        return ay[:, None] * ax[None, :]
    if shape == "cross":
        # union of a horizontal and a vertical bar
        arm = half * 1.4
        thick = half * 0.45
        a1 = (_interval_overlap(ys, cy - thick, cy + thick)[:, None]
              * _interval_overlap(xs, cx - arm, cx + arm)[None, :])
        a2 = (_interval_overlap(ys, cy - arm, cy + arm)[:, None]
              * _interval_overlap(xs, cx - thick, cx + thick)[None, :])
        return a1 + a2 - a1 * a2
    raise ConfigError(f"unknown sprite shape {shape!r}")


def _reflect(pos: float, lo: float, hi: float):
    """Fold a position back into [lo, hi]; returns (position, sign flip)."""
    if pos < lo:
        return 2 * lo - pos, -1.0
    if pos > hi:
        return 2 * hi - pos, -1.0
    return pos, 1.0


def _render_clip(spec: SyntheticSpec, rng, background: np.ndarray, anomalous: bool):
    size = spec.frame_size
    half = spec.sprite_size / 2.0
    margin = half + 1.0
    lo, hi = margin, size - 1 - margin
    span_lo, span_hi = spec.anomaly_span

    y = rng.uniform(lo, hi)
    x = rng.uniform(lo, hi)
    angle = rng.uniform(0, 2 * np.pi)
    dy, dx = np.sin(angle), np.cos(angle)  # unit direction, bounces flip sign

    frames = np.empty((spec.frames_per_clip, size, size, spec.channels))
    labels = np.zeros(spec.frames_per_clip, dtype=np.int64)
    for t in range(spec.frames_per_clip):
        in_span = anomalous and span_lo <= t < span_hi
        speed = spec.sprite_speed_normal
        shape = "square"
        if in_span:
            labels[t] = 1
            if spec.anomaly_kind == "fast_motion":
                speed *= spec.anomaly_speed_factor
            else:
                shape = "cross"
        if t > 0:
            y, flip = _reflect(y + dy * speed, lo, hi)
            dy *= flip
            x, flip = _reflect(x + dx * speed, lo, hi)
            dx *= flip
        alpha = _sprite_alpha(size, y, x, half, shape)
        img = background * (1 - alpha) + spec.sprite_intensity * alpha
        img = img + rng.normal(0.0, spec.noise_std, size=(size, size))
        img = np.clip(img, 0.0, 1.0)
        frames[t] = np.repeat(img[:, :, None], spec.channels, axis=2)
    return frames, labels


def generate_synthetic(spec: SyntheticSpec):
    """Build (train, test) datasets; bit-identical for identical specs.

    Train clips are all normal. Odd-indexed test clips carry the anomaly
    inside ``anomaly_span`` (labeled 1 there); even-indexed test clips
    stay normal.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    background = _smooth_texture(rng, spec.frame_size, spec.texture_cells)

    train_clips = []
    for i in range(spec.num_train_clips):
        frames, _ = _render_clip(spec, rng, background, anomalous=False)
        train_clips.append(VideoClip(f"train_{i:03d}", frames, None))

    test_clips = []
    for i in range(spec.num_test_clips):
        anomalous = i % 2 == 1
        frames, labels = _render_clip(spec, rng, background, anomalous=anomalous)
        test_clips.append(VideoClip(f"test_{i:03d}", frames, labels))

    return from_clips(train_clips, TRAIN), from_clips(test_clips, TEST)


def write_synthetic(spec: SyntheticSpec, root_path, force: bool = False):
    """Generate and persist both splits plus the spec.json echo."""
    root = Path(root_path)
    if root.exists() and any(root.iterdir()) and not force:
        raise IngestionError(f"output directory {root} is not empty (use force)")
    train, test = generate_synthetic(spec)
    write_dataset(train, root)
    write_dataset(test, root)
    (root / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    return train, test
