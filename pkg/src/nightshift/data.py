"""Image I/O, scene datasets, and the procedural synthetic benchmark.

Pixels are float32 in [0, 1]; files are 8-bit PNGs (binary PPM as fallback).
The byte mapping is floor(v*255 + 0.5) out and byte/255 back, which makes
save->load the identity on byte values.

A synthetic scene is a fixed background (gradient plus rectangles) watched by
a fixed camera: day frames add a few bright sprites (frame 0 stays empty,
standing in for a captured background shot), night frames are a gamma-crushed,
dimmed copy of the day frames with lens flares and sensor noise. Ground-truth
sprite masks accompany every frame that has sprites. Everything derives from
the scene seed, so two generations are bit-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import DimensionError

_SIXTEEN_BIT_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N"}


class ImageIOError(RuntimeError):
    """Unreadable or unsupported image file; message carries the path."""


def _to_bytes(values: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as 8-bit RGB PNG or PPM."""
    path = Path(path)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) image, got {image.shape}")
    data = _to_bytes(image).transpose(1, 2, 0)
    if path.suffix.lower() == ".ppm":
        header = f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
        path.write_bytes(header + data.tobytes())
        return
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def _load_ppm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    fields_ = []
    pos = 0
    while len(fields_) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields_.append(blob[start:pos])
    if fields_[0] != b"P6":
        raise ImageIOError(f"not a binary PPM: {path}")
    w, h, maxval = int(fields_[1]), int(fields_[2]), int(fields_[3])
    if maxval != 255:
        raise ImageIOError(f"only 8-bit PPM supported (maxval {maxval}): {path}")
    pos += 1  # single whitespace after the header
    raster = np.frombuffer(blob, np.uint8, count=h * w * 3, offset=pos)
    if raster.size != h * w * 3:
        raise ImageIOError(f"truncated PPM raster: {path}")
    return raster.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit image as (3, H, W) float32, values byte/255 exactly."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return _load_ppm(path)
    try:
        with Image.open(path) as img:
            if img.mode in _SIXTEEN_BIT_MODES:
                raise ImageIOError(f"16-bit images are unsupported: {path}")
            rgb = np.asarray(img.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return rgb.transpose(2, 0, 1).astype(np.float32) / 255.0


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write an (H, W) float mask in [0, 1] as a grayscale PNG."""
    if mask.ndim != 2:
        raise DimensionError(f"expected an (H, W) mask, got {mask.shape}")
    Image.fromarray(_to_bytes(mask), mode="L").save(Path(path), format="PNG")


def load_mask(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode in _SIXTEEN_BIT_MODES:
                raise ImageIOError(f"16-bit images are unsupported: {path}")
            gray = np.asarray(img.convert("L"))
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageIOError(f"cannot read mask {path}: {exc}") from exc
    return gray.astype(np.float32) / 255.0


def synth_background(images: list[np.ndarray]) -> np.ndarray:
    """Per-pixel mean over the frames of a scene (the averaging fallback)."""
    if not images:
        raise ValueError("cannot average an empty frame list")
    first = images[0].shape
    for img in images:
        if img.shape != first:
            raise DimensionError(f"frame extents differ: {img.shape} vs {first}")
    acc = np.zeros(first, np.float64)
    for img in images:
        acc += img
    return (acc / len(images)).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Recipe for one procedurally generated surveillance scene."""

    seed: int = 0
    size: int = 64
    frames: int = 12
    sprite_count: tuple[int, int] = (2, 4)
    sprite_size: tuple[int, int] = (12, 18)
    gamma_range: tuple[float, float] = (2.5, 4.0)
    night_gain: tuple[float, float] = (0.1, 0.3)
    flare_count: tuple[int, int] = (1, 3)
    flare_sigma: tuple[float, float] = (2.0, 5.0)
    flare_intensity: tuple[float, float] = (0.2, 0.6)
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("a scene needs at least a background frame and one sprite frame")
        # the sprite-fraction guarantee (1% to 20% of pixels) only holds on
        # this extent range given the fixed sprite-size window
        if self.size % 16 or not 32 <= self.size <= 80:
            raise ValueError(f"scene extent must be a multiple of 16 in [32, 80], got {self.size}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSceneSpec":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        for name in known & set(raw):
            if isinstance(raw[name], list):
                raw[name] = tuple(raw[name])
        return cls(**raw)


def _scene_background(spec: SyntheticSceneSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / (size - 1)
    lo = rng.uniform(0.25, 0.45, 3)
    hi = rng.uniform(0.55, 0.75, 3)
    angle = rng.uniform(0, 2 * math.pi)
    ramp = (xx * math.cos(angle) + yy * math.sin(angle) + 1.0) / 2.0
    bg = lo[:, None, None] + (hi - lo)[:, None, None] * ramp[None]
    for _ in range(int(rng.integers(3, 6))):
        h = int(rng.integers(size // 8, size // 3))
        w = int(rng.integers(size // 8, size // 3))
        r = int(rng.integers(0, size - h))
        c = int(rng.integers(0, size - w))
        color = rng.uniform(0.2, 0.8, 3).astype(np.float32)
        bg[:, r : r + h, c : c + w] = color[:, None, None]
    return np.clip(bg, 0.0, 1.0).astype(np.float32)


def _sprite_layer(spec: SyntheticSceneSpec, rng: np.random.Generator, frame: np.ndarray) -> np.ndarray:
    """Paint sprites into frame in place; returns the binary coverage mask."""
    size = spec.size
    budget = 0.20 * size * size
    mask = np.zeros((size, size), bool)
    count = int(rng.integers(spec.sprite_count[0], spec.sprite_count[1] + 1))
    for _ in range(count):
        side = int(rng.integers(spec.sprite_size[0], spec.sprite_size[1] + 1))
        r = int(rng.integers(0, size - side))
        c = int(rng.integers(0, size - side))
        grown = mask.copy()
        grown[r : r + side, c : c + side] = True
        if grown.sum() > budget:
            continue  # keep the foreground fraction under its cap
        mask = grown
        color = rng.uniform(0.75, 1.0, 3).astype(np.float32)
        color[int(rng.integers(0, 3))] *= rng.uniform(0.2, 0.5)  # saturated, not white
        frame[:, r : r + side, c : c + side] = color[:, None, None]
    return mask


def _night_transform(spec: SyntheticSceneSpec, rng: np.random.Generator, day: np.ndarray) -> np.ndarray:
    gamma = rng.uniform(*spec.gamma_range)
    gain = rng.uniform(*spec.night_gain)
    night = np.power(day, gamma, dtype=np.float64) * gain
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(int(rng.integers(spec.flare_count[0], spec.flare_count[1] + 1))):
        cy, cx = rng.uniform(0, size, 2)
        sigma = rng.uniform(*spec.flare_sigma)
        amp = rng.uniform(*spec.flare_intensity)
        blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
        night += blob[None]
    night += rng.normal(0.0, spec.noise_sigma, night.shape)
    return np.clip(night, 0.0, 1.0).astype(np.float32)


def generate_synthetic_scene(spec: SyntheticSceneSpec, root: str | Path) -> Path:
    """Write day/, night/, masks/ and scene.json under root; returns root.

    Frame 0 is sprite-free in both sets. Masks exist only for sprite frames,
    and mark sprite pixels exactly.
    """
    root = Path(root)
    for sub in ("day", "night", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    background = _scene_background(spec)
    sprite_rng = np.random.default_rng([spec.seed, 1])
    night_rng = np.random.default_rng([spec.seed, 2])
    for i in range(spec.frames):
        day = background.copy()
        if i > 0:
            mask = _sprite_layer(spec, sprite_rng, day)
            save_mask(root / "masks" / f"frame_{i:04d}.png", mask.astype(np.float32))
        night = _night_transform(spec, night_rng, day)
        save_image(root / "day" / f"frame_{i:04d}.png", day)
        save_image(root / "night" / f"frame_{i:04d}.png", night)
    (root / "scene.json").write_text(spec.to_json())
    return root


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SceneDataset:
    """A fixed-camera scene: unpaired night and day frames plus one reference."""

    root: Path
    night: list[np.ndarray]
    day: list[np.ndarray]
    background: np.ndarray
    night_names: list[str]
    day_names: list[str]

    @property
    def extents(self) -> tuple[int, int]:
        return self.night[0].shape[1], self.night[0].shape[2]


def load_scene(root: str | Path, synthesize_background: bool = True) -> SceneDataset:
    """Load night/ and day/ frames; background.png or the day-frame average.

    File order is lexicographic, so iteration is reproducible.
    """
    root = Path(root)
    frames: dict[str, tuple[list[np.ndarray], list[str]]] = {}
    for sub in ("night", "day"):
        folder = root / sub
        names = sorted(p.name for p in folder.glob("*") if p.suffix.lower() in (".png", ".ppm"))
        if not names:
            raise ValueError(f"no frames under {folder}")
        images = [load_image(folder / n) for n in names]
        first = images[0].shape
        for name, img in zip(names, images):
            if img.shape != first:
                raise DimensionError(f"{sub}/{name} extents {img.shape} differ from {first}")
        frames[sub] = (images, names)
    night, night_names = frames["night"]
    day, day_names = frames["day"]
    if night[0].shape != day[0].shape:
        raise DimensionError(f"night extents {night[0].shape} differ from day extents {day[0].shape}")
    bg_path = root / "background.png"
    if bg_path.exists():
        background = load_image(bg_path)
    elif synthesize_background:
        background = synth_background(day)
    else:
        raise ValueError(f"no background.png under {root} and synthesis is disabled")
    return SceneDataset(root, night, day, background, night_names, day_names)


def batch_indices(seed: int, step: int, batch_size: int, night_count: int, day_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Unpaired night/day draws for one step; a pure function of (seed, step)."""
    rng = np.random.default_rng([seed, 3, step])
    return rng.integers(0, night_count, batch_size), rng.integers(0, day_count, batch_size)


def batch_iterator(dataset: SceneDataset, batch_size: int, seed: int):
    """Endless deterministic stream of (night batch, day batch, reference).

    Batches are stacked (B, 3, H, W) arrays; the reference is constant.
    """
    step = 0
    ref = dataset.background
    while True:
        night_idx, day_idx = batch_indices(seed, step, batch_size, len(dataset.night), len(dataset.day))
        yield (
            np.stack([dataset.night[i] for i in night_idx]),
            np.stack([dataset.day[i] for i in day_idx]),
            ref,
        )
        step += 1
