"""Synthetic RGB + depth scenes, flip augmentation and dataset directories.

Scenes are a far background plane plus axis-aligned rectangles at random
depths, painted far-to-near.  Each region is shaded with a brightness that
falls off linearly with depth plus a small per-region colour tint, so depth
is recoverable from appearance.
"""

import os
from dataclasses import dataclass
from typing import Iterator, List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import FormatError, ParameterError

MASK64 = (1 << 64) - 1


class XorShift64Star:
    """xorshift64* generator (shifts 12/25/27, multiplier 0x2545F4914F6CDD1D).

    The seed is expanded with one splitmix64 round so that seed 0 is usable.
    """

    MULTIPLIER = 0x2545F4914F6CDD1D

    def __init__(self, seed: int):
        z = (int(seed) + 0x9E3779B97F4A7C15) & MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        z ^= z >> 31
        self.state = z or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * self.MULTIPLIER) & MASK64

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi)."""
        return lo + int(self.random() * (hi - lo))

    def permutation(self, n: int) -> List[int]:
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 32
    width: int = 32
    n_shapes: int = 4
    depth_max: float = 80.0

    def __post_init__(self):
        if self.height % 16 or self.width % 16 or self.height < 16 or self.width < 16:
            raise ParameterError(f"scene size {self.height}x{self.width} must be a multiple of 16")
        if self.n_shapes < 0:
            raise ParameterError("n_shapes must be nonnegative")
        if not self.depth_max > 0:
            raise ParameterError("depth_max must be positive")


@dataclass
class DepthSample:
    image: np.ndarray   # (H, W, 3) float32 in [0, 1], quantised to 1/255 steps
    depth: np.ndarray   # (H, W) float32 in (0, depth_max]
    id: str = ""


class Rect(NamedTuple):
    y0: int
    y1: int
    x0: int
    x1: int
    depth: float
    tint: tuple


def quantize_unit(values) -> np.ndarray:
    """Snap [0, 1] values to the 8-bit grid used by the PPM format."""
    q = np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    return q.astype(np.float32) / np.float32(255.0)


def shade(depth: float, depth_max: float) -> float:
    return 1.0 - 0.85 * depth / depth_max


def _tint(rng: XorShift64Star) -> tuple:
    return tuple(rng.uniform(-0.08, 0.08) for _ in range(3))


def scene_layout(spec: SceneSpec):
    """Background tint and the rectangles of a scene, in draw order."""
    rng = XorShift64Star(spec.seed)
    background = _tint(rng)
    h, w = spec.height, spec.width
    rects = []
    for _ in range(spec.n_shapes):
        rh = rng.integers(max(2, h // 8), h // 2 + 1)
        rw = rng.integers(max(2, w // 8), w // 2 + 1)
        y0 = rng.integers(0, h - rh + 1)
        x0 = rng.integers(0, w - rw + 1)
        depth = spec.depth_max * rng.uniform(0.1, 1.0)
        rects.append(Rect(y0, y0 + rh, x0, x0 + rw, depth, _tint(rng)))
    # painter's algorithm: far first so nearer rectangles overwrite
    rects.sort(key=lambda r: -r.depth)
    return background, rects


def synth_scene(spec: SceneSpec, sample_id: Optional[str] = None) -> DepthSample:
    background, rects = scene_layout(spec)
    h, w = spec.height, spec.width
    depth = np.full((h, w), spec.depth_max, dtype=np.float64)
    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = shade(spec.depth_max, spec.depth_max) + np.asarray(background)
    for r in rects:
        depth[r.y0:r.y1, r.x0:r.x1] = r.depth
        image[r.y0:r.y1, r.x0:r.x1] = shade(r.depth, spec.depth_max) + np.asarray(r.tint)
    return DepthSample(quantize_unit(image), depth.astype(np.float32),
                       sample_id if sample_id is not None else f"scene_{spec.seed:06d}")


def synth_dataset(n: int, seed: int = 0, height: int = 32, width: int = 32, n_shapes: int = 4,
                  depth_max: float = 80.0) -> List[DepthSample]:
    """``n`` scenes with per-sample seeds ``seed + index``."""
    return [synth_scene(SceneSpec(seed + i, height, width, n_shapes, depth_max)) for i in range(n)]


def augment_flip(sample: DepthSample, zeta: float, eta: float, rng: XorShift64Star) -> DepthSample:
    """Vertical flip with probability zeta, horizontal with probability eta.

    Two draws are consumed per call regardless of outcome.
    """
    if not (0.0 <= zeta <= 1.0 and 0.0 <= eta <= 1.0):
        raise ParameterError("flip probabilities must lie in [0, 1]")
    vflip = rng.random() < zeta
    hflip = rng.random() < eta
    image, depth = sample.image, sample.depth
    if vflip:
        image, depth = image[::-1], depth[::-1]
    if hflip:
        image, depth = image[:, ::-1], depth[:, ::-1]
    if not (vflip or hflip):
        return sample
    return DepthSample(np.ascontiguousarray(image), np.ascontiguousarray(depth), sample.id)


# ---------------------------------------------------------------------------
# dataset directories: <root>/<id>.ppm + <root>/<id>.pfm, plus manifest.txt

MANIFEST = "manifest.txt"


def write_dataset(root: str, samples: Sequence[DepthSample]) -> List[str]:
    from .fileio import write_pfm, write_ppm

    os.makedirs(root, exist_ok=True)
    ids = []
    for s in samples:
        write_ppm(os.path.join(root, s.id + ".ppm"), s.image)
        write_pfm(os.path.join(root, s.id + ".pfm"), s.depth)
        ids.append(s.id)
    with open(os.path.join(root, MANIFEST), "w") as fh:
        fh.write("\n".join(ids) + "\n")
    return ids


def dataset_ids(root: str) -> List[str]:
    manifest = os.path.join(root, MANIFEST)
    if os.path.exists(manifest):
        with open(manifest) as fh:
            return [line.strip() for line in fh if line.strip()]
    return sorted(name[:-4] for name in os.listdir(root)
                  if name.endswith(".ppm") and os.path.exists(os.path.join(root, name[:-4] + ".pfm")))


def iter_dataset(root: str) -> Iterator[DepthSample]:
    from .fileio import read_pfm, read_ppm

    for sid in dataset_ids(root):
        ppm, pfm = os.path.join(root, sid + ".ppm"), os.path.join(root, sid + ".pfm")
        if not (os.path.exists(ppm) and os.path.exists(pfm)):
            raise FormatError(f"dataset entry {sid!r} is missing its .ppm or .pfm file")
        yield DepthSample(read_ppm(ppm), read_pfm(pfm), sid)


def read_dataset(root: str) -> List[DepthSample]:
    return list(iter_dataset(root))
