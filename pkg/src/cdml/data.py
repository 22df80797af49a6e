"""Image samples, procedural pedestrian data and on-disk datasets.

Files on disk follow ``<identity>_<camera>_<index>.<png|ppm>``; labels come
from the name, so no manifest is needed. Pixels are held as float64
``3 x 128 x 64`` arrays in ``[0, 1]``.
"""

from __future__ import annotations

import colorsys
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

HEIGHT, WIDTH = 128, 64
IMAGE_SHAPE = (3, HEIGHT, WIDTH)
SPLITS = ("train", "val", "test")
_NAME = re.compile(r"^(\d+)_(\d+)_(\d+)\.(png|ppm)$", re.IGNORECASE)


class DatasetError(ValueError):
    pass


@dataclass
class ImageSample:
    pixels: np.ndarray
    identity: int
    camera: int
    index: int = 0
    occluded: bool = False

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != IMAGE_SHAPE:
            raise DatasetError(f"image must be {IMAGE_SHAPE}, got {self.pixels.shape}")

    @property
    def filename(self) -> str:
        return f"{self.identity:04d}_{self.camera}_{self.index:02d}.png"


@dataclass
class Dataset:
    samples: list[ImageSample]
    splits: dict[int, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> ImageSample:
        return self.samples[i]

    def identities(self) -> list[int]:
        return sorted({s.identity for s in self.samples})

    def cameras(self) -> list[int]:
        return sorted({s.camera for s in self.samples})

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)

    @property
    def camera_labels(self) -> np.ndarray:
        return np.array([s.camera for s in self.samples], dtype=np.int64)

    def pixel_array(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.samples]) if self.samples else np.zeros((0,) + IMAGE_SHAPE)

    def subset(self, split: str) -> "Dataset":
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        if not self.splits:
            raise DatasetError("dataset has no split assignment")
        keep = [s for s in self.samples if self.splits.get(s.identity) == split]
        return Dataset(keep, {i: t for i, t in self.splits.items() if t == split})

    def check_disjoint(self) -> None:
        # a dict keyed by identity cannot hold two tags; check coverage instead
        missing = {s.identity for s in self.samples} - set(self.splits)
        if self.splits and missing:
            raise DatasetError(f"identities without split tag: {sorted(missing)}")


def assign_splits(dataset: Dataset, test_ids: int, val_ids: int = 0, seed: int = 0) -> Dataset:
    """Tag identities (never single images) as train/val/test."""
    ids = dataset.identities()
    if test_ids + val_ids >= len(ids):
        raise DatasetError(
            f"{test_ids} test + {val_ids} val identities leave no training identities out of {len(ids)}"
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    splits = {}
    for rank, i in enumerate(order):
        tag = "test" if rank < test_ids else "val" if rank < test_ids + val_ids else "train"
        splits[ids[i]] = tag
    return Dataset(dataset.samples, splits)


# ---------------------------------------------------------------------------
# procedural data


@dataclass(frozen=True)
class SynthSpec:
    identities: int = 100
    per_camera: int = 3
    cameras: int = 2
    tint: float = 0.12
    noise: float = 0.02
    jitter: int = 3
    colour_jitter: float = 0.04
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError(f"outlier_fraction must lie in [0, 1], got {self.outlier_fraction}")
        if self.identities < 1 or self.per_camera < 1 or self.cameras < 1:
            raise ValueError("identity, image and camera counts must be positive")
        if min(self.jitter, self.tint, self.noise, self.colour_jitter) < 0:
            raise ValueError("jitter, tint and noise magnitudes must be non-negative")


# body parts as row ranges; each part has its own colour distribution
_PARTS = {"top": (8, 48), "middle": (48, 88), "bottom": (88, 124)}


def _hsv(h, s, v) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _part_colour(part: str, rng: np.random.Generator) -> np.ndarray:
    # top: warm hues, middle: blue-violet, bottom: light and desaturated
    if part == "top":
        return _hsv(rng.uniform(-0.05, 0.2), rng.uniform(0.5, 1.0), rng.uniform(0.45, 0.95))
    if part == "middle":
        return _hsv(rng.uniform(0.5, 0.85), rng.uniform(0.4, 1.0), rng.uniform(0.3, 0.9))
    return _hsv(rng.uniform(0.0, 1.0), rng.uniform(0.0, 0.45), rng.uniform(0.6, 1.0))


@dataclass
class _Look:
    colours: dict[str, np.ndarray]
    accent: np.ndarray
    accent_rows: tuple[int, int] | None
    half_width: int
    skin: np.ndarray


def _identity_look(rng: np.random.Generator) -> _Look:
    colours = {p: _part_colour(p, rng) for p in _PARTS}
    accent_rows = None
    if rng.random() < 0.5:
        lo = int(rng.integers(52, 76))
        accent_rows = (lo, lo + int(rng.integers(4, 10)))
    return _Look(
        colours=colours,
        accent=_part_colour("middle", rng) * 0.5 + 0.5 * rng.uniform(0, 1, 3),
        accent_rows=accent_rows,
        half_width=int(rng.integers(10, 16)),
        skin=_hsv(rng.uniform(0.02, 0.1), rng.uniform(0.2, 0.6), rng.uniform(0.5, 0.95)),
    )


def _perturbed(look: _Look, rng: np.random.Generator, amount: float) -> _Look:
    if not amount:
        return look
    shift = lambda c: np.clip(c + rng.normal(0.0, amount, 3), 0.0, 1.0)  # noqa: E731
    return _Look(
        colours={p: shift(c) for p, c in look.colours.items()},
        accent=shift(look.accent),
        accent_rows=look.accent_rows,
        half_width=look.half_width,
        skin=shift(look.skin),
    )


def _render(look: _Look, background: np.ndarray, dy: int, dx: int) -> np.ndarray:
    img = np.empty(IMAGE_SHAPE)
    img[:] = background[:, None, None]
    cx = WIDTH // 2 + dx
    x0, x1 = max(cx - look.half_width, 0), min(cx + look.half_width, WIDTH)

    def fill(r0, r1, c0, c1, colour):
        r0, r1 = max(r0 + dy, 0), min(r1 + dy, HEIGHT)
        c0, c1 = max(c0, 0), min(c1, WIDTH)
        if r0 < r1 and c0 < c1:
            img[:, r0:r1, c0:c1] = colour[:, None, None]

    fill(0, 10, cx - 5, cx + 5, look.skin)  # head
    for part, (r0, r1) in _PARTS.items():
        fill(r0, r1, x0, x1, look.colours[part])
    if look.accent_rows is not None:
        fill(look.accent_rows[0], look.accent_rows[1], x0, x1, look.accent)
    # the legs are split by a background gap
    fill(100, 124, cx - 1, cx + 1, background)
    return img


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Procedural two-camera pedestrian set, deterministic in ``spec.seed``.

    Identities differ by a colour per body part drawn from part-specific
    distributions. Cameras apply a fixed per-channel gain and background;
    each image gets translation jitter, a small random drift of every
    garment colour, and pixel noise. A share of every
    identity's images receives a large occluding rectangle.
    """
    rng = np.random.default_rng(spec.seed)
    cam_gain = 1.0 + spec.tint * rng.uniform(-1.0, 1.0, size=(spec.cameras, 3))
    cam_bg = np.clip(0.45 + 0.25 * rng.uniform(-1.0, 1.0, size=(spec.cameras, 3)), 0, 1)
    samples: list[ImageSample] = []
    n_per_id = spec.per_camera * spec.cameras
    n_occ = int(round(spec.outlier_fraction * n_per_id))
    for ident in range(spec.identities):
        look = _identity_look(rng)
        occluded = set(rng.choice(n_per_id, size=n_occ, replace=False).tolist()) if n_occ else set()
        for cam in range(spec.cameras):
            for k in range(spec.per_camera):
                slot = cam * spec.per_camera + k
                dy, dx = (rng.integers(-spec.jitter, spec.jitter + 1, size=2) if spec.jitter else (0, 0))
                img = _render(_perturbed(look, rng, spec.colour_jitter), cam_bg[cam], int(dy), int(dx))
                if slot in occluded:
                    h = int(rng.integers(36, 60))
                    r0 = int(rng.integers(16, HEIGHT - h - 4))
                    img[:, r0:r0 + h, :] = rng.uniform(0.0, 1.0, 3)[:, None, None]
                img = img * cam_gain[cam][:, None, None]
                if spec.noise:
                    img = img * (1.0 + spec.noise * rng.uniform(-1.0, 1.0))
                    img = img + rng.normal(0.0, spec.noise, size=IMAGE_SHAPE)
                samples.append(
                    ImageSample(np.clip(img, 0.0, 1.0), ident, cam, k, occluded=slot in occluded)
                )
    return Dataset(samples)


# ---------------------------------------------------------------------------
# disk I/O


def parse_name(name: str) -> tuple[int, int, int] | None:
    m = _NAME.match(name)
    if not m:
        return None
    return int(m.group(1)), int(m.group(2)), int(m.group(3))


def _decode(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (WIDTH, HEIGHT):
            im = im.resize((WIDTH, HEIGHT), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


@dataclass
class LoadReport:
    skipped: list[str] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)


def _try_decode(path: Path):
    try:
        return _decode(path), None
    except Exception as exc:  # noqa: BLE001 - any decoder failure is per-file
        return None, str(exc)


def load_dataset(root, report: LoadReport | None = None, workers: int = 1) -> Dataset:
    """Read every ``<identity>_<camera>_<index>`` image under ``root``.

    Badly named files are skipped with a warning; undecodable files are
    recorded in ``report.errors`` and loading continues. Provenance files
    (``*.cfg``) and dotfiles are ignored. Decoding runs on ``workers``
    threads; sample order is always the sorted file order.
    """
    root = Path(root)
    report = report if report is not None else LoadReport()
    files = sorted(p for p in root.iterdir() if p.is_file()) if root.is_dir() else []
    files = [p for p in files if not p.name.startswith(".") and p.suffix.lower() != ".cfg"]
    if not files:
        raise DatasetError(f"no files in {root}")
    named = []
    for path in files:
        labels = parse_name(path.name)
        if labels is None:
            report.skipped.append(path.name)
        else:
            named.append((path, labels))
    paths = [p for p, _ in named]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            decoded = list(pool.map(_try_decode, paths))
    else:
        decoded = [_try_decode(p) for p in paths]
    samples = []
    for (path, (ident, cam, idx)), (pixels, err) in zip(named, decoded):
        if err is not None:
            report.errors.append((path.name, err))
            continue
        samples.append(ImageSample(pixels, ident, cam, idx))
    if report.skipped:
        logger.warning("skipped %d badly named files: %s", len(report.skipped), report.skipped[:5])
    for name, msg in report.errors:
        logger.warning("could not decode %s: %s", name, msg)
    if not samples:
        raise DatasetError(f"no loadable images in {root}")
    return Dataset(samples)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.round(pixels.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def write_dataset(dataset: Dataset | Iterable[ImageSample], root, fmt: str = "png") -> list[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    samples = dataset.samples if isinstance(dataset, Dataset) else list(dataset)
    paths = []
    for s in samples:
        path = root / f"{s.identity:04d}_{s.camera}_{s.index:02d}.{fmt}"
        Image.fromarray(to_uint8(s.pixels), "RGB").save(path)
        paths.append(path)
    return paths
