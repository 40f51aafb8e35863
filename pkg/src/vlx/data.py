"""Synthetic shapes-with-captions corpus, prompt sets, and grayscale image I/O."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .model import UNK, ImageInput, split_words

SHAPES = ("circle", "square", "triangle", "cross")
LOCATIONS = ("upper left", "upper right", "lower left", "lower right", "center")
SIZE_WORDS = ("small", "large")
INTENSITY_WORDS = ("faint", "bright")
BACKGROUND_LEVEL = 0.2
NOISE_SIGMA = 0.05
CAPTION_TEMPLATE = "{size} {shape} at the {location}"


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class ShapeSpec:
    shape: str
    center: tuple[int, int]
    size: int
    intensity: float
    location: str
    size_word: str


@dataclass
class Sample:
    image: ImageInput
    caption: str
    class_id: int
    spec: ShapeSpec


@dataclass
class PromptSet:
    label: str
    prompts: list[str]

    def __post_init__(self):
        if not self.prompts:
            raise ValueError(f"prompt set {self.label!r} is empty")
        if len(set(self.prompts)) != len(self.prompts):
            raise ValueError(f"prompt set {self.label!r} has duplicate prompts")


@dataclass
class SynthConfig:
    image_side: int = 64
    classes: tuple[str, ...] = SHAPES
    min_size: int | None = None
    max_size: int | None = None

    def size_range(self) -> tuple[int, int]:
        a = self.image_side
        lo = self.min_size if self.min_size is not None else max(2, a // 5)
        hi = self.max_size if self.max_size is not None else (3 * a) // 8
        if hi >= a or lo > hi or lo < 1:
            raise ConfigError(f"shape sizes [{lo}, {hi}] cannot be placed in a {a}x{a} image")
        return lo, hi


def location_word(center: tuple[float, float], side: int) -> str:
    r, c = center
    mid = side / 2.0
    if max(abs(r - mid), abs(c - mid)) < side / 8.0:
        return "center"
    return ("upper" if r < mid else "lower") + " " + ("left" if c < mid else "right")


def size_word(size: int, side: int) -> str:
    return "large" if size >= side / 4.0 else "small"


def shape_mask(shape: str, center: tuple[float, float], size: int, side: int) -> np.ndarray:
    """Boolean support of a shape whose bounding box has side ``size``."""
    rr, cc = np.mgrid[0:side, 0:side] + 0.5
    r0, c0 = center
    half = size / 2.0
    dr, dc = rr - r0, cc - c0
    if shape == "circle":
        return dr * dr + dc * dc <= half * half
    if shape == "square":
        return (np.abs(dr) <= half) & (np.abs(dc) <= half)
    if shape == "triangle":
        # apex at top, base at bottom
        t = (dr + half) / size
        return (t >= 0) & (t <= 1) & (np.abs(dc) <= t * half)
    if shape == "cross":
        arm = size / 6.0
        inside = (np.abs(dr) <= half) & (np.abs(dc) <= half)
        return inside & ((np.abs(dr) <= arm) | (np.abs(dc) <= arm))
    raise ValueError(f"unknown shape {shape!r}")


def _place(rng: np.random.Generator, side: int, size: int, location: str) -> tuple[float, float]:
    half = size / 2.0
    lo, hi = half, side - half
    for _ in range(1000):
        center = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
        if location_word(center, side) == location:
            return center
    raise ConfigError(f"cannot place size {size} at {location} in a {side}x{side} image")


def render_caption(spec: ShapeSpec) -> str:
    return CAPTION_TEMPLATE.format(size=spec.size_word, shape=spec.shape, location=spec.location)


def paint(specs: Sequence[ShapeSpec], side: int, rng: np.random.Generator) -> tuple[np.ndarray, list[np.ndarray]]:
    pixels = BACKGROUND_LEVEL + NOISE_SIGMA * rng.standard_normal((side, side))
    masks = []
    for spec in specs:
        m = shape_mask(spec.shape, spec.center, spec.size, side)
        pixels[m] = spec.intensity + NOISE_SIGMA * rng.standard_normal(int(m.sum()))
        masks.append(m)
    return np.clip(pixels, 0.0, 1.0), masks


def random_spec(rng: np.random.Generator, config: SynthConfig, shape: str | None = None,
                location: str | None = None) -> ShapeSpec:
    lo, hi = config.size_range()
    side = config.image_side
    shape = shape or config.classes[int(rng.integers(len(config.classes)))]
    size = int(rng.integers(lo, hi + 1))
    location = location or LOCATIONS[int(rng.integers(len(LOCATIONS)))]
    center = _place(rng, side, size, location)
    intensity = float(rng.uniform(0.6, 1.0))
    return ShapeSpec(shape, center, size, intensity, location, size_word(size, side))


def make_sample(index: int, config: SynthConfig, seed: int) -> Sample:
    rng = np.random.default_rng([seed, index])
    spec = random_spec(rng, config)
    pixels, (mask,) = paint([spec], config.image_side, rng)
    cid = config.classes.index(spec.shape)
    image = ImageInput(pixels, object_mask=mask, class_id=cid, image_id=f"img_{index:05d}")
    return Sample(image, render_caption(spec), cid, spec)


def generate_dataset(n: int, config: SynthConfig | None = None, seed: int = 0) -> tuple[list[Sample], list[str]]:
    """``n`` samples (each from its own index-derived RNG stream) plus the vocabulary."""
    if n < 1:
        raise ValueError("n must be >= 1")
    config = config or SynthConfig()
    config.size_range()
    samples = [make_sample(i, config, seed) for i in range(n)]
    return samples, build_vocab(config.classes)


def build_vocab(classes: Sequence[str] = SHAPES) -> list[str]:
    """UNK followed by every word the captions and prompt templates can produce."""
    words = set(classes)
    for t in _TEMPLATES:
        words.update(split_words(t.replace("{shape}", "")
                                 .replace("{size}", " ".join(SIZE_WORDS))
                                 .replace("{location}", " ".join(LOCATIONS))
                                 .replace("{intensity}", " ".join(INTENSITY_WORDS))))
    words.update(split_words(CAPTION_TEMPLATE.format(size="", shape="", location="")))
    words.update(split_words(" ".join(LOCATIONS + SIZE_WORDS + INTENSITY_WORDS)))
    return [UNK] + sorted(words)


def composite(rng: np.random.Generator, config: SynthConfig, shape_a: str, shape_b: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Image with two shapes in distinct corner quadrants; returns (pixels, mask_a, mask_b)."""
    corners = [loc for loc in LOCATIONS if loc != "center"]
    ia, ib = rng.choice(len(corners), size=2, replace=False)
    spec_a = random_spec(rng, config, shape_a, corners[ia])
    spec_b = random_spec(rng, config, shape_b, corners[ib])
    pixels, (ma, mb) = paint([spec_a, spec_b], config.image_side, rng)
    ma = ma & ~mb
    return pixels, ma, mb


# ---------------------------------------------------------------- prompt sets

_TEMPLATES = (
    "{size} {shape} at the {location}",
    "{intensity} {size} {shape} at the {location}",
    "a {intensity} {shape} at the {location}",
    "a {size} {shape}",
    "a {intensity} {shape}",
)


def _template_pool(shape: str) -> list[str]:
    pool = []
    for t in _TEMPLATES:
        for size in SIZE_WORDS:
            for loc in LOCATIONS:
                for inten in INTENSITY_WORDS:
                    pool.append(t.format(shape=shape, size=size, location=loc, intensity=inten))
    return list(dict.fromkeys(pool))


def canonical_prompt(shape: str) -> str:
    return f"a {shape}"


def build_prompt_sets(classes: Sequence[str] = SHAPES, k_prompts: int = 10, seed: int = 0,
                      pool_limit: int | None = None) -> list[PromptSet]:
    """``k_prompts`` distinct descriptive prompts per class.

    The first prompt is always the canonical sentence; the rest are drawn
    without replacement from templates varying size, location and intensity.
    """
    if not classes:
        raise ValueError("classes must be non-empty")
    # Every class gets the same template fillings so that classes differ
    # only in the shape word.
    pools = [[p for p in _template_pool(shape) if p != canonical_prompt(shape)] for shape in classes]
    n_rest = len(pools[0]) if pool_limit is None else min(len(pools[0]), max(0, pool_limit - 1))
    if k_prompts < 1 or k_prompts > n_rest + 1:
        raise ValueError(f"template pool of {n_rest + 1} cannot supply {k_prompts} prompts")
    picks = sorted(np.random.default_rng(seed).choice(n_rest, size=k_prompts - 1, replace=False))
    return [PromptSet(shape, [canonical_prompt(shape)] + [pool[i] for i in picks])
            for shape, pool in zip(classes, pools)]


def label_prompt_sets(classes: Sequence[str] = SHAPES) -> list[PromptSet]:
    """One-word prompt sets holding only the bare class label."""
    return [PromptSet(c, [c]) for c in classes]


def save_prompt_sets(sets: Sequence[PromptSet], path) -> None:
    Path(path).write_text(json.dumps([asdict(s) for s in sets], indent=2))


def load_prompt_sets(path) -> list[PromptSet]:
    return [PromptSet(d["label"], list(d["prompts"])) for d in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------- image I/O


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    data = pixels if pixels.dtype == np.uint8 else to_bytes(pixels)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    vals, pos = [], 2
    while len(vals) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PGM header")
        vals.append(int(buf[start:pos]))
    return vals, pos + 1


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: unsupported PGM variant {buf[:2]!r} (need binary P5)")
    (w, h, maxval), offset = _pgm_tokens(buf, 3)
    if maxval != 255:
        raise FormatError(f"{path}: unsupported bit depth (maxval {maxval}, need 255)")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=offset)
    return data.reshape(h, w)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.format != "PNG":
            raise FormatError(f"{path}: not a PNG file")
        if im.mode != "L":
            raise FormatError(f"{path}: unsupported PNG mode {im.mode!r} (need 8-bit grayscale)")
        return np.asarray(im, dtype=np.uint8)


def write_png(path, pixels: np.ndarray) -> None:
    """Write an 8-bit grayscale (H, W) or RGB (H, W, 3) array."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = to_bytes(arr)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def resize_nearest(arr: np.ndarray, side: int) -> np.ndarray:
    h, w = arr.shape
    rows = (np.arange(side) * h) // side
    cols = (np.arange(side) * w) // side
    return arr[np.ix_(rows, cols)]


def load_image(path, target_side: int | None = None) -> ImageInput:
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        raw = read_pgm(path)
    elif suffix == ".png":
        raw = read_png(path)
    else:
        raise FormatError(f"{path}: unsupported image format {suffix or '(none)'!r}")
    if target_side is not None and raw.shape != (target_side, target_side):
        raw = resize_nearest(raw, target_side)
    return ImageInput(raw.astype(np.float64) / 255.0, image_id=Path(path).stem)


# ---------------------------------------------------------------- corpus dir


def save_corpus(samples: Sequence[Sample], vocab: Sequence[str], out_dir, config: SynthConfig, seed: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        write_pgm(out / f"img_{i:05d}.pgm", s.image.pixels)
        write_pgm(out / f"mask_{i:05d}.pgm", s.image.object_mask.astype(np.uint8) * 255)
        entries.append({
            "index": i,
            "image": f"img_{i:05d}.pgm",
            "mask": f"mask_{i:05d}.pgm",
            "caption": s.caption,
            "class_id": s.class_id,
            "spec": asdict(s.spec),
        })
    manifest = {
        "image_side": config.image_side,
        "classes": list(config.classes),
        "seed": seed,
        "vocab": list(vocab),
        "samples": entries,
    }
    tmp = out / "corpus.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp, out / "corpus.json")


def load_corpus(corpus_dir) -> tuple[list[Sample], list[str], dict]:
    """Samples read back from disk (pixels are the 8-bit quantized PGM values)."""
    root = Path(corpus_dir)
    manifest = json.loads((root / "corpus.json").read_text())
    samples = []
    for e in manifest["samples"]:
        pixels = read_pgm(root / e["image"]).astype(np.float64) / 255.0
        mask = read_pgm(root / e["mask"]) > 127
        spec = e["spec"]
        spec = ShapeSpec(spec["shape"], tuple(spec["center"]), spec["size"], spec["intensity"],
                         spec["location"], spec["size_word"])
        img = ImageInput(pixels, object_mask=mask, class_id=e["class_id"], image_id=Path(e["image"]).stem)
        samples.append(Sample(img, e["caption"], e["class_id"], spec))
    return samples, list(manifest["vocab"]), manifest
