"""Embedding-space explanation fusion.

A :class:`MapStack` holds one attribution map per image-embedding dimension.
Fusing it with a text embedding weights map ``i`` by ``tau * T_p[i]`` and
sums, which yields a prompt-specific explanation without touching the image
encoder again. Stacks are cached per (image, method, params, model).
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attribution import (
    AllEmbeddingDims,
    AttributionMap,
    ClassProbability,
    MethodSpec,
    attribute_all,
    resolve_target,
)
from .model import DualEncoderModel, ImageInput, encode_text
from .tensor import DimensionError

STACK_MAGIC = b"VLXS"
STACK_VERSION = 1


class StaleStackError(ValueError):
    """The stack was built under a different model checkpoint."""


class StackFormatError(ValueError):
    pass


@dataclass
class MapStack:
    maps: np.ndarray  # (M, A, A)
    method: MethodSpec
    image_id: str
    fingerprint: bytes

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 3 or self.maps.shape[1] != self.maps.shape[2]:
            raise DimensionError(f"stack must be (M, A, A), got {self.maps.shape}")
        if not np.all(np.isfinite(self.maps)):
            raise ValueError("stack contains non-finite values")
        if len(self.fingerprint) != 32:
            raise ValueError("model fingerprint must be 32 bytes")

    @property
    def m(self) -> int:
        return self.maps.shape[0]

    @property
    def side(self) -> int:
        return self.maps.shape[1]


@dataclass
class FusedMap:
    values: np.ndarray
    prompt: str | None
    text_embedding: np.ndarray
    tau: float
    method: MethodSpec
    image_id: str

    def to_json(self) -> dict:
        return {
            "prompt": self.prompt,
            "tau": self.tau,
            "a": int(self.values.shape[0]),
            "values": [float(v) for v in self.values.reshape(-1)],
            "method": self.method.name,
            "params": self.method.params,
            "image_id": self.image_id,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def fused_from_json(d: dict) -> FusedMap:
    a = int(d["a"])
    values = np.array(d["values"], dtype=np.float64).reshape(a, a)
    return FusedMap(values, d["prompt"], np.array([]), float(d["tau"]),
                    MethodSpec(d["method"], d["params"]), d["image_id"])


# ---------------------------------------------------------------- operations


def _pixels(img) -> tuple[np.ndarray, str]:
    if isinstance(img, ImageInput):
        return img.pixels, img.id
    x = np.asarray(img, dtype=np.float64)
    return x, hashlib.sha256(x.tobytes()).hexdigest()[:16]


def per_dimension_maps(model: DualEncoderModel, img, method: MethodSpec) -> MapStack:
    """Attribute every embedding dimension of ``img`` in one sweep."""
    x, image_id = _pixels(img)
    fn, k = resolve_target(model, AllEmbeddingDims(), x)
    try:
        maps = attribute_all(fn, k, x, method)
    except Exception as exc:
        raise type(exc)(f"{exc} (while attributing embedding dimensions 0..{k - 1})") from exc
    bad = [i for i in range(k) if not np.all(np.isfinite(maps[i]))]
    if bad:
        raise ValueError(f"non-finite attribution for embedding dimension {bad[0]}")
    return MapStack(maps, method, image_id, model.fingerprint())


def fuse(stack: MapStack, text_embedding, tau: float, *, fingerprint: bytes | None = None,
         prompt: str | None = None) -> FusedMap:
    """``sum_i tau * T_p[i] * maps[i]``, accumulated in ascending ``i``."""
    t = np.asarray(text_embedding, dtype=np.float64).reshape(-1)
    if t.shape[0] != stack.m:
        raise DimensionError(f"text embedding length {t.shape[0]} != stack depth {stack.m}")
    if fingerprint is not None and fingerprint != stack.fingerprint:
        raise StaleStackError("stack was built with a different model checkpoint")
    out = np.zeros(stack.maps.shape[1:])
    for i in range(stack.m):
        out += (tau * t[i]) * stack.maps[i]
    return FusedMap(out, prompt, t.copy(), float(tau), stack.method, stack.image_id)


def explain_conventional(model: DualEncoderModel, img, prompt_sets, k: int, method: MethodSpec) -> AttributionMap:
    """Attribution of the prompt classifier's post-softmax class probability."""
    x, image_id = _pixels(img)
    target = ClassProbability(k, prompt_sets)
    fn, n_out = resolve_target(model, target, x)
    maps = attribute_all(fn, n_out, x, method)
    return AttributionMap(maps[0], method.name, target.describe(), image_id, dict(method.params))


# --------------------------------------------------------------------- cache


def stack_key(img, method: MethodSpec, fingerprint: bytes) -> str:
    x, _ = _pixels(img)
    h = hashlib.sha256()
    h.update(hashlib.sha256(np.ascontiguousarray(x).tobytes()).digest())
    h.update(method.canonical().encode())
    h.update(fingerprint)
    return h.hexdigest()


def default_cache_dir() -> Path:
    env = os.environ.get("VLX_CACHE_DIR")
    return Path(env) if env else Path.home() / ".cache" / "vlx"


class StackCache:
    """In-memory stack cache with optional write-through to a directory.

    ``hits``/``misses`` count lookups; ``builds`` counts encoder-gradient
    sweeps actually performed.
    """

    def __init__(self, directory: str | os.PathLike | None = None):
        self.directory = Path(directory) if directory is not None else None
        self._mem: dict[str, MapStack] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.builds = 0

    def _path(self, key: str) -> Path | None:
        return self.directory / f"{key}.vlxs" if self.directory is not None else None

    def get(self, key: str) -> MapStack | None:
        with self._lock:
            stack = self._mem.get(key)
        if stack is None and self.directory is not None:
            path = self._path(key)
            if path.exists():
                stack = read_stack(path)
                with self._lock:
                    self._mem[key] = stack
        return stack

    def put(self, key: str, stack: MapStack) -> None:
        with self._lock:
            self._mem[key] = stack
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            path = self._path(key)
            tmp = path.with_suffix(f".tmp{os.getpid()}_{threading.get_ident()}")
            write_stack(stack, tmp)
            os.replace(tmp, path)

    def get_or_build(self, model: DualEncoderModel, img, method: MethodSpec) -> tuple[MapStack, bool]:
        key = stack_key(img, method, model.fingerprint())
        stack = self.get(key)
        if stack is not None:
            self.hits += 1
            return stack, True
        self.misses += 1
        stack = per_dimension_maps(model, img, method)
        self.builds += 1
        self.put(key, stack)
        return stack, False


def explain_fused(model: DualEncoderModel, img, prompt: str, method: MethodSpec,
                  cache: StackCache | None = None) -> FusedMap:
    """Tokenize, encode the prompt, fetch or build the stack, fuse."""
    t = encode_text(model, prompt)
    if cache is None:
        stack = per_dimension_maps(model, img, method)
    else:
        stack, _ = cache.get_or_build(model, img, method)
    return fuse(stack, t, model.temperature, fingerprint=model.fingerprint(), prompt=prompt)


# ------------------------------------------------------------------ file I/O


def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<I", len(b)) + b


def write_stack(stack: MapStack, path_or_fh) -> None:
    meta = json.dumps({"params": stack.method.params, "image_id": stack.image_id}, sort_keys=True)
    payload = [
        STACK_MAGIC,
        struct.pack("<III", STACK_VERSION, stack.m, stack.side),
        _pack_str(stack.method.name),
        _pack_str(meta),
        stack.fingerprint,
        np.ascontiguousarray(stack.maps, dtype="<f8").tobytes(),
    ]
    if isinstance(path_or_fh, (str, os.PathLike)):
        with open(path_or_fh, "wb") as fh:
            fh.write(b"".join(payload))
    else:
        path_or_fh.write(b"".join(payload))


def read_stack(path_or_fh) -> MapStack:
    if isinstance(path_or_fh, (str, os.PathLike)):
        buf = Path(path_or_fh).read_bytes()
    else:
        buf = path_or_fh.read()
    fh = io.BytesIO(buf)

    def take(n):
        b = fh.read(n)
        if len(b) != n:
            raise StackFormatError("truncated stack file")
        return b

    if take(4) != STACK_MAGIC:
        raise StackFormatError("not a VLXS stack file")
    version, m, a = struct.unpack("<III", take(12))
    if version != STACK_VERSION:
        raise StackFormatError(f"unsupported stack version {version}")
    (n,) = struct.unpack("<I", take(4))
    name = take(n).decode()
    (n,) = struct.unpack("<I", take(4))
    meta = json.loads(take(n))
    fingerprint = take(32)
    maps = np.frombuffer(take(8 * m * a * a), dtype="<f8").reshape(m, a, a).astype(np.float64)
    return MapStack(maps, MethodSpec(name, meta["params"]), meta["image_id"], fingerprint)
