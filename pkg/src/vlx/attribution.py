"""Pixel attribution for scalar functions of an image.

Four methods: raw gradient (saliency), occlusion, integrated gradients and
gradient-SHAP (expected gradients over sampled baselines). Every method is
implemented once for *vector-valued* targets with ``K`` outputs and returns
``K`` maps; a target with ``K = 1`` gives the ordinary single map. Gradients
for all ``K`` outputs come from one backward pass over ``K`` stacked copies of
each evaluation point, so the stochastic choices (baselines, interpolation
points, windows) are shared across outputs by construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import tensor as tn
from .model import DualEncoderModel, ImageInput, prompt_text_matrix
from .tensor import Tensor

# upper bound on images per forward batch
MAX_BATCH = 256


class ParameterError(ValueError):
    pass


# ------------------------------------------------------------------- baselines


@dataclass(frozen=True)
class Constant:
    value: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ParameterError(f"constant baseline {self.value} outside [0, 1]")

    def materialize(self, shape) -> np.ndarray:
        return np.full(shape, float(self.value))

    def to_dict(self) -> dict:
        return {"kind": "constant", "value": float(self.value)}


@dataclass(frozen=True)
class Noise:
    mean: float = 0.0
    std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.std < 0:
            raise ParameterError(f"noise std must be >= 0, got {self.std}")

    def materialize(self, shape) -> np.ndarray:
        return self.mean + self.std * philox(self.seed).standard_normal(shape)

    def to_dict(self) -> dict:
        return {"kind": "noise", "mean": float(self.mean), "std": float(self.std), "seed": int(self.seed)}


@dataclass(frozen=True)
class DatasetMean:
    """Corpus mean pixel value (a scalar statistic of the training data)."""

    value: float

    def materialize(self, shape) -> np.ndarray:
        return np.full(shape, float(self.value))

    def to_dict(self) -> dict:
        return {"kind": "dataset_mean", "value": float(self.value)}


BaselineSpec = Constant | Noise | DatasetMean


def baseline_from_dict(d: dict) -> BaselineSpec:
    kind = d.get("kind")
    if kind == "constant":
        return Constant(d["value"])
    if kind == "noise":
        return Noise(d["mean"], d["std"], d.get("seed", 0))
    if kind == "dataset_mean":
        return DatasetMean(d["value"])
    raise ParameterError(f"unknown baseline kind {kind!r}")


def philox(key: int) -> np.random.Generator:
    """Counter-based generator keyed directly by ``key``."""
    return np.random.Generator(np.random.Philox(key=int(key) & (2**64 - 1)))


# --------------------------------------------------------------------- targets

TargetFn = Callable[[Tensor], Tensor]


@dataclass(frozen=True, eq=False)
class EmbeddingDim:
    index: int

    def describe(self) -> str:
        return f"embedding_dim[{self.index}]"

    def bind(self, model: DualEncoderModel) -> tuple[TargetFn, int]:
        m = model.config.embed_dim
        if not 0 <= self.index < m:
            raise ParameterError(f"embedding index {self.index} out of range for M={m}")
        sel = np.zeros((m, 1))
        sel[self.index, 0] = 1.0
        sel_t = Tensor(sel)
        return (lambda x: tn.matmul(model.image_embeddings(x), sel_t)), 1


@dataclass(frozen=True, eq=False)
class AllEmbeddingDims:
    """Every component of the image embedding at once (K = M)."""

    def describe(self) -> str:
        return "embedding_dims[all]"

    def bind(self, model: DualEncoderModel) -> tuple[TargetFn, int]:
        return model.image_embeddings, model.config.embed_dim


@dataclass(frozen=True, eq=False)
class SimilarityLogit:
    """``tau * <I_p, T_p>`` for a fixed text embedding."""

    text_embedding: np.ndarray

    def describe(self) -> str:
        return "similarity_logit"

    def bind(self, model: DualEncoderModel) -> tuple[TargetFn, int]:
        t = np.asarray(self.text_embedding, dtype=np.float64).reshape(-1, 1)
        if t.shape[0] != model.config.embed_dim:
            raise tn.DimensionError(f"text embedding length {t.shape[0]} != M={model.config.embed_dim}")
        w = Tensor(model.temperature * t)
        return (lambda x: tn.matmul(model.image_embeddings(x), w)), 1


@dataclass(frozen=True, eq=False)
class ClassProbability:
    """Post-softmax probability of class ``k`` under the prompt classifier."""

    k: int
    prompt_sets: Sequence[Any]

    def describe(self) -> str:
        return f"class_probability[{self.k}]"

    def bind(self, model: DualEncoderModel) -> tuple[TargetFn, int]:
        n = len(self.prompt_sets)
        if not 0 <= self.k < n:
            raise ParameterError(f"class index {self.k} out of range for {n} classes")
        cls = Tensor(prompt_text_matrix(model, self.prompt_sets))
        sel = np.zeros((n, 1))
        sel[self.k, 0] = 1.0
        sel_t = Tensor(sel)

        def fn(x):
            probs = tn.softmax_rows(tn.matmul(model.image_embeddings(x), cls))
            return tn.matmul(probs, sel_t)

        return fn, 1


def resolve_target(model, target, x: np.ndarray) -> tuple[TargetFn, int]:
    """Normalize a target (ScalarTarget or plain callable) to ``(fn, K)``.

    A callable maps a (B, H, W) tensor to (B,) or (B, K) outputs.
    """
    if hasattr(target, "bind"):
        return target.bind(model)
    if not callable(target):
        raise TypeError(f"unsupported target {target!r}")

    def fn(xb):
        out = target(xb)
        return tn.reshape(out, (xb.shape[0], -1)) if out.data.ndim != 2 else out

    probe = fn(Tensor._wrap(x[None].copy(), False))
    return fn, probe.shape[1]


def _describe(target) -> str:
    return target.describe() if hasattr(target, "describe") else getattr(target, "__name__", "callable")


# ------------------------------------------------------------------ core maths


def _gradient_chunks(fn: TargetFn, k: int, points: np.ndarray):
    """Yield ``(start, G)`` with ``G[s, j] = d fn(point_s)[j] / d pixels``.

    Points are processed in index order in chunks of at most ``MAX_BATCH``
    stacked images.
    """
    n = points.shape[0]
    per = max(1, MAX_BATCH // k)
    shape = points.shape[1:]
    for start in range(0, n, per):
        chunk = points[start:start + per]
        s = chunk.shape[0]
        tn.new_tape()
        x = Tensor(np.repeat(chunk, k, axis=0), requires_grad=True)
        out = fn(x)
        if out.shape != (s * k, k):
            raise tn.DimensionError(f"target returned shape {out.shape}, expected {(s * k, k)}")
        sel = Tensor(np.tile(np.eye(k), (s, 1)))
        tn.backward(tn.total(tn.mul(out, sel)))
        g = x.grad if x.grad is not None else np.zeros_like(x.data)
        yield start, g.reshape((s, k) + shape)


def saliency_maps(fn: TargetFn, k: int, x: np.ndarray) -> np.ndarray:
    (_, g), = _gradient_chunks(fn, k, x[None])
    return g[0]


def ig_maps(fn: TargetFn, k: int, x: np.ndarray, baseline: np.ndarray, steps: int) -> np.ndarray:
    """Midpoint-rule integrated gradients, (K, H, W)."""
    if steps < 2:
        raise ParameterError(f"integrated gradients needs steps >= 2, got {steps}")
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    diff = x - baseline
    points = baseline[None] + alphas[:, None, None] * diff[None]
    acc = np.zeros((k,) + x.shape)
    for _, g in _gradient_chunks(fn, k, points):
        for s in range(g.shape[0]):
            acc += g[s]
    return diff[None] * (acc / steps)


def shap_draws(x: np.ndarray, mean: float, std: float, n_samples: int, seed: int,
               fixed_alpha: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Baselines (n, H, W) and interpolation weights (n,); sample j uses key ``seed ^ j``."""
    bs, alphas = [], []
    for j in range(n_samples):
        rng = philox(seed ^ j)
        bs.append(mean + std * rng.standard_normal(x.shape))
        a = rng.uniform(0.0, 1.0)
        alphas.append(a if fixed_alpha is None else fixed_alpha)
    return np.stack(bs), np.array(alphas)


def gradshap_maps(fn: TargetFn, k: int, x: np.ndarray, mean: float, std: float, n_samples: int,
                  seed: int, fixed_alpha: float | None = None) -> np.ndarray:
    if n_samples < 1:
        raise ParameterError(f"gradient-SHAP needs n_samples >= 1, got {n_samples}")
    if std < 0:
        raise ParameterError(f"baseline std must be >= 0, got {std}")
    bs, alphas = shap_draws(x, mean, std, n_samples, seed, fixed_alpha)
    diffs = x[None] - bs
    points = bs + alphas[:, None, None] * diffs
    acc = np.zeros((k,) + x.shape)
    for start, g in _gradient_chunks(fn, k, points):
        for s in range(g.shape[0]):
            acc += diffs[start + s][None] * g[s]
    return acc / n_samples


def window_starts(side: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, side - window + 1, stride))
    if starts[-1] != side - window:
        starts.append(side - window)
    return starts


def occlusion_windows(shape, window: int, stride: int) -> list[tuple[int, int]]:
    h, w = shape
    if window < 1 or window > min(h, w):
        raise ParameterError(f"window {window} must lie in [1, {min(h, w)}]")
    if stride < 1 or stride > window:
        raise ParameterError(f"stride {stride} must lie in [1, window={window}]")
    return [(r, c) for r in window_starts(h, window, stride) for c in window_starts(w, window, stride)]


def _forward_values(fn: TargetFn, images: np.ndarray) -> np.ndarray:
    outs = []
    for start in range(0, images.shape[0], MAX_BATCH):
        outs.append(fn(Tensor._wrap(images[start:start + MAX_BATCH], False)).data)
    return np.concatenate(outs, axis=0)


def occlusion_deltas(fn: TargetFn, x: np.ndarray, window: int, stride: int, fill: float
                     ) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Window origins and ``f(x) - f(x occluded)`` per window, shape (n_windows, K)."""
    windows = occlusion_windows(x.shape, window, stride)
    occluded = np.repeat(x[None], len(windows), axis=0)
    for i, (r, c) in enumerate(windows):
        occluded[i, r:r + window, c:c + window] = fill
    base = _forward_values(fn, x[None])
    return windows, base - _forward_values(fn, occluded)


def occlusion_maps(fn: TargetFn, k: int, x: np.ndarray, window: int, stride: int, fill: float) -> np.ndarray:
    windows, deltas = occlusion_deltas(fn, x, window, stride, fill)
    sums = np.zeros((k,) + x.shape)
    counts = np.zeros(x.shape)
    for (r, c), d in zip(windows, deltas):
        sums[:, r:r + window, c:c + window] += d[:, None, None]
        counts[r:r + window, c:c + window] += 1
    return sums / counts


# ----------------------------------------------------------------- method spec

METHODS = ("saliency", "occlusion", "ig", "gradshap")


@dataclass(frozen=True)
class MethodSpec:
    """A method name plus its fully-resolved parameters."""

    name: str
    params: dict = field(default_factory=dict)

    def canonical(self) -> str:
        return json.dumps({"method": self.name, "params": self.params}, sort_keys=True, separators=(",", ":"))

    def __hash__(self):
        return hash(self.canonical())

    def __eq__(self, other):
        return isinstance(other, MethodSpec) and self.canonical() == other.canonical()


class UnknownMethodError(ValueError):
    pass


def method_spec(name: str, model: DualEncoderModel | None = None, *, window: int = 4, stride: int | None = None,
                fill: float | None = None, steps: int = 64, baseline: BaselineSpec | None = None,
                samples: int = 16, seed: int = 0, std: float = 0.1) -> MethodSpec:
    """Build a MethodSpec with documented defaults filled in.

    Occlusion fill defaults to the model's training-corpus mean pixel, IG
    baseline to ``Constant(0)``, gradient-SHAP baselines to noise around the
    same corpus mean.
    """
    corpus_mean = model.config.pixel_mean if model is not None else 0.0
    if name == "saliency":
        return MethodSpec(name, {})
    if name == "occlusion":
        fill_spec = DatasetMean(corpus_mean) if fill is None else Constant(fill)
        return MethodSpec(name, {"window": int(window), "stride": int(stride if stride is not None else window),
                                 "fill": fill_spec.to_dict()})
    if name == "ig":
        return MethodSpec(name, {"steps": int(steps), "baseline": (baseline or Constant(0.0)).to_dict()})
    if name == "gradshap":
        dist = baseline if isinstance(baseline, Noise) else Noise(corpus_mean, std, seed)
        return MethodSpec(name, {"samples": int(samples), "seed": int(seed),
                                 "baseline": {"kind": "noise", "mean": float(dist.mean), "std": float(dist.std)}})
    raise UnknownMethodError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")


def attribute_all(fn: TargetFn, k: int, x: np.ndarray, spec: MethodSpec) -> np.ndarray:
    """Run ``spec`` against a K-output target; returns (K, H, W)."""
    p = spec.params
    if spec.name == "saliency":
        return saliency_maps(fn, k, x)
    if spec.name == "occlusion":
        fill = baseline_from_dict(p["fill"]).materialize(()).item()
        return occlusion_maps(fn, k, x, p["window"], p["stride"], fill)
    if spec.name == "ig":
        return ig_maps(fn, k, x, baseline_from_dict(p["baseline"]).materialize(x.shape), p["steps"])
    if spec.name == "gradshap":
        b = p["baseline"]
        return gradshap_maps(fn, k, x, b["mean"], b["std"], p["samples"], p["seed"], p.get("fixed_alpha"))
    raise UnknownMethodError(f"unknown method {spec.name!r}")


# ---------------------------------------------------------------- public API


@dataclass
class AttributionMap:
    values: np.ndarray
    method: str
    target: str
    image_id: str | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or not np.all(np.isfinite(self.values)):
            raise ValueError("attribution map must be a finite 2-D array")


def _pixels(img) -> tuple[np.ndarray, str | None]:
    if isinstance(img, ImageInput):
        return img.pixels, img.id
    return np.asarray(img, dtype=np.float64), None


def _single(model, img, target, spec: MethodSpec) -> AttributionMap:
    x, image_id = _pixels(img)
    fn, k = resolve_target(model, target, x)
    maps = attribute_all(fn, k, x, spec)
    if k != 1:
        raise tn.DimensionError(f"expected a scalar target, got {k} outputs")
    return AttributionMap(maps[0], spec.name, _describe(target), image_id, dict(spec.params))


def saliency(model, img, target) -> AttributionMap:
    """Signed gradient of the target with respect to every pixel."""
    return _single(model, img, target, MethodSpec("saliency", {}))


def occlusion(model, img, target, window: int, stride: int, fill: Constant | float = 0.0) -> AttributionMap:
    value = fill.value if isinstance(fill, (Constant, DatasetMean)) else float(fill)
    spec = MethodSpec("occlusion", {"window": int(window), "stride": int(stride),
                                    "fill": Constant(value).to_dict()})
    return _single(model, img, target, spec)


def integrated_gradients(model, img, target, baseline: BaselineSpec | None = None, steps: int = 64) -> AttributionMap:
    spec = MethodSpec("ig", {"steps": int(steps), "baseline": (baseline or Constant(0.0)).to_dict()})
    return _single(model, img, target, spec)


def gradient_shap(model, img, target, baseline_dist: Noise | None = None, n_samples: int = 16, seed: int = 0,
                  fixed_alpha: float | None = None) -> AttributionMap:
    """Expected gradients: average of ``(x - b) * grad f(b + a (x - b))`` over draws of ``b`` and ``a``.

    ``fixed_alpha`` pins every interpolation weight (testing hook).
    """
    dist = baseline_dist or Noise(0.0, 0.1)
    params = {"samples": int(n_samples), "seed": int(seed),
              "baseline": {"kind": "noise", "mean": float(dist.mean), "std": float(dist.std)}}
    if fixed_alpha is not None:
        params["fixed_alpha"] = float(fixed_alpha)
    return _single(model, img, target, MethodSpec("gradshap", params))
