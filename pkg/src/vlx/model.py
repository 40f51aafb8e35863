"""Dual-encoder vision-language model built on :mod:`vlx.tensor`.

Vision path: patchify -> linear patch embedding + position embedding -> GELU
-> residual GELU MLP -> mean-pool -> projection -> L2 normalize.
Text path: bag-of-token-embeddings mean -> residual GELU MLP -> projection ->
L2 normalize. Similarity is ``tau * <I_p, T_p>``.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import logging
import re
import struct
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)

UNK = "<unk>"
TAU_MIN, TAU_MAX = 0.05, 100.0
CHECKPOINT_MAGIC = b"VLXM"
CHECKPOINT_VERSION = 1

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class InputError(ValueError):
    """Invalid user-facing input (empty text, bad pixels, empty prompt set)."""


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    image_side: int = 64
    patch_size: int = 8
    vision_hidden: int = 128
    text_hidden: int = 64
    embed_dim: int = 32
    vocab: list[str] = field(default_factory=lambda: [UNK])
    init_temperature: float = 1.0
    seed: int = 0
    # mean training pixel; default occlusion fill
    pixel_mean: float = 0.0

    def __post_init__(self):
        if self.patch_size < 1 or self.image_side % self.patch_size:
            raise ValueError(
                f"patch_size {self.patch_size} must divide image_side {self.image_side}"
            )
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if not self.vocab or self.vocab[0] != UNK:
            raise ValueError(f"vocab must start with the reserved {UNK!r} token")
        if self.init_temperature <= 0:
            raise ValueError("init_temperature must be positive")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2


@dataclass
class ImageInput:
    pixels: np.ndarray
    object_mask: np.ndarray | None = None
    class_id: int | None = None
    image_id: str | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise InputError(f"image must be 2-D, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)) or self.pixels.min() < 0 or self.pixels.max() > 1:
            raise InputError("pixels must lie in [0, 1]")
        if self.object_mask is not None:
            self.object_mask = np.asarray(self.object_mask, dtype=bool)
            if self.object_mask.shape != self.pixels.shape:
                raise InputError("mask shape differs from image shape")

    def content_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.pixels).tobytes()).hexdigest()

    @property
    def id(self) -> str:
        return self.image_id or self.content_hash()[:16]


@dataclass(frozen=True)
class TextInput:
    raw: str
    tokens: tuple[int, ...]


def split_words(raw: str) -> list[str]:
    return _TOKEN_RE.findall(raw.lower())


def tokenize(raw: str, vocab: Sequence[str]) -> TextInput:
    if not raw or not raw.strip():
        raise InputError("empty text input")
    index = {w: i for i, w in enumerate(vocab)}
    words = split_words(raw)
    if not words:
        raise InputError(f"no tokens in {raw!r}")
    return TextInput(raw, tuple(index.get(w, 0) for w in words))


def bag_of_words(texts: Sequence[TextInput], vocab_size: int) -> np.ndarray:
    """Row-normalized token counts, so ``bow @ table`` is the mean token embedding."""
    bow = np.zeros((len(texts), vocab_size))
    for r, t in enumerate(texts):
        if not t.tokens or max(t.tokens) >= vocab_size:
            raise InputError(f"token index out of range for {t.raw!r}")
        for tok in t.tokens:
            bow[r, tok] += 1.0
        bow[r] /= len(t.tokens)
    return bow


PARAM_NAMES = (
    "patch_w", "patch_b", "pos", "v_w1", "v_b1", "v_w2", "v_b2", "proj_v",
    "tok", "t_w1", "t_b1", "t_w2", "t_b2", "proj_t",
)


class DualEncoderModel:
    """Parameters live as plain float64 arrays; forward passes wrap them as
    constant tensors unless a ``weights`` dict of grad-tracking tensors is given."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 tau: float | None = None):
        self.config = config
        if params is None:
            params = self._init_params(config)
        self.params = {k: np.array(params[k], dtype=np.float64) for k in PARAM_NAMES}
        self.tau = float(config.init_temperature if tau is None else tau)

    def weights(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def _w(self, weights):
        return weights if weights is not None else {k: Tensor._wrap(v, False) for k, v in self.params.items()}

    @staticmethod
    def _init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(cfg.seed)
        p2, d, e, m, v = cfg.patch_size**2, cfg.vision_hidden, cfg.text_hidden, cfg.embed_dim, len(cfg.vocab)

        def dense(n_in, n_out):
            return rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out))

        return {
            "patch_w": dense(p2, d),
            "patch_b": np.zeros((1, d)),
            "pos": rng.normal(0.0, 0.1, (1, cfg.n_patches * d)),
            "v_w1": dense(d, d),
            "v_b1": np.zeros((1, d)),
            "v_w2": dense(d, d),
            "v_b2": np.zeros((1, d)),
            "proj_v": dense(d, m),
            "tok": rng.normal(0.0, 1.0, (v, e)),
            "t_w1": dense(e, e),
            "t_b1": np.zeros((1, e)),
            "t_w2": dense(e, e),
            "t_b2": np.zeros((1, e)),
            "proj_t": dense(e, m),
        }

    # ------------------------------------------------------------------ encoders

    @property
    def temperature(self) -> float:
        return self.tau

    def patchify(self, x: Tensor) -> Tensor:
        """(B, A, A) pixels -> (B * n_patches, p*p) patch rows."""
        a, p = self.config.image_side, self.config.patch_size
        b, g = x.shape[0], a // p
        y = tn.reshape(x, (b, g, p, g, p))
        y = tn.transpose(y, (0, 1, 3, 2, 4))
        return tn.reshape(y, (b * g * g, p * p))

    def image_features(self, x: Tensor, weights=None) -> Tensor:
        """Pre-projection image embedding I, shape (B, D)."""
        cfg, P = self.config, self._w(weights)
        if x.data.ndim == 2:
            x = tn.reshape(x, (1,) + x.shape)
        if x.shape[1:] != (cfg.image_side, cfg.image_side):
            raise DimensionError(
                f"image shape {x.shape[1:]} != ({cfg.image_side}, {cfg.image_side})"
            )
        b, n, d = x.shape[0], cfg.n_patches, cfg.vision_hidden
        x = tn.add(x, -cfg.pixel_mean)
        h = tn.add(tn.matmul(self.patchify(x), P["patch_w"]), P["patch_b"])
        # learned per-patch position offsets, then GELU
        h = tn.reshape(tn.add(tn.reshape(h, (b, n * d)), P["pos"]), (b * n, d))
        h = tn.gelu(h)
        u = tn.gelu(tn.add(tn.matmul(h, P["v_w1"]), P["v_b1"]))
        h = tn.add(h, tn.add(tn.matmul(u, P["v_w2"]), P["v_b2"]))
        return tn.mean_pool_rows(h, n)

    def image_embeddings(self, x: Tensor, weights=None) -> Tensor:
        """Unit-norm projected image embeddings I_p, shape (B, M)."""
        w = self._w(weights)
        return tn.l2_normalize_rows(tn.matmul(self.image_features(x, w), w["proj_v"]))

    def text_embeddings(self, texts: Sequence[TextInput], weights=None) -> Tensor:
        """Unit-norm projected text embeddings T_p, shape (B, M)."""
        P = self._w(weights)
        bow = Tensor(bag_of_words(texts, len(self.config.vocab)))
        h = tn.matmul(bow, P["tok"])
        h = tn.add(h, tn.add(tn.matmul(tn.gelu(tn.add(tn.matmul(h, P["t_w1"]), P["t_b1"])), P["t_w2"]), P["t_b2"]))
        return tn.l2_normalize_rows(tn.matmul(h, P["proj_t"]))

    def tokenize(self, raw: str) -> TextInput:
        return tokenize(raw, self.config.vocab)

    # ---------------------------------------------------------------- fingerprint

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        save_checkpoint(self, buf)
        return buf.getvalue()

    def fingerprint(self) -> bytes:
        """32-byte SHA-256 of the serialized checkpoint."""
        return hashlib.sha256(self.to_bytes()).digest()

    def copy(self) -> DualEncoderModel:
        return DualEncoderModel(self.config, {k: v.copy() for k, v in self.params.items()}, tau=self.tau)


def _image_tensor(img) -> np.ndarray:
    return img.pixels if isinstance(img, ImageInput) else np.asarray(img, dtype=np.float64)


def encode_image(model: DualEncoderModel, img) -> np.ndarray:
    return model.image_embeddings(Tensor(_image_tensor(img)[None])).data[0].copy()


def encode_text(model: DualEncoderModel, txt) -> np.ndarray:
    if isinstance(txt, str):
        txt = model.tokenize(txt)
    return model.text_embeddings([txt]).data[0].copy()


def similarity(model: DualEncoderModel, image_emb, text_emb) -> float:
    i, t = np.asarray(image_emb, dtype=float), np.asarray(text_emb, dtype=float)
    if i.shape != t.shape or i.ndim != 1:
        raise DimensionError(f"embedding shapes differ: {i.shape} vs {t.shape}")
    return model.temperature * float(i @ t)


def _class_matrix(prompt_sets) -> tuple[list[str], np.ndarray]:
    """Flattened prompts plus a (n_prompts, n_classes) averaging matrix."""
    if not prompt_sets:
        raise InputError("need at least one class")
    prompts, cols = [], []
    for k, ps in enumerate(prompt_sets):
        if not ps.prompts:
            raise InputError(f"prompt set {ps.label!r} is empty")
        prompts.extend(ps.prompts)
        cols.extend([k] * len(ps.prompts))
    avg = np.zeros((len(prompts), len(prompt_sets)))
    for r, k in enumerate(cols):
        avg[r, k] = 1.0 / len(prompt_sets[k].prompts)
    return prompts, avg


def prompt_text_matrix(model: DualEncoderModel, prompt_sets) -> np.ndarray:
    """(M, n_classes) matrix whose column k is tau times the mean prompt embedding of class k.

    Class logits are then ``I_p @ matrix`` (mean similarity over each prompt set).
    """
    prompts, avg = _class_matrix(prompt_sets)
    t = model.text_embeddings([model.tokenize(p) for p in prompts]).data
    return model.temperature * (t.T @ avg)


def class_logits(model: DualEncoderModel, images: Tensor, prompt_sets) -> Tensor:
    return tn.matmul(model.image_embeddings(images), Tensor(prompt_text_matrix(model, prompt_sets)))


def prompt_classify(model: DualEncoderModel, img, prompt_sets) -> np.ndarray:
    logits = class_logits(model, Tensor(_image_tensor(img)[None]), prompt_sets)
    return tn.softmax_rows(logits).data[0].copy()


def classify_batch(model: DualEncoderModel, pixels: np.ndarray, prompt_sets) -> np.ndarray:
    """Per-class probabilities for a stack of images, shape (B, n_classes)."""
    cls = prompt_text_matrix(model, prompt_sets)
    emb = model.image_embeddings(Tensor(pixels)).data
    return tn.softmax_rows(Tensor(emb @ cls)).data


# -------------------------------------------------------------------- training


class _Optimizer:
    """SGD with momentum, or Adam (bias-corrected)."""

    def __init__(self, kind: str, lr: float, momentum: float, like: dict[str, np.ndarray],
                 weight_decay: float = 0.0):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in like.items()}
        self.v = {k: np.zeros_like(v) for k, v in like.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k] if grads[k] is not None else np.zeros_like(p)
            if self.weight_decay and k != "tau":
                p = p * (1.0 - self.lr * self.weight_decay)
            if self.kind == "sgd":
                self.m[k] = self.momentum * self.m[k] - self.lr * g
                out[k] = p + self.m[k]
            else:
                self.m[k] = 0.9 * self.m[k] + 0.1 * g
                self.v[k] = 0.999 * self.v[k] + 0.001 * g * g
                mhat = self.m[k] / (1 - 0.9**self.t)
                vhat = self.v[k] / (1 - 0.999**self.t)
                out[k] = p - self.lr * mhat / (np.sqrt(vhat) + 1e-8)
        return out


@dataclass
class TrainResult:
    model: DualEncoderModel
    losses: list[float]


def _epoch_batches(captions: Sequence[str], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle indices into batches with pairwise distinct captions.

    A colliding sample is deferred to a later batch; leftovers that cannot
    fill a complete batch are dropped for this epoch.
    """
    pending = deque(int(i) for i in rng.permutation(len(captions)))
    batches = []
    while True:
        batch, seen, skipped = [], set(), []
        while pending and len(batch) < batch_size:
            idx = pending.popleft()
            if captions[idx] in seen:
                skipped.append(idx)
            else:
                batch.append(idx)
                seen.add(captions[idx])
        if len(batch) < batch_size:
            return batches
        batches.append(batch)
        pending.extendleft(reversed(skipped))


def contrastive_loss(model: DualEncoderModel, pixels: np.ndarray, texts: Sequence[TextInput],
                     weights=None, tau: Tensor | None = None) -> Tensor:
    """Symmetric InfoNCE over in-batch image/caption pairs."""
    b = len(texts)
    ip = model.image_embeddings(Tensor(pixels), weights)
    tp = model.text_embeddings(texts, weights)
    tau = Tensor([[model.tau]]) if tau is None else tau
    logits = tn.mul(tn.matmul(ip, tn.transpose(tp)), tau)
    eye = Tensor(np.eye(b) * (-0.5 / b))
    l_img = tn.total(tn.mul(tn.log_softmax_rows(logits), eye))
    l_txt = tn.total(tn.mul(tn.log_softmax_rows(tn.transpose(logits)), eye))
    return tn.add(l_img, l_txt)


def train_contrastive(model: DualEncoderModel, dataset, epochs: int, batch_size: int, lr: float,
                      seed: int, momentum: float = 0.9, optimizer: str = "adam", progress=None,
                      weight_decay: float = 0.1, schedule: str = "constant") -> TrainResult:
    """Contrastive training on (image, caption) samples. Mutates ``model``.

    ``schedule="cosine"`` anneals the learning rate per epoch towards zero;
    ``weight_decay`` is decoupled and skips the temperature.
    """
    if schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown schedule {schedule!r}")
    if len(dataset) < batch_size:
        raise ValueError(f"dataset of {len(dataset)} is smaller than batch_size {batch_size}")
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 for in-batch negatives")
    captions = [s.caption for s in dataset]
    texts = [model.tokenize(c) for c in captions]
    pixels = np.stack([s.image.pixels for s in dataset])
    if len(set(captions)) < batch_size:
        raise ValueError(f"only {len(set(captions))} distinct captions; batch_size {batch_size} impossible")
    rng = np.random.default_rng(seed)
    names = list(PARAM_NAMES) + ["tau"]
    state = {k: np.array([[model.tau]]) if k == "tau" else model.params[k] for k in names}
    opt = _Optimizer(optimizer, lr, momentum, state, weight_decay)
    losses = []
    for epoch in range(epochs):
        if schedule == "cosine":
            opt.lr = lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
        batch_losses = []
        for bi, batch in enumerate(_epoch_batches(captions, batch_size, rng)):
            tn.new_tape()
            w = {k: Tensor._wrap(state[k], True) for k in names}
            loss = contrastive_loss(model, pixels[batch], [texts[i] for i in batch], w, w["tau"])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}, lr {lr}")
            tn.backward(loss)
            state = opt.step(state, {k: w[k].grad for k in names})
            state["tau"] = np.clip(state["tau"], TAU_MIN, TAU_MAX)
            batch_losses.append(value)
        model.params = {k: state[k] for k in PARAM_NAMES}
        model.tau = float(state["tau"][0, 0])
        losses.append(float(np.mean(batch_losses)))
        log.info("epoch %d loss %.4f tau %.3f", epoch, losses[-1], model.tau)
        if progress is not None:
            progress(epoch, losses[-1])
    return TrainResult(model, losses)


# ------------------------------------------------------------------ checkpoint


def save_checkpoint(model: DualEncoderModel, fh) -> None:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", CHECKPOINT_VERSION))
    fh.write(struct.pack("<I", len(cfg)))
    fh.write(cfg)
    fh.write(struct.pack("<I", len(PARAM_NAMES)))
    for name in PARAM_NAMES:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())
    fh.write(struct.pack("<d", model.temperature))


def _read(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def load_checkpoint(fh) -> DualEncoderModel:
    if _read(fh, 4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a VLXM checkpoint")
    (version,) = struct.unpack("<I", _read(fh, 4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", _read(fh, 4))
    config = ModelConfig(**json.loads(_read(fh, n)))
    (count,) = struct.unpack("<I", _read(fh, 4))
    if count != len(PARAM_NAMES):
        raise CheckpointError(f"expected {len(PARAM_NAMES)} tensors, found {count}")
    params = {}
    for name in PARAM_NAMES:
        (ndim,) = struct.unpack("<I", _read(fh, 4))
        shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim))
        size = int(np.prod(shape))
        params[name] = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    (tau,) = struct.unpack("<d", _read(fh, 8))
    return DualEncoderModel(config, params, tau=tau)


def save_model(model: DualEncoderModel, path) -> None:
    with open(path, "wb") as fh:
        save_checkpoint(model, fh)


def load_model(path) -> DualEncoderModel:
    with open(path, "rb") as fh:
        return load_checkpoint(fh)
