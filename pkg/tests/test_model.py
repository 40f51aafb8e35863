import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlx import tensor as tn
from vlx.data import PromptSet, generate_dataset, SynthConfig
from vlx.model import (
    UNK, CheckpointError, DualEncoderModel, ImageInput, InputError, ModelConfig,
    classify_batch, contrastive_loss, encode_image, encode_text, load_checkpoint,
    prompt_classify, save_checkpoint, similarity, tokenize, train_contrastive,
)
from vlx.tensor import Tensor

from oracles import central_diff, rel_err

VOCAB = [UNK, "circle", "square"]


def small_model(seed=0, side=16, m=6, vocab=None):
    cfg = ModelConfig(image_side=side, patch_size=4, vision_hidden=12, text_hidden=10, embed_dim=m,
                      vocab=vocab or VOCAB, init_temperature=2.0, seed=seed, pixel_mean=0.3)
    return DualEncoderModel(cfg)


def test_tokenize_cases():
    assert tokenize("circle", VOCAB).tokens == (1,)
    assert tokenize("CIRCLE!", VOCAB).tokens == (1,)
    assert tokenize("plasma circle", VOCAB).tokens == (0, 1)
    with pytest.raises(InputError):
        tokenize("   ", VOCAB)


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(image_side=10, patch_size=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab=["circle"])


def test_image_input_validation():
    with pytest.raises(InputError):
        ImageInput(np.full((4, 4), 1.5))
    with pytest.raises(InputError):
        ImageInput(np.zeros((4, 4)), object_mask=np.zeros((3, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_embeddings_unit_norm(seed):
    model = small_model()
    img = np.random.default_rng(seed).uniform(size=(16, 16))
    assert abs(np.linalg.norm(encode_image(model, img)) - 1) <= 1e-10
    assert abs(np.linalg.norm(encode_text(model, "square circle circle")) - 1) <= 1e-10


def test_identical_images_identical_embeddings():
    model = small_model()
    img = np.random.default_rng(3).uniform(size=(16, 16))
    assert np.array_equal(encode_image(model, img), encode_image(model, img.copy()))


def test_text_embedding_is_order_invariant():
    model = small_model(vocab=[UNK, "small", "circle", "at", "the", "center"])
    a = encode_text(model, "small circle at the center")
    b = encode_text(model, "center the at circle small")
    assert np.array_equal(a, b)


def test_degenerate_embedding_error():
    model = small_model()
    model.params = {k: np.zeros_like(v) for k, v in model.params.items()}
    with pytest.raises(tn.DegenerateEmbeddingError):
        encode_image(model, np.full((16, 16), 0.5))


def test_similarity_examples():
    model = small_model(m=3)
    e1, e2 = np.eye(3)[0], np.eye(3)[1]
    model.tau = 1.0
    assert similarity(model, e1, e1) == 1.0
    assert similarity(model, e1, e2) == 0.0
    model.tau = 2.0
    half = np.array([0.5, np.sqrt(0.75), 0.0])
    assert similarity(model, e1, half) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(tn.DimensionError):
        similarity(model, e1, np.ones(4) / 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_similarity_bilinear_and_bounded(seed):
    model = small_model()
    rng = np.random.default_rng(seed)
    u, v, t = rng.normal(size=(3, 6))
    a, b = rng.normal(size=2)
    assert similarity(model, a * u + b * v, t) == pytest.approx(
        a * similarity(model, u, t) + b * similarity(model, v, t), abs=1e-10)
    ip = encode_image(model, rng.uniform(size=(16, 16)))
    tp = encode_text(model, "circle")
    assert abs(similarity(model, ip, tp)) <= model.temperature + 1e-12


def test_prompt_classify_examples():
    model = small_model()
    img = np.random.default_rng(0).uniform(size=(16, 16))
    assert prompt_classify(model, img, [PromptSet("circle", ["circle"])]).tolist() == [1.0]
    sets = [PromptSet("a", ["circle", "square"]), PromptSet("b", ["circle", "square"])]
    assert prompt_classify(model, img, sets).tolist() == [0.5, 0.5]
    probs = prompt_classify(model, img, [PromptSet("c", ["circle"]), PromptSet("s", ["square circle"])])
    assert abs(probs.sum() - 1) <= 1e-10
    batch = classify_batch(model, img[None], [PromptSet("c", ["circle"]), PromptSet("s", ["square circle"])])
    assert np.allclose(batch[0], probs, atol=1e-14)


def test_prompt_classify_shift_invariance():
    logits = Tensor([[0.3, -1.2, 2.0]])
    assert np.allclose(tn.softmax_rows(logits).data, tn.softmax_rows(tn.add(logits, 7.5)).data, atol=1e-15)


def test_similarity_gradient_is_weighted_embedding_jacobian():
    model = small_model()
    rng = np.random.default_rng(4)
    x0 = rng.uniform(size=(16, 16))
    tp = encode_text(model, "circle square")
    x = Tensor(x0[None], requires_grad=True)
    tn.backward(tn.total(tn.mul(model.image_embeddings(x), Tensor(model.temperature * tp[None]))))
    direct = x.grad[0]
    acc = np.zeros_like(x0)
    for i in range(6):
        xi = Tensor(x0[None], requires_grad=True)
        sel = np.zeros((1, 6))
        sel[0, i] = 1.0
        tn.backward(tn.total(tn.mul(model.image_embeddings(xi), Tensor(sel))))
        acc += tp[i] * model.temperature * xi.grad[0]
    assert np.max(np.abs(direct - acc)) <= 1e-10


def test_image_gradient_matches_finite_differences():
    model = small_model(seed=7)
    rng = np.random.default_rng(7)
    x0, w = rng.uniform(size=(16, 16)), rng.normal(size=(1, 6))

    def f(v):
        return float(np.sum(model.image_embeddings(Tensor(v[None])).data * w))

    x = Tensor(x0[None], requires_grad=True)
    tn.backward(tn.total(tn.mul(model.image_embeddings(x), Tensor(w))))
    assert rel_err(x.grad[0], central_diff(f, x0)) <= 1e-4


def test_checkpoint_roundtrip_and_version_check():
    model = small_model(seed=3)
    buf = io.BytesIO()
    save_checkpoint(model, buf)
    raw = buf.getvalue()
    assert raw[:4] == b"VLXM"
    back = load_checkpoint(io.BytesIO(raw))
    assert back.fingerprint() == model.fingerprint()
    assert back.temperature == model.temperature
    bad = raw[:4] + (99).to_bytes(4, "little") + raw[8:]
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(io.BytesIO(bad))
    with pytest.raises(CheckpointError):
        load_checkpoint(io.BytesIO(b"NOPE" + raw[4:]))


@pytest.fixture(scope="module")
def tiny_corpus():
    cfg = SynthConfig(image_side=16)
    samples, vocab = generate_dataset(12, cfg, seed=5)
    return samples, vocab


def _model_for(vocab, seed=0):
    return DualEncoderModel(ModelConfig(image_side=16, patch_size=4, vision_hidden=12, text_hidden=10,
                                        embed_dim=6, vocab=vocab, seed=seed, pixel_mean=0.25))


def test_training_lr_zero_is_noop(tiny_corpus):
    samples, vocab = tiny_corpus
    model = _model_for(vocab)
    before = {k: v.copy() for k, v in model.params.items()}
    tau = model.temperature
    train_contrastive(model, samples, epochs=2, batch_size=4, lr=0.0, seed=0)
    assert all(np.array_equal(before[k], model.params[k]) for k in before)
    assert model.temperature == tau


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_training_is_deterministic(tiny_corpus, optimizer):
    samples, vocab = tiny_corpus
    runs = []
    for _ in range(2):
        model = _model_for(vocab)
        res = train_contrastive(model, samples[:4], epochs=1, batch_size=4, lr=0.01, seed=1, optimizer=optimizer)
        runs.append((res.losses, model.fingerprint()))
    assert runs[0] == runs[1]


def test_training_loss_decreases(tiny_corpus):
    samples, vocab = tiny_corpus
    model = _model_for(vocab, seed=2)
    res = train_contrastive(model, samples, epochs=8, batch_size=4, lr=0.01, seed=0, optimizer="adam")
    assert res.losses[-1] < res.losses[0]


def test_temperature_is_clamped(tiny_corpus):
    samples, vocab = tiny_corpus
    model = _model_for(vocab)
    model.tau = 0.05
    train_contrastive(model, samples, epochs=2, batch_size=4, lr=5.0, seed=0)
    assert 0.05 <= model.temperature <= 100.0


def test_contrastive_loss_gradient_matches_finite_differences(tiny_corpus):
    samples, vocab = tiny_corpus
    model = _model_for(vocab)
    px = np.stack([s.image.pixels for s in samples[:4]])
    texts = [model.tokenize(s.caption) for s in samples[:4]]
    w = model.weights(requires_grad=True)
    tn.backward(contrastive_loss(model, px, texts, w))
    for name in ("proj_v", "tok"):
        p0 = model.params[name].copy()

        def f(v):
            model.params[name] = v
            return contrastive_loss(model, px, texts).item()

        fd = central_diff(f, p0)
        model.params[name] = p0
        assert rel_err(w[name].grad, fd) <= 1e-4


def test_batches_never_repeat_captions():
    from vlx.model import _epoch_batches

    captions = ["a", "a", "a", "b", "b", "c", "d", "c", "e", "a"]
    batches = _epoch_batches(captions, 3, np.random.default_rng(0))
    assert batches
    for b in batches:
        assert len({captions[i] for i in b}) == 3
    flat = [i for b in batches for i in b]
    assert len(flat) == len(set(flat))
