import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlx.data import (
    LOCATIONS, SHAPES, ConfigError, FormatError, SynthConfig, build_prompt_sets, generate_dataset,
    label_prompt_sets, load_corpus, load_image, location_word, read_pgm, save_corpus, size_word,
    split_words, write_png, write_pgm,
)
from vlx.model import tokenize


def test_single_sample_deterministic():
    a, va = generate_dataset(1, seed=3)
    b, vb = generate_dataset(1, seed=3)
    assert np.array_equal(a[0].image.pixels, b[0].image.pixels)
    assert a[0].caption == b[0].caption and va == vb


def test_masks_in_bounds_with_minimum_area():
    cfg = SynthConfig(image_side=32)
    lo, _ = cfg.size_range()
    samples, _ = generate_dataset(200, cfg, seed=1)
    for s in samples:
        m = s.image.object_mask
        assert m.shape == (32, 32)
        assert m.sum() >= np.pi * lo**2 / 8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_caption_faithful_to_image(seed):
    cfg = SynthConfig(image_side=64)
    (s,), vocab = generate_dataset(1, cfg, seed=seed)
    words = split_words(s.caption)
    spec = s.spec
    assert words[0] == spec.size_word == size_word(spec.size, 64)
    assert words[1] == spec.shape == SHAPES[s.class_id]
    assert " ".join(words[4:]) == spec.location == location_word(spec.center, 64)
    half = spec.size / 2
    assert half <= spec.center[0] <= 64 - half and half <= spec.center[1] <= 64 - half
    assert 0 < spec.intensity <= 1
    assert 0 not in tokenize(s.caption, vocab).tokens


def test_class_frequencies_near_uniform():
    samples, _ = generate_dataset(2000, seed=0)
    freq = np.bincount([s.class_id for s in samples], minlength=4) / 2000
    assert np.all(np.abs(freq - 0.25) <= 0.05)


def test_unplaceable_config():
    with pytest.raises(ConfigError):
        generate_dataset(1, SynthConfig(image_side=16, min_size=16, max_size=16))


def test_prompt_sets():
    sets = build_prompt_sets(k_prompts=1)
    assert [len(s.prompts) for s in sets] == [1, 1, 1, 1]
    assert sets[0].prompts == ["a circle"]
    default = build_prompt_sets()
    for ps in default:
        assert len(ps.prompts) == 10 and len(set(ps.prompts)) == 10
        assert all(ps.label in split_words(p) for p in ps.prompts)
    assert [p.prompts for p in label_prompt_sets()] == [[c] for c in SHAPES]
    with pytest.raises(ValueError):
        build_prompt_sets(k_prompts=5, pool_limit=3)


def test_vocabulary_closure():
    samples, vocab = generate_dataset(50, seed=2)
    for text in [s.caption for s in samples] + [p for ps in build_prompt_sets() for p in ps.prompts]:
        assert 0 not in tokenize(text, vocab).tokens
    assert vocab[0] == "<unk>" and vocab[1:] == sorted(vocab[1:])


def test_location_words_cover_all_regions():
    samples, _ = generate_dataset(300, seed=4)
    assert {s.spec.location for s in samples} == set(LOCATIONS)


def test_load_pgm_bytes(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 0, 255]))
    img = load_image(p, 2)
    assert np.array_equal(img.pixels, [[0.0, 1.0], [0.0, 1.0]])


def test_load_pgm_with_comment_and_passthrough(tmp_path):
    p = tmp_path / "b.pgm"
    raw = np.arange(16, dtype=np.uint8).reshape(4, 4) * 16
    p.write_bytes(b"P5\n# note\n4 4\n255\n" + raw.tobytes())
    assert np.array_equal(load_image(p, 4).pixels, raw / 255.0)


def test_nearest_neighbor_downsize(tmp_path):
    checker = (np.indices((4, 4)).sum(axis=0) % 2 * 255).astype(np.uint8)
    p = tmp_path / "c.pgm"
    write_pgm(p, checker)
    got = load_image(p, 2).pixels
    idx = [i * 4 // 2 for i in range(2)]
    assert np.array_equal(got, checker[np.ix_(idx, idx)] / 255.0)


def test_png_roundtrip_and_format_errors(tmp_path):
    raw = np.random.default_rng(0).integers(0, 256, (5, 5)).astype(np.uint8)
    write_png(tmp_path / "g.png", raw)
    assert np.array_equal(load_image(tmp_path / "g.png").pixels, raw / 255.0)
    write_png(tmp_path / "rgb.png", np.zeros((3, 3, 3), dtype=np.uint8))
    with pytest.raises(FormatError, match="rgb.png"):
        load_image(tmp_path / "rgb.png")
    (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(FormatError, match="P2"):
        load_image(tmp_path / "p2.pgm")
    (tmp_path / "deep.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(FormatError, match="bit depth"):
        read_pgm(tmp_path / "deep.pgm")
    with pytest.raises(FormatError):
        load_image(tmp_path / "x.bmp")


def test_corpus_roundtrip(tmp_path):
    cfg = SynthConfig(image_side=16)
    samples, vocab = generate_dataset(5, cfg, seed=7)
    save_corpus(samples, vocab, tmp_path, cfg, seed=7)
    assert (tmp_path / "img_00000.pgm").exists() and (tmp_path / "mask_00004.pgm").exists()
    back, vocab2, manifest = load_corpus(tmp_path)
    assert vocab2 == vocab and manifest["seed"] == 7
    for a, b in zip(samples, back):
        assert a.caption == b.caption and a.class_id == b.class_id
        assert np.array_equal(a.image.object_mask, b.image.object_mask)
        assert np.max(np.abs(a.image.pixels - b.image.pixels)) <= 0.5 / 255 + 1e-12
