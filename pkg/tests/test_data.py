import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lagdiff import data
from lagdiff.data import ConceptSpec, DatasetManifest, gen_concept, gen_pretrain_corpus
from lagdiff.imageio import (ImageFormatError, from_u8, load_image, load_mask, save_image, save_mask,
                             to_u8)
from lagdiff.text import CLASSES, VocabularyError, default_vocab, tokenize


@pytest.fixture(scope="module")
def corpus():
    return gen_pretrain_corpus(0, 256)


def test_corpus_size_classes_and_scenes(corpus):
    assert len(corpus.images) == 256
    assert all(img.shape == (3, 32, 32) for img in corpus.images)
    classes = Counter(e["class"] for e in corpus.entries)
    assert set(classes) == set(CLASSES)
    assert len({e["scene"] for e in corpus.entries}) >= 4
    # the 3-sigma band of a Binomial(256, 1/8) count; balanced assignment sits at its centre
    mean, sd = 256 / 8, math.sqrt(256 * (1 / 8) * (7 / 8))
    assert all(abs(c - mean) < 3 * sd for c in classes.values())


def test_corpus_is_seeded(corpus):
    again = gen_pretrain_corpus(0, 256)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(corpus.images, again.images))
    with pytest.raises(ValueError):
        gen_pretrain_corpus(0, 63)


def test_captions_tokenize_without_concept_tokens(corpus):
    v = default_vocab()
    for e in corpus.entries:
        assert tokenize(e["caption"], v).concept_indices == ()


def test_manifest_round_trip(tmp_path):
    man = gen_pretrain_corpus(3, 64)
    man.write(tmp_path)
    back = DatasetManifest.read(tmp_path)
    assert back.entries == man.entries
    assert all(a.tobytes() == b.tobytes() for a, b in zip(man.images, back.images))


def test_concept_references_share_identity():
    spec = ConceptSpec("c1", "cat", (2, 6), 2, reference_count=4)
    refs = gen_concept(spec, seed=4)
    colors = []
    for img in refs:
        region = data.sprite_region(img)
        px = {tuple(p) for p in np.round(img[:, region].T * 127.5 + 127.5).astype(int)}
        colors.append(px & {tuple(c) for c in data.PALETTE.astype(int)})
    assert all(c == colors[0] for c in colors) and len(colors[0]) == 2
    corners = [tuple(np.round(img[:, 0, 0], 6)) for img in refs]
    assert len(set(corners)) == len(refs)
    again = gen_concept(spec, seed=4)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(refs, again))


def test_unknown_macro_class():
    with pytest.raises(VocabularyError):
        gen_concept(ConceptSpec("c", "zebra", (0, 1), 0), 0)
    with pytest.raises(VocabularyError):
        data.random_concept_spec("c", "zebra", 0)


def test_spec_json_round_trip():
    spec = data.random_concept_spec("c9", "cup", 11)
    assert ConceptSpec.from_json(spec.to_json()) == spec


def test_identity_descriptor_is_translation_invariant():
    spec = ConceptSpec("c2", "bird", (1, 4), 0)
    a = data.compose(np.full((3, 32, 32), 100.0), spec.shape, data.PALETTE[[1, 4]], 0, 14, 3, 4)
    b = data.compose(np.full((3, 32, 32), 100.0), spec.shape, data.PALETTE[[1, 4]], 0, 14, 15, 12)
    np.testing.assert_allclose(data.identity_descriptor(a), data.identity_descriptor(b), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 40), w=st.integers(1, 40), seed=st.integers(0, 2**32 - 1))
def test_image_round_trip(tmp_path_factory, h, w, seed):
    img = from_u8(np.random.default_rng(seed).integers(0, 256, size=(3, h, w), dtype=np.uint8))
    path = tmp_path_factory.mktemp("img") / "x.ppm"
    save_image(img, path)
    back = load_image(path)
    assert back.shape == (3, h, w)
    assert back.tobytes() == img.tobytes()


def test_quantization_is_affine_rounding():
    np.testing.assert_array_equal(to_u8(np.array([-1.0, 0.0, 1.0, 2.0])), [0, 128, 255, 255])


def test_bad_headers(tmp_path):
    (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n" + b"\x00" * 3)
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "a.ppm")
    (tmp_path / "b.ppm").write_bytes(b"P6\n2 2\n65535\n" + b"\x00" * 24)
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "b.ppm")
    (tmp_path / "c.ppm").write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 5)
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "c.ppm")


def test_comment_in_header(tmp_path):
    (tmp_path / "d.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n\xff\x00\x80")
    np.testing.assert_allclose(load_image(tmp_path / "d.ppm").ravel(), [1.0, -1.0, 128 / 127.5 - 1])


def test_mask_round_trip(tmp_path):
    m = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(float)
    save_mask(m, tmp_path / "m.pgm")
    assert load_mask(tmp_path / "m.pgm").tobytes() == m.tobytes()
