import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m4c.errors import DimensionError, ParseError, ValidationError
from m4c.featurize import (
    PHOC_ALPHABET, PHOC_BIGRAMS, PHOC_DIM, DetectedObjectInput, Manifest, OcrTokenInput, ScenePack,
    bbox_feature, load_scene_pack, make_batch, normalize_token, phoc, scenes_equal, write_scene_pack,
)


def reference_phoc(text):
    """Independent occupancy oracle using exact fractions."""
    from fractions import Fraction

    chars = [c for c in text.lower() if c in PHOC_ALPHABET]
    out = []
    n = len(chars)
    for level in (2, 3, 4, 5):
        for r in range(level):
            lo, hi = Fraction(r, level), Fraction(r + 1, level)
            hist = [0] * 36
            for k, c in enumerate(chars):
                a, b = Fraction(k, n), Fraction(k + 1, n)
                ov = max(Fraction(0), min(b, hi) - max(a, lo))
                if ov >= (b - a) / 2:
                    hist[PHOC_ALPHABET.index(c)] = 1
            out.extend(hist)
    for r in range(2):
        lo, hi = Fraction(r, 2), Fraction(r + 1, 2)
        hist = [0] * 50
        for k in range(n - 1):
            bg = chars[k] + chars[k + 1]
            if bg not in PHOC_BIGRAMS:
                continue
            a, b = Fraction(k, n), Fraction(k + 2, n)
            ov = max(Fraction(0), min(b, hi) - max(a, lo))
            if ov >= (b - a) / 2:
                hist[PHOC_BIGRAMS.index(bg)] = 1
        out.extend(hist)
    return np.array(out, dtype=float)


def test_phoc_dimension_and_empty():
    assert PHOC_DIM == 604
    assert len(PHOC_BIGRAMS) == 50 and len(set(PHOC_BIGRAMS)) == 50
    v = phoc("")
    assert v.shape == (604,) and not v.any()
    assert not phoc("!!--").any()


def test_phoc_single_char_counts_only_where_half_its_span_falls():
    v = phoc("A")
    assert np.array_equal(v, phoc("a"))
    # a lone character spans [0, 1]; only the two halves at level 2 hold half of it
    assert list(np.flatnonzero(v)) == [0, 36]


def test_phoc_matches_fraction_oracle_on_words():
    for word in ["hello", "the", "1:45", "bud light", "Coca-Cola", "x", "ab", "mississippi", "zz9"]:
        assert np.array_equal(phoc(word), reference_phoc(word)), word


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet=PHOC_ALPHABET + "ABCXYZ -_.!", max_size=14))
def test_phoc_properties(text):
    v = phoc(text)
    assert v.shape == (604,)
    assert set(np.unique(v)) <= {0.0, 1.0}
    assert np.array_equal(v, phoc(text.lower()))
    stripped = "".join(c for c in text.lower() if c in PHOC_ALPHABET)
    assert np.array_equal(v, phoc(stripped))
    assert np.array_equal(v, reference_phoc(text))


def test_phoc_byte_stable():
    assert phoc("parallel").tobytes() == phoc("parallel").tobytes()


def test_bbox_feature_examples():
    assert np.allclose(bbox_feature((0, 0, 640, 480), 640, 480), [0, 0, 1, 1])
    assert np.allclose(bbox_feature((10, 20, 30, 60), 100, 200), [0.1, 0.1, 0.3, 0.3])
    assert np.allclose(bbox_feature((5, 5, 5, 5), 10, 10), [0.5] * 4)
    with pytest.raises(ValidationError):
        bbox_feature((0, 0, 1, 1), 0, 10)


def test_normalize_token_keeps_punctuation():
    assert normalize_token("  1:45 ") == "1:45"
    assert normalize_token("Bud") == "bud"


def _manifest(**kw):
    base = dict(question_mode="learned", obj_feat_dim=3, ocr_feat_dim=2, word_dim=300,
                question_vocab=["what", "is"], answer_vocab=["<begin>", "<end>", "a"])
    base.update(kw)
    return Manifest(**base)


def _scene(sid="s0", n_ocr=2, n_obj=1):
    rng = np.random.default_rng(0)
    objs = [DetectedObjectInput((0, 0, 5, 5), rng.standard_normal(3)) for _ in range(n_obj)]
    ocr = [OcrTokenInput(f"tok{i}", (1, 1, 4, 4), rng.standard_normal(2), rng.standard_normal(300))
           for i in range(n_ocr)]
    return ScenePack(id=sid, image_size=(10, 10), objects=objs, ocr=ocr, answers=["a"],
                     question_tokens=["what", "is"])


def test_scene_pack_round_trip(tmp_path):
    man = _manifest()
    scenes = [_scene("a"), _scene("b", n_ocr=0, n_obj=0)]
    path = tmp_path / "s.jsonl"
    write_scene_pack(path, scenes)
    man.save(tmp_path / "manifest.json")
    back = load_scene_pack(path, man)
    assert len(back) == 2 and all(scenes_equal(x, y) for x, y in zip(scenes, back))


def test_empty_file_and_truncation(tmp_path):
    man = _manifest()
    (tmp_path / "e.jsonl").write_text("")
    assert load_scene_pack(tmp_path / "e.jsonl", man) == []
    write_scene_pack(tmp_path / "big.jsonl", [_scene(n_ocr=60)])
    got = load_scene_pack(tmp_path / "big.jsonl", man, caps=(20, 100, 50))[0]
    assert [t.text for t in got.ocr] == [f"tok{i}" for i in range(50)]


def test_malformed_record_reports_line(tmp_path):
    man = _manifest()
    path = tmp_path / "bad.jsonl"
    good = json.dumps(_scene().to_record())
    path.write_text(good + "\n{not json\n")
    with pytest.raises(ParseError, match="line 2"):
        load_scene_pack(path, man)
    rec = _scene().to_record()
    rec["extra_field"] = 1
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ParseError, match="line 1"):
        load_scene_pack(path, man)


def test_dimension_mismatch_and_bad_boxes(tmp_path):
    path = tmp_path / "s.jsonl"
    write_scene_pack(path, [_scene()])
    with pytest.raises(DimensionError):
        load_scene_pack(path, _manifest(ocr_feat_dim=5))
    rec = _scene().to_record()
    rec["ocr"][0]["bbox"] = [0, 0, 50, 4]
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ValidationError):
        load_scene_pack(path, _manifest())
    rec = _scene().to_record()
    rec["ocr"][0]["text"] = "   "
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ValidationError):
        load_scene_pack(path, _manifest())


def test_manifest_rejects_unknown_keys(tmp_path):
    text = json.loads(_manifest().to_json())
    text["bogus"] = 1
    with pytest.raises(ValidationError):
        Manifest.from_json(json.dumps(text))


def test_make_batch_pads_and_masks():
    man = _manifest()
    b = make_batch([_scene("a", n_ocr=2), _scene("b", n_ocr=0)], man, (3, 2, 4))
    assert b.ocr_mask.tolist() == [[1, 1, 0, 0], [0, 0, 0, 0]]
    assert b.q_mask.tolist() == [[1, 1, 0], [1, 1, 0]]
    assert b.ocr_phoc.shape == (2, 4, 604)
    assert b.ocr_texts == [["tok0", "tok1"], []]
    sc = _scene()
    sc.question_tokens = ["unknown"]
    with pytest.raises(ValidationError):
        make_batch([sc], man, (3, 2, 4))
