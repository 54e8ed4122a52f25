"""Per-token features and scene-pack ingestion.

A scene pack is a JSON-lines file with one scene per line, accompanied by a
``manifest.json`` in the same directory that declares the feature
dimensionalities, the question mode and the vocabularies. Scenes stand in for
the outputs of the external question encoder, object detector and OCR system.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParseError, ValidationError

log = logging.getLogger(__name__)

PHOC_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"
PHOC_LEVELS = (2, 3, 4, 5)
# 50 most frequent English bigrams, as used by the common 604-d PHOC layout.
PHOC_BIGRAMS = (
    "th", "he", "in", "er", "an", "re", "es", "on", "st", "nt",
    "en", "at", "ed", "nd", "to", "or", "ea", "ti", "ar", "te",
    "ng", "al", "it", "as", "is", "ha", "et", "se", "ou", "of",
    "le", "sa", "ve", "ro", "ra", "ri", "hi", "ne", "me", "de",
    "co", "ta", "ec", "si", "ll", "so", "na", "li", "la", "el",
)
PHOC_BIGRAM_LEVEL = 2
PHOC_DIM = sum(PHOC_LEVELS) * len(PHOC_ALPHABET) + PHOC_BIGRAM_LEVEL * len(PHOC_BIGRAMS)

_CHAR_INDEX = {c: i for i, c in enumerate(PHOC_ALPHABET)}
_BIGRAM_INDEX = {b: i for i, b in enumerate(PHOC_BIGRAMS)}
_UNIGRAM_DIM = sum(PHOC_LEVELS) * len(PHOC_ALPHABET)

QUESTION_MODES = ("learned", "ingested")
BEGIN, END = "<begin>", "<end>"


def _overlap(a0, a1, b0, b1):
    return max(0, min(a1, b1) - max(a0, b0))


def phoc(text: str) -> np.ndarray:
    """604-d binary Pyramidal Histogram of Characters.

    Character ``k`` of an ``n``-character word spans ``[k/n, (k+1)/n]`` and is
    counted in region ``r`` of level ``l`` when at least half of its span lies
    inside ``[r/l, (r+1)/l]``; bigrams span two characters and use level 2 only.
    Intervals are compared in integer units of ``1/(n*l)``, so the 50% test is exact.
    """
    out = np.zeros(PHOC_DIM, dtype=np.float64)
    word = [c for c in text.lower() if c in _CHAR_INDEX]
    n = len(word)
    if n == 0:
        return out
    offset = 0
    for level in PHOC_LEVELS:
        for k, ch in enumerate(word):
            for r in range(level):
                if 2 * _overlap(k * level, (k + 1) * level, r * n, (r + 1) * n) >= level:
                    out[offset + r * len(PHOC_ALPHABET) + _CHAR_INDEX[ch]] = 1.0
        offset += level * len(PHOC_ALPHABET)
    level = PHOC_BIGRAM_LEVEL
    for k in range(n - 1):
        idx = _BIGRAM_INDEX.get(word[k] + word[k + 1])
        if idx is None:
            continue
        for r in range(level):
            if _overlap(k * level, (k + 2) * level, r * n, (r + 1) * n) >= level:
                out[_UNIGRAM_DIM + r * len(PHOC_BIGRAMS) + idx] = 1.0
    return out


def bbox_feature(bbox, width, height) -> np.ndarray:
    """Relative box ``[x_min/W, y_min/H, x_max/W, y_max/H]``."""
    if width <= 0 or height <= 0:
        raise ValidationError(f"image size must be positive, got {width}x{height}")
    x0, y0, x1, y1 = bbox
    return np.array([x0 / width, y0 / height, x1 / width, y1 / height], dtype=np.float64)


def normalize_token(text: str) -> str:
    return text.strip().lower()


# -- scene types -----------------------------------------------------------------

@dataclass
class DetectedObjectInput:
    bbox: tuple
    feat_appearance: np.ndarray


@dataclass
class OcrTokenInput:
    text: str
    bbox: tuple
    feat_appearance: np.ndarray
    feat_word: np.ndarray

    @cached_property
    def phoc(self):
        return phoc(self.text)

    @property
    def norm_text(self):
        return normalize_token(self.text)


@dataclass
class ScenePack:
    id: str
    image_size: tuple
    objects: list
    ocr: list
    answers: list
    question_tokens: list | None = None
    question_vectors: np.ndarray | None = None

    def to_record(self):
        rec = {"id": self.id, "image_size": [float(v) for v in self.image_size]}
        if self.question_vectors is not None:
            rec["question_vectors"] = np.asarray(self.question_vectors).tolist()
        else:
            rec["question_tokens"] = list(self.question_tokens or [])
        rec["objects"] = [{"bbox": [float(v) for v in o.bbox], "feat": np.asarray(o.feat_appearance).tolist()} for o in self.objects]
        rec["ocr"] = [
            {"text": t.text, "bbox": [float(v) for v in t.bbox], "feat_frcn": np.asarray(t.feat_appearance).tolist(),
             "feat_ft": np.asarray(t.feat_word).tolist()}
            for t in self.ocr
        ]
        rec["answers"] = list(self.answers)
        return rec


@dataclass
class Manifest:
    """Sidecar metadata for a scene-pack directory."""

    question_mode: str = "learned"
    obj_feat_dim: int = 2048
    ocr_feat_dim: int = 2048
    word_dim: int = 300
    question_dim: int = 768
    question_vocab: list = field(default_factory=list)
    answer_vocab: list = field(default_factory=lambda: [BEGIN, END])
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.question_mode not in QUESTION_MODES:
            raise ValidationError(f"question_mode must be one of {QUESTION_MODES}, got {self.question_mode!r}")
        if self.answer_vocab[:2] != [BEGIN, END]:
            raise ValidationError("answer_vocab must start with <begin>, <end>")
        if len(set(self.answer_vocab)) != len(self.answer_vocab):
            raise ValidationError("answer_vocab has duplicate entries")

    def to_json(self):
        return json.dumps(self.__dict__, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**raw)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def manifest_path_for(scene_path):
    return Path(scene_path).with_name("manifest.json")


def build_answer_vocab(answers, size):
    """``<begin>``, ``<end>`` plus the ``size - 2`` most frequent answer words (ties by first appearance)."""
    counts = {}
    for ans in answers:
        for w in ans.lower().split():
            counts[w] = counts.get(w, 0) + 1
    ranked = sorted(counts, key=lambda w: -counts[w])
    return [BEGIN, END] + [w for w in ranked if w not in (BEGIN, END)][: max(size - 2, 0)]


# -- scene-pack files ------------------------------------------------------------

_SCENE_KEYS = {"id", "image_size", "objects", "ocr", "answers"}
_QUESTION_KEYS = {"question_tokens", "question_vectors"}


def write_scene_pack(path, scenes):
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


def _vec(values, dim, what, line):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or (dim is not None and arr.shape[0] != dim):
        raise DimensionError(f"line {line}: {what} has shape {arr.shape}, manifest expects ({dim},)")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"line {line}: {what} contains non-finite values")
    return arr


def _box(values, width, height, what, line):
    if not isinstance(values, list) or len(values) != 4:
        raise ParseError(f"{what} bbox must be 4 numbers", line)
    x0, y0, x1, y1 = (float(v) for v in values)
    if not (0 <= x0 <= x1 <= width and 0 <= y0 <= y1 <= height):
        raise ValidationError(f"line {line}: {what} bbox {values} outside image {width}x{height}")
    return (x0, y0, x1, y1)


def _parse_record(rec, manifest, line):
    if not isinstance(rec, dict):
        raise ParseError("record is not a JSON object", line)
    keys = set(rec)
    missing = _SCENE_KEYS - keys
    if missing:
        raise ParseError(f"missing fields {sorted(missing)}", line)
    q_keys = keys & _QUESTION_KEYS
    if len(q_keys) != 1:
        raise ParseError("exactly one of question_tokens / question_vectors is required", line)
    unknown = keys - _SCENE_KEYS - _QUESTION_KEYS
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", line)

    size = rec["image_size"]
    if not isinstance(size, list) or len(size) != 2:
        raise ParseError("image_size must be [W, H]", line)
    width, height = float(size[0]), float(size[1])
    if width <= 0 or height <= 0:
        raise ValidationError(f"line {line}: image size must be positive, got {size}")

    tokens = vectors = None
    if "question_tokens" in rec:
        if manifest is not None and manifest.question_mode != "learned":
            raise ValidationError(f"line {line}: question_tokens given but manifest mode is {manifest.question_mode}")
        tokens = [str(t) for t in rec["question_tokens"]]
    else:
        if manifest is not None and manifest.question_mode != "ingested":
            raise ValidationError(f"line {line}: question_vectors given but manifest mode is {manifest.question_mode}")
        qdim = manifest.question_dim if manifest is not None else None
        vectors = np.stack([_vec(v, qdim, "question vector", line) for v in rec["question_vectors"]]) \
            if rec["question_vectors"] else np.zeros((0, qdim or 0))

    obj_dim = manifest.obj_feat_dim if manifest is not None else None
    objects = []
    for o in rec["objects"]:
        if set(o) != {"bbox", "feat"}:
            raise ParseError(f"object fields must be bbox, feat; got {sorted(o)}", line)
        objects.append(DetectedObjectInput(_box(o["bbox"], width, height, "object", line),
                                           _vec(o["feat"], obj_dim, "object feat", line)))
    ocr_dim = manifest.ocr_feat_dim if manifest is not None else None
    word_dim = manifest.word_dim if manifest is not None else 300
    ocr = []
    for t in rec["ocr"]:
        if set(t) != {"text", "bbox", "feat_frcn", "feat_ft"}:
            raise ParseError(f"ocr fields must be text, bbox, feat_frcn, feat_ft; got {sorted(t)}", line)
        if not isinstance(t["text"], str) or not normalize_token(t["text"]):
            raise ValidationError(f"line {line}: OCR text must be non-empty after normalization")
        ocr.append(OcrTokenInput(t["text"], _box(t["bbox"], width, height, "ocr", line),
                                 _vec(t["feat_frcn"], ocr_dim, "ocr feat_frcn", line),
                                 _vec(t["feat_ft"], word_dim, "ocr feat_ft", line)))
    answers = rec["answers"]
    if not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
        raise ParseError("answers must be a list of strings", line)
    return ScenePack(id=str(rec["id"]), image_size=(size[0], size[1]), objects=objects, ocr=ocr,
                     answers=list(answers), question_tokens=tokens, question_vectors=vectors)


def truncate_scene(scene, max_question, max_objects, max_ocr):
    """Clip list lengths to the caps, keeping file order; warns when anything is dropped."""
    q_len = len(scene.question_tokens) if scene.question_tokens is not None else len(scene.question_vectors)
    if q_len > max_question or len(scene.objects) > max_objects or len(scene.ocr) > max_ocr:
        log.warning("scene %s truncated to K=%d M=%d N=%d (had %d/%d/%d)", scene.id, max_question, max_objects,
                    max_ocr, q_len, len(scene.objects), len(scene.ocr))
        if scene.question_tokens is not None:
            scene.question_tokens = scene.question_tokens[:max_question]
        else:
            scene.question_vectors = scene.question_vectors[:max_question]
        scene.objects = scene.objects[:max_objects]
        scene.ocr = scene.ocr[:max_ocr]
    return scene


def load_scene_pack(path, manifest=None, caps=None, eager_phoc=False):
    """Read and validate a scene-pack file.

    ``manifest`` defaults to the ``manifest.json`` beside ``path`` when one
    exists. ``caps`` is ``(K, M, N)``; longer lists are truncated in file order.
    """
    path = Path(path)
    if manifest is None and manifest_path_for(path).exists():
        manifest = Manifest.load(manifest_path_for(path))
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line_no) from exc
            try:
                scene = _parse_record(rec, manifest, line_no)
            except (TypeError, KeyError) as exc:
                raise ParseError(f"malformed record ({exc})", line_no) from exc
            if caps is not None:
                truncate_scene(scene, *caps)
            if eager_phoc:
                for t in scene.ocr:
                    t.phoc  # noqa: B018 - populate the cache
            scenes.append(scene)
    return scenes


# -- batching --------------------------------------------------------------------

@dataclass
class Batch:
    """Padded array view of a list of scenes (one row per scene)."""

    ids: list
    q_mask: np.ndarray
    obj_fr: np.ndarray
    obj_box: np.ndarray
    obj_mask: np.ndarray
    ocr_ft: np.ndarray
    ocr_fr: np.ndarray
    ocr_phoc: np.ndarray
    ocr_box: np.ndarray
    ocr_mask: np.ndarray
    ocr_texts: list
    q_ids: np.ndarray | None = None
    q_vecs: np.ndarray | None = None

    def __len__(self):
        return len(self.ids)

    def take(self, index):
        """Sub-batch for an integer index array."""
        index = np.asarray(index, dtype=np.int64)
        kw = {}
        for name in self.__dataclass_fields__:
            val = getattr(self, name)
            if val is None:
                kw[name] = None
            elif isinstance(val, list):
                kw[name] = [val[i] for i in index]
            else:
                kw[name] = val[index]
        return Batch(**kw)


def make_batch(scenes, manifest: Manifest, caps):
    """Stack scenes into zero-padded arrays of length ``K``, ``M``, ``N``."""
    K, M, N = caps
    B = len(scenes)
    learned = manifest.question_mode == "learned"
    q_index = {w: i for i, w in enumerate(manifest.question_vocab)}
    q_mask = np.zeros((B, K))
    q_ids = np.zeros((B, K), dtype=np.int64) if learned else None
    q_vecs = None if learned else np.zeros((B, K, manifest.question_dim))
    obj_fr = np.zeros((B, M, manifest.obj_feat_dim))
    obj_box = np.zeros((B, M, 4))
    obj_mask = np.zeros((B, M))
    ocr_ft = np.zeros((B, N, manifest.word_dim))
    ocr_fr = np.zeros((B, N, manifest.ocr_feat_dim))
    ocr_phoc = np.zeros((B, N, PHOC_DIM))
    ocr_box = np.zeros((B, N, 4))
    ocr_mask = np.zeros((B, N))
    ocr_texts = []
    for b, s in enumerate(scenes):
        W, H = s.image_size
        if learned:
            if s.question_tokens is None:
                raise ValidationError(f"scene {s.id}: learned question mode needs question_tokens")
            toks = s.question_tokens[:K]
            for k, tok in enumerate(toks):
                if tok not in q_index:
                    raise ValidationError(f"scene {s.id}: unknown question token {tok!r}")
                q_ids[b, k] = q_index[tok]
            q_mask[b, :len(toks)] = 1.0
        else:
            if s.question_vectors is None:
                raise ValidationError(f"scene {s.id}: ingested question mode needs question_vectors")
            vecs = np.asarray(s.question_vectors)[:K]
            if len(vecs) and vecs.shape[1] != manifest.question_dim:
                raise DimensionError(f"scene {s.id}: question vectors dim {vecs.shape[1]} != {manifest.question_dim}")
            q_vecs[b, :len(vecs)] = vecs
            q_mask[b, :len(vecs)] = 1.0
        for m, o in enumerate(s.objects[:M]):
            if o.feat_appearance.shape != (manifest.obj_feat_dim,):
                raise DimensionError(f"scene {s.id}: object feature dim {o.feat_appearance.shape} "
                                     f"!= ({manifest.obj_feat_dim},)")
            obj_fr[b, m] = o.feat_appearance
            obj_box[b, m] = bbox_feature(o.bbox, W, H)
            obj_mask[b, m] = 1.0
        texts = []
        for n, t in enumerate(s.ocr[:N]):
            if t.feat_appearance.shape != (manifest.ocr_feat_dim,) or t.feat_word.shape != (manifest.word_dim,):
                raise DimensionError(f"scene {s.id}: OCR feature dims {t.feat_appearance.shape}/{t.feat_word.shape}")
            ocr_ft[b, n] = t.feat_word
            ocr_fr[b, n] = t.feat_appearance
            ocr_phoc[b, n] = t.phoc
            ocr_box[b, n] = bbox_feature(t.bbox, W, H)
            ocr_mask[b, n] = 1.0
            texts.append(t.norm_text)
        ocr_texts.append(texts)
    return Batch(ids=[s.id for s in scenes], q_mask=q_mask, q_ids=q_ids, q_vecs=q_vecs, obj_fr=obj_fr,
                 obj_box=obj_box, obj_mask=obj_mask, ocr_ft=ocr_ft, ocr_fr=ocr_fr, ocr_phoc=ocr_phoc,
                 ocr_box=ocr_box, ocr_mask=ocr_mask, ocr_texts=ocr_texts)


def scenes_equal(a: ScenePack, b: ScenePack) -> bool:
    """Content equality (arrays compared exactly)."""
    return json.dumps(a.to_record()) == json.dumps(b.to_record())


__all__ = [
    "PHOC_DIM", "PHOC_BIGRAMS", "PHOC_ALPHABET", "BEGIN", "END", "phoc", "bbox_feature", "normalize_token",
    "DetectedObjectInput", "OcrTokenInput", "ScenePack", "Manifest", "build_answer_vocab", "write_scene_pack",
    "load_scene_pack", "truncate_scene", "Batch", "make_batch", "scenes_equal", "manifest_path_for",
]
