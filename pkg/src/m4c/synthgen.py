"""Deterministic synthetic scenes for copy / lookup / compose question answering.

Scenes are laid out on a ``rows x cols`` grid. OCR tokens are random
consonant-only strings placed one per cell; every token of a row shares the
same vertical extent, so reading order (top-to-bottom, then left-to-right)
is well defined. Objects sit one per row and carry an attribute whose name is a
fixed-vocabulary word; attribute words always contain a vowel, so they can never
collide with an OCR string.

Families:

* ``copy-one``     -- token at a queried (row, col)
* ``copy-multi``   -- all tokens of a queried row, in reading order (2-4 words)
* ``vocab-lookup`` -- attribute word of the object in a queried row
* ``mixed``        -- attribute word of the row's object followed by the token at (row, col)
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import M4CError, ValidationError
from .featurize import BEGIN, END, DetectedObjectInput, Manifest, OcrTokenInput, ScenePack, write_scene_pack

FAMILIES = ("copy-one", "copy-multi", "vocab-lookup", "mixed")

ATTRIBUTE_WORDS = (
    "red", "blue", "green", "yellow", "orange", "purple", "pink", "brown", "black", "white",
    "gray", "silver", "gold", "navy", "olive", "teal", "maroon", "beige", "ivory", "coral",
    "amber", "azure", "cyan", "lime", "indigo", "violet", "tan", "rose", "ruby", "jade",
)
TOKEN_ALPHABET = "bcdfghjklmnpqrstvwxz"
_VOWELS = set("aeiou")


class GenerationError(M4CError, RuntimeError):
    pass


@dataclass
class SynthSpec:
    seed: int = 0
    family: str = "mixed"
    min_tokens: int = 5
    max_tokens: int = 10
    vocab_words: tuple = ATTRIBUTE_WORDS
    alphabet: str = TOKEN_ALPHABET
    token_len: tuple = (3, 5)
    feat_dim: int = 32
    word_dim: int = 300
    rows: int = 3
    cols: int = 4
    max_objects: int = 3
    attribute_noise: float = 0.1
    decimals: int = 4
    max_retries: int = 100
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vocab_words = tuple(self.vocab_words)
        self.token_len = tuple(self.token_len)
        if self.family not in FAMILIES:
            raise ValidationError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if not (1 <= self.min_tokens <= self.max_tokens <= self.rows * self.cols):
            raise ValidationError("token count range must fit in the grid")
        if self.cols < 2:
            raise ValidationError("need at least 2 columns for multi-token rows")
        if set(self.alphabet) & _VOWELS or not self.alphabet.isalpha():
            raise ValidationError("token alphabet must be letters without vowels")
        if any(not (set(w) & _VOWELS) for w in self.vocab_words):
            raise ValidationError("every vocabulary word must contain a vowel")
        if not (1 <= self.max_objects <= self.rows):
            raise ValidationError("max_objects must be between 1 and rows")

    @property
    def question_vocab(self):
        words = ["what", "word", "words", "is", "are", "at", "in", "row", "col", "color", "the", "object",
                 "describe"]
        return words + [f"r{i}" for i in range(self.rows)] + [f"c{j}" for j in range(self.cols)]

    @property
    def answer_vocab(self):
        return [BEGIN, END] + list(self.vocab_words)

    def manifest(self):
        return Manifest(question_mode="learned", obj_feat_dim=self.feat_dim, ocr_feat_dim=self.feat_dim,
                        word_dim=self.word_dim, question_vocab=self.question_vocab,
                        answer_vocab=self.answer_vocab, extra={"synth": asdict(self)})


def _unit(v):
    return v / np.linalg.norm(v)


def _attribute_prototypes(spec):
    rng = np.random.default_rng([spec.seed, 0x5EED])
    return np.stack([_unit(rng.standard_normal(spec.feat_dim)) for _ in spec.vocab_words])


def word_vector(text, dim=300, decimals=4):
    """Deterministic pseudo word embedding keyed by the string (stand-in for FastText)."""
    rng = np.random.default_rng(zlib.crc32(text.encode("utf-8")))
    return np.round(rng.standard_normal(dim) / np.sqrt(dim), decimals)


def _layout(rng, spec, width, height):
    """Per-cell token boxes; rows share a common vertical extent."""
    cell_w, cell_h = width / spec.cols, height / spec.rows
    boxes = {}
    for r in range(spec.rows):
        h = cell_h * rng.uniform(0.3, 0.5)
        yc = (r + 0.5) * cell_h + rng.uniform(-0.1, 0.1) * cell_h
        y0, y1 = yc - h / 2, yc + h / 2
        for c in range(spec.cols):
            w = cell_w * rng.uniform(0.4, 0.8)
            xc = (c + 0.5) * cell_w + rng.uniform(-0.05, 0.05) * cell_w
            boxes[(r, c)] = (xc - w / 2, y0, xc + w / 2, y1)
    return boxes


def _rounded(box, decimals):
    return tuple(round(float(v), decimals) for v in box)


def generate_example(spec: SynthSpec, index: int) -> ScenePack:
    rng = np.random.default_rng([spec.seed, index])
    prototypes = _attribute_prototypes(spec)
    dec = spec.decimals
    width = float(rng.integers(400, 801))
    height = float(rng.integers(300, 601))
    boxes = _layout(rng, spec, width, height)
    cells = [(r, c) for r in range(spec.rows) for c in range(spec.cols)]

    for _ in range(spec.max_retries):
        n_tok = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        chosen = [cells[i] for i in rng.choice(len(cells), size=n_tok, replace=False)]
        per_row = {r: sorted(c for rr, c in chosen if rr == r) for r in range(spec.rows)}
        multi_rows = [r for r, cs in per_row.items() if 2 <= len(cs) <= 4]
        if spec.family != "copy-multi" or multi_rows:
            break
    else:
        raise GenerationError(f"could not place tokens for example {index}")

    texts = set()
    tokens = {}
    for cell in sorted(chosen):
        for _ in range(spec.max_retries):
            length = int(rng.integers(spec.token_len[0], spec.token_len[1] + 1))
            text = "".join(rng.choice(list(spec.alphabet), size=length))
            if text not in texts:
                break
        else:
            raise GenerationError(f"could not draw a distinct token for example {index}")
        texts.add(text)
        tokens[cell] = text

    n_obj = int(rng.integers(1, spec.max_objects + 1))
    obj_rows = sorted(int(r) for r in rng.choice(spec.rows, size=n_obj, replace=False))
    objects, obj_attr = [], {}
    cell_h = height / spec.rows
    for r in obj_rows:
        attr = int(rng.integers(len(spec.vocab_words)))
        feat = _unit(prototypes[attr] + spec.attribute_noise * rng.standard_normal(spec.feat_dim))
        x0 = rng.uniform(0, 0.5) * width
        x1 = x0 + rng.uniform(0.2, 0.5) * width
        y0 = (r + rng.uniform(0.0, 0.2)) * cell_h
        y1 = (r + rng.uniform(0.8, 1.0)) * cell_h
        box = _rounded((x0, y0, min(x1, width), min(y1, height)), dec)
        objects.append(DetectedObjectInput(box, np.round(feat, dec)))
        obj_attr[r] = spec.vocab_words[attr]

    fam = spec.family
    if fam == "copy-one":
        r, c = chosen[int(rng.integers(len(chosen)))]
        question = ["what", "word", "is", "at", "row", f"r{r}", "col", f"c{c}"]
        answer = tokens[(r, c)]
    elif fam == "copy-multi":
        r = multi_rows[int(rng.integers(len(multi_rows)))]
        question = ["what", "words", "are", "in", "row", f"r{r}"]
        row_cells = [(r, c) for c in per_row[r]]
        order = sorted(row_cells, key=lambda rc: (_center(boxes[rc])[1], _center(boxes[rc])[0]))
        answer = " ".join(tokens[rc] for rc in order)
    elif fam == "vocab-lookup":
        r = obj_rows[int(rng.integers(len(obj_rows)))]
        question = ["what", "color", "is", "the", "object", "in", "row", f"r{r}"]
        answer = obj_attr[r]
    else:
        candidates = [rc for rc in chosen if rc[0] in obj_attr]
        if not candidates:
            # guarantee a token in some object row
            r = obj_rows[0]
            free = [c for c in range(spec.cols) if (r, c) not in tokens]
            c = free[int(rng.integers(len(free)))] if free else 0
            if (r, c) not in tokens:
                victim = chosen.pop(int(rng.integers(len(chosen))))
                tokens[(r, c)] = tokens.pop(victim)
                chosen.append((r, c))
            candidates = [(r, c)]
        r, c = candidates[int(rng.integers(len(candidates)))]
        question = ["describe", "row", f"r{r}", "col", f"c{c}"]
        answer = f"{obj_attr[r]} {tokens[(r, c)]}"

    ocr = []
    for cell in [chosen[i] for i in rng.permutation(len(chosen))]:
        text = tokens[cell]
        app = np.round(_unit(rng.standard_normal(spec.feat_dim)), dec)
        ocr.append(OcrTokenInput(text, _rounded(boxes[cell], dec), app, word_vector(text, spec.word_dim, dec)))
    return ScenePack(id=f"{fam}-{spec.seed}-{index}", image_size=(width, height), objects=objects, ocr=ocr,
                     answers=[answer], question_tokens=question)


def _center(box):
    return ((box[0] + box[2]) / 2, (box[1] + box[3]) / 2)


def generate_split(spec: SynthSpec, start: int, count: int):
    return [generate_example(spec, i) for i in range(start, start + count)]


def generate_dataset(spec: SynthSpec, n_train: int, n_val: int, out_dir):
    """Write ``train.jsonl``, ``val.jsonl`` and ``manifest.json``; train/val use disjoint index ranges."""
    if n_train < 0 or n_val < 0:
        raise ValidationError("n_train and n_val must be non-negative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_scene_pack(out / "train.jsonl", generate_split(spec, 0, n_train))
    write_scene_pack(out / "val.jsonl", generate_split(spec, n_train, n_val))
    spec.manifest().save(out / "manifest.json")
    return {"train": out / "train.jsonl", "val": out / "val.jsonl", "manifest": out / "manifest.json"}
