"""Greedy iterative answer decoding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import M4CError, ParseError
from .featurize import Batch
from .model import BEGIN_ID, END_ID, OCR, VOCAB, M4C, masked_scores
from .numcore import no_grad


class DecodeError(M4CError, RuntimeError):
    """No candidate is selectable (every score is -inf or NaN)."""


@dataclass
class Component:
    kind: str  # "vocab" | "ocr"
    index: int
    surface: str

    def trace(self):
        return f"{self.kind}:{self.index}:{self.surface}"


@dataclass
class DecodeResult:
    components: list = field(default_factory=list)
    answer: str = ""
    step_scores: list = field(default_factory=list)
    steps_used: int = 0

    @property
    def realized(self):
        """(kind, index) inputs fed to steps 1..steps_used."""
        seq = [(VOCAB, BEGIN_ID)]
        for c in self.components:
            seq.append((OCR if c.kind == "ocr" else VOCAB, c.index))
        return seq[: self.steps_used]


def select_argmax(y_all, vocab_size):
    """``(kind, index)`` of the best of ``[vocab | ocr]`` scores; ties go to the lowest position."""
    y = np.asarray(y_all, dtype=np.float64)
    if y.size == 0 or not np.any(np.isfinite(y)) or np.any(np.isnan(y)):
        raise DecodeError("no finite score to select from")
    pos = int(np.argmax(y))
    if pos < vocab_size:
        return VOCAB, pos
    return OCR, pos - vocab_size


def decode_batch(model: M4C, batch: Batch, answer_vocab, max_steps=None):
    """Decode every scene of ``batch``; returns one DecodeResult per scene.

    Step ``t`` re-runs the transformer over the entities plus decode slots ``1..t``;
    causal masking makes this equal to one teacher-forced pass over the realised inputs.
    """
    cfg = model.config
    T = cfg.T if max_steps is None else min(max_steps, cfg.T)
    V = cfg.V
    B = len(batch)
    prev_kind = np.full((B, 1), VOCAB, dtype=np.int64)
    prev_index = np.full((B, 1), BEGIN_ID, dtype=np.int64)
    results = [DecodeResult() for _ in range(B)]
    active = np.ones(B, dtype=bool)
    with no_grad():
        for t in range(T):
            out = model.forward(batch, prev_kind, prev_index)
            scores = masked_scores(out.y_all.data[:, t], out.eligible)
            nxt_kind = np.full(B, VOCAB, dtype=np.int64)
            nxt_index = np.full(B, END_ID, dtype=np.int64)
            for b in np.flatnonzero(active):
                res = results[b]
                res.step_scores.append(scores[b].copy())
                res.steps_used = t + 1
                kind, idx = select_argmax(scores[b], V)
                if kind == VOCAB and idx == END_ID:
                    active[b] = False
                    continue
                if kind == VOCAB:
                    res.components.append(Component("vocab", idx, answer_vocab[idx]))
                else:
                    res.components.append(Component("ocr", idx, batch.ocr_texts[b][idx]))
                nxt_kind[b], nxt_index[b] = kind, idx
            if not active.any() or t + 1 == T:
                break
            prev_kind = np.concatenate([prev_kind, nxt_kind[:, None]], axis=1)
            prev_index = np.concatenate([prev_index, nxt_index[:, None]], axis=1)
    for res in results:
        res.answer = " ".join(c.surface for c in res.components)
    return results


def decode_answer(model: M4C, batch: Batch, answer_vocab, max_steps=None):
    """Decode a single-scene batch."""
    return decode_batch(model, batch, answer_vocab, max_steps)[0]


def teacher_forced_scores(model: M4C, batch: Batch, realized):
    """Masked per-step scores from one full pass fed the given inputs (single scene)."""
    kinds = np.array([[k for k, _ in realized]], dtype=np.int64)
    idx = np.array([[i for _, i in realized]], dtype=np.int64)
    with no_grad():
        out = model.forward(batch, kinds, idx)
    return masked_scores(out.y_all.data, out.eligible)[0]


def write_predictions(path, ids, results):
    with open(path, "w", encoding="utf-8") as fh:
        for sid, res in zip(ids, results):
            rec = {"id": sid, "answer": res.answer, "trace": [c.trace() for c in res.components],
                   "steps_used": res.steps_used}
            fh.write(json.dumps(rec) + "\n")


def read_predictions(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["id"])] = rec
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"bad prediction record: {exc}", line_no) from None
    return out
