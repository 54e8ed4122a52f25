"""Teacher-forced training of the iterative decoder."""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .config import LrSchedule, RunConfig
from .decode import decode_batch
from .errors import TrainingError, ValidationError
from .featurize import BEGIN, END, Manifest, make_batch, normalize_token
from .metrics import get_metric
from .model import BEGIN_ID, END_ID, OCR, VOCAB, M4C

log = logging.getLogger(__name__)


def tokenize_answer(answer: str):
    return answer.lower().split()


@dataclass
class StepTargets:
    """Supervision for one answer: rows are decode steps, columns ``[vocab | ocr]``."""

    targets: np.ndarray      # (T, V+N) 0/1
    step_mask: np.ndarray    # (T,) 1 for supervised steps
    prev_kind: np.ndarray    # (T,) teacher-forced input kind per step
    prev_index: np.ndarray   # (T,)
    n_steps: int
    words: list


def build_step_targets(words, vocab_index, ocr_texts, config):
    """Multi-label targets and teacher inputs for ``words``; ``None`` when some word is unreachable.

    A word is positive for its vocabulary entry (if present and the fixed
    vocabulary is enabled) and for every OCR slot with the same normalized text
    (if copying is enabled). The step after the last word targets ``<end>``.
    The next step's input prefers the lowest-index matching OCR token.
    """
    T, V, N = config.T, config.V, config.N
    if not words:
        raise ValidationError("answer has no words")
    words = list(words)[: T - 1]
    texts = [normalize_token(t) for t in ocr_texts[:N]]
    targets = np.zeros((T, V + N))
    step_mask = np.zeros(T)
    prev_kind = np.full(T, VOCAB, dtype=np.int64)
    prev_index = np.full(T, END_ID, dtype=np.int64)
    prev_index[0] = BEGIN_ID
    for t, w in enumerate(words):
        hit = False
        vid = vocab_index.get(w)
        if config.enable_fixed_vocab and vid is not None and vid not in (BEGIN_ID, END_ID):
            targets[t, vid] = 1.0
            hit = True
        ocr_hits = [n for n, txt in enumerate(texts) if txt == w] if config.enable_ocr_copy else []
        for n in ocr_hits:
            targets[t, V + n] = 1.0
            hit = True
        if not hit:
            return None
        step_mask[t] = 1.0
        if ocr_hits:
            prev_kind[t + 1], prev_index[t + 1] = OCR, ocr_hits[0]
        else:
            prev_kind[t + 1], prev_index[t + 1] = VOCAB, vid
    end_step = len(words)
    targets[end_step, END_ID] = 1.0
    step_mask[end_step] = 1.0
    return StepTargets(targets, step_mask, prev_kind, prev_index, end_step + 1, words)


def sequence_loss(y_all, targets, loss_mask):
    """Masked sigmoid BCE; mean over each example's unmasked cells, then over the batch."""
    elem = nc.sigmoid_bce_with_logits(y_all, targets, loss_mask, reduction="none")
    counts = loss_mask.reshape(len(loss_mask), -1).sum(axis=1)
    if np.any(counts == 0):
        raise ValidationError("an example in the batch has no supervised cells")
    per_example = elem.sum(axis=(1, 2)) * (1.0 / counts)
    return per_example.mean()


def lr_at_iter(it, schedule: LrSchedule):
    """Linear warm-up from ``warmup_factor * base_lr``, then step decay."""
    if it < 0:
        raise ValidationError(f"iteration must be >= 0, got {it}")
    lr = schedule.base_lr * schedule.decay_factor ** bisect.bisect_right(schedule.decay_steps, it)
    if it < schedule.warmup_iters:
        alpha = it / schedule.warmup_iters
        lr *= schedule.warmup_factor * (1.0 - alpha) + alpha
    return lr


# -- training data ---------------------------------------------------------------

@dataclass
class TrainingSet:
    batch: object            # featurize.Batch over the trainable scenes
    options: list            # per scene: list of StepTargets (one per reachable answer)
    skipped: int = 0         # scenes without any reachable answer
    skipped_ids: list = field(default_factory=list)


def prepare_training_set(scenes, manifest: Manifest, config):
    vocab_index = {w: i for i, w in enumerate(manifest.answer_vocab)}
    kept, options, skipped_ids = [], [], []
    for s in scenes:
        texts = [t.norm_text for t in s.ocr[: config.N]]
        opts = []
        for ans in s.answers:
            words = tokenize_answer(ans)
            if not words:
                continue
            st = build_step_targets(words, vocab_index, texts, config)
            if st is not None:
                opts.append(st)
        if opts:
            kept.append(s)
            options.append(opts)
        else:
            skipped_ids.append(s.id)
    if skipped_ids:
        log.warning("skipped %d/%d unreachable training examples", len(skipped_ids), len(scenes))
    batch = make_batch(kept, manifest, config.caps)
    return TrainingSet(batch=batch, options=options, skipped=len(skipped_ids), skipped_ids=skipped_ids)


def assemble_targets(options, index, rng, ocr_mask, eligible):
    """Stack one sampled answer per example; returns arrays trimmed to the longest answer."""
    chosen = []
    for i in index:
        opts = options[i]
        chosen.append(opts[int(rng.integers(len(opts)))] if len(opts) > 1 else opts[0])
    steps = max(st.n_steps for st in chosen)
    targets = np.stack([st.targets[:steps] for st in chosen])
    step_mask = np.stack([st.step_mask[:steps] for st in chosen])
    kinds = np.stack([st.prev_kind[:steps] for st in chosen])
    idx = np.stack([st.prev_index[:steps] for st in chosen])
    loss_mask = step_mask[:, :, None] * eligible[:, None, :]
    return targets, loss_mask, kinds, idx


# -- loop --------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: M4C
    losses: list
    log_lines: list
    skipped: int
    best_metric: float | None = None
    best_iter: int | None = None


def evaluate_model(model, scenes, manifest, metric="exact", max_steps=None, batch_size=256):
    """Mean metric of greedy decoding over ``scenes``."""
    fn = get_metric(metric)
    if not scenes:
        return 0.0
    total = 0.0
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        batch = make_batch(chunk, manifest, model.config.caps)
        for scene, res in zip(chunk, decode_batch(model, batch, manifest.answer_vocab, max_steps)):
            total += fn(res.answer, scene.answers)
    return total / len(scenes)


def train_loop(model: M4C, train_scenes, manifest: Manifest, run: RunConfig, val_scenes=None,
               metric="exact", log_path=None, progress=None):
    """Train ``model`` in place and return the best-on-validation snapshot.

    Each iteration samples a batch (seeded shuffle, cycling epochs), runs a
    teacher-forced forward pass, applies the sequence loss, clips the global
    gradient norm and takes an Adam step at ``lr_at_iter``.
    """
    cfg = model.config
    if len(manifest.answer_vocab) != cfg.V:
        raise ValidationError(f"answer vocabulary has {len(manifest.answer_vocab)} entries, config V={cfg.V}")
    if not train_scenes:
        raise ValidationError("training set is empty")
    data = prepare_training_set(train_scenes, manifest, cfg)
    n = len(data.options)
    if n == 0 and run.schedule.max_iters > 0:
        raise TrainingError("no trainable examples: every answer is unreachable")
    rng = np.random.default_rng(run.seed)
    drop_rng = np.random.default_rng(run.seed + 1)
    state = nc.AdamState(beta1=run.adam_beta1, beta2=run.adam_beta2, eps=run.adam_eps)
    eligible_all = model.eligible_columns(data.batch.ocr_mask)
    val_scenes = val_scenes or []
    if run.val_limit:
        val_scenes = val_scenes[: run.val_limit]

    losses, log_lines = [], []
    best_metric, best_iter, best_state = None, None, None
    order, cursor = np.array([], dtype=np.int64), 0
    window = []

    def write_log(line):
        log_lines.append(line)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def checkpoint_eval(it):
        nonlocal best_metric, best_iter, best_state
        train_loss = float(np.mean(window)) if window else float("nan")
        window.clear()
        val = evaluate_model(model, val_scenes, manifest, metric) if val_scenes else float("nan")
        lr = lr_at_iter(min(it, max(run.schedule.max_iters - 1, 0)), run.schedule)
        write_log(f"{it} {lr:.6g} {train_loss:.6f} {val:.6f}")
        if val_scenes and (best_metric is None or val > best_metric):
            best_metric, best_iter = val, it
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        if progress is not None:
            progress(it, train_loss, val)

    for it in range(run.schedule.max_iters):
        while len(order) - cursor < run.batch_size:
            order = np.concatenate([order[cursor:], rng.permutation(n)])
            cursor = 0
        index = order[cursor:cursor + run.batch_size]
        cursor += run.batch_size

        batch = data.batch.take(index)
        targets, loss_mask, kinds, idx = assemble_targets(data.options, index, rng, batch.ocr_mask,
                                                          eligible_all[index])
        model.zero_grad()
        out = model.forward(batch, kinds, idx, train=True, rng=drop_rng)
        loss = sequence_loss(out.y_all, targets, loss_mask)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at iteration {it}; batch ids {batch.ids}")
        loss.backward()
        grads = {k: p.grad for k, p in model.params.items()}
        grads = nc.clip_global_grad_norm(grads, run.clip_norm)
        nc.adam_step(model.params, grads, state, lr_at_iter(it, run.schedule))
        losses.append(value)
        window.append(value)
        if run.eval_interval and (it + 1) % run.eval_interval == 0:
            checkpoint_eval(it + 1)

    if run.schedule.max_iters and (not run.eval_interval or run.schedule.max_iters % run.eval_interval):
        checkpoint_eval(run.schedule.max_iters)
    model.zero_grad()
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model=model, losses=losses, log_lines=log_lines, skipped=data.skipped,
                       best_metric=best_metric, best_iter=best_iter)


__all__ = [
    "BEGIN", "END", "tokenize_answer", "StepTargets", "build_step_targets", "sequence_loss", "lr_at_iter",
    "prepare_training_set", "train_loop", "evaluate_model", "TrainResult",
]
