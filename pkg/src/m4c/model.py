"""The pointer-augmented multimodal transformer.

Entities from three modalities (question words, detected objects, OCR tokens)
are projected into a shared ``d``-dimensional space, concatenated with the
decoding-step inputs and run through one transformer stack under a prefix-LM
mask. Decoder outputs are scored against the fixed answer vocabulary (linear
head) and against the scene's OCR tokens (bilinear pointer head).

Joint sequence layout, per scene: ``[question (K) | objects (M) | OCR (N) | steps (T')]``
where ``T' <= T`` decode slots are materialised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import M4CConfig
from .errors import DimensionError, ValidationError
from .featurize import PHOC_DIM, Batch, Manifest
from .numcore import Tensor

VOCAB, OCR = 0, 1
BEGIN_ID, END_ID = 0, 1
MASK_VALUE = -1e9


@dataclass(frozen=True)
class FeatureDims:
    question_mode: str = "learned"
    question_vocab_size: int = 0
    question_dim: int = 768
    obj_dim: int = 2048
    ocr_dim: int = 2048
    word_dim: int = 300

    @classmethod
    def from_manifest(cls, manifest: Manifest):
        return cls(question_mode=manifest.question_mode, question_vocab_size=len(manifest.question_vocab),
                   question_dim=manifest.question_dim, obj_dim=manifest.obj_feat_dim,
                   ocr_dim=manifest.ocr_feat_dim, word_dim=manifest.word_dim)


def truncated_normal(rng, shape, std):
    """Normal(0, std) resampled until every draw lies within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: M4CConfig, dims: FeatureDims, rng):
    """Fresh parameter dict; names are unique and fixed in creation order."""
    d, std = config.d, config.init_std
    params = {}

    def weight(name, *shape):
        params[name] = Tensor(truncated_normal(rng, shape, std), requires_grad=True, name=name)

    def zeros(name, *shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

    def norm(prefix):
        params[prefix + ".g"] = Tensor(np.ones(d), requires_grad=True, name=prefix + ".g")
        zeros(prefix + ".b", d)

    if dims.question_mode == "learned":
        weight("ques.embed", max(dims.question_vocab_size, 1), d)
        weight("ques.pos", max(config.K, 1), d)
    else:
        weight("ques.proj", d, dims.question_dim)
    norm("ques.ln")
    weight("obj.w1", d, dims.obj_dim)
    norm("obj.ln1")
    weight("obj.w2", d, 4)
    norm("obj.ln2")
    weight("ocr.w3", d, dims.word_dim)
    weight("ocr.w4", d, dims.ocr_dim)
    weight("ocr.w5", d, PHOC_DIM)
    norm("ocr.ln1")
    weight("ocr.w6", d, 4)
    norm("ocr.ln2")
    for i in range(config.L):
        p = f"layer{i}"
        for proj in ("q", "k", "v", "o"):
            weight(f"{p}.attn.{proj}.w", d, d)
            zeros(f"{p}.attn.{proj}.b", d)
        norm(f"{p}.ln1")
        weight(f"{p}.ffn.w1", config.ffn_dim, d)
        zeros(f"{p}.ffn.b1", config.ffn_dim)
        weight(f"{p}.ffn.w2", d, config.ffn_dim)
        zeros(f"{p}.ffn.b2", d)
        norm(f"{p}.ln2")
    weight("voc.w", config.V, d)
    zeros("voc.b", config.V)
    weight("ptr.ocr.w", d, d)
    zeros("ptr.ocr.b", d)
    weight("ptr.dec.w", d, d)
    zeros("ptr.dec.b", d)
    weight("dec.pos", config.T, d)
    weight("dec.type", 2, d)
    return params


def build_joint_mask(q_mask, obj_mask, ocr_mask, n_steps):
    """Boolean (B, S, S) matrix; ``[b, i, j]`` is true when slot ``i`` may attend to slot ``j``.

    Entity slots see every valid entity and no decode slot. Decode slot ``t``
    sees every valid entity and decode slots ``1..t``. Padding slots neither
    attend nor are attended.
    """
    q_mask, obj_mask, ocr_mask = (np.atleast_2d(np.asarray(m, dtype=bool)) for m in (q_mask, obj_mask, ocr_mask))
    B = q_mask.shape[0]
    entity = np.concatenate([q_mask, obj_mask, ocr_mask], axis=1)
    E = entity.shape[1]
    S = E + n_steps
    valid = np.concatenate([entity, np.ones((B, n_steps), dtype=bool)], axis=1)
    allowed = np.zeros((B, S, S), dtype=bool)
    allowed[:, :, :E] = entity[:, None, :]
    allowed[:, E:, E:] = np.tril(np.ones((n_steps, n_steps), dtype=bool))
    allowed &= valid[:, :, None]
    return allowed


@dataclass
class ForwardOutput:
    z_ques: Tensor
    z_obj: Tensor
    z_ocr: Tensor
    z_dec: Tensor
    x_ocr: Tensor
    y_voc: Tensor
    y_ocr: Tensor
    y_all: Tensor
    eligible: np.ndarray  # (B, V+N) bool: columns that may be predicted / supervised


class M4C:
    """Parameters plus the forward computation; stateless apart from ``params``."""

    def __init__(self, config: M4CConfig, dims: FeatureDims, params=None, seed=0):
        self.config = config
        self.dims = dims
        if params is None:
            params = init_params(config, dims, np.random.default_rng(seed))
        self.params = params

    # -- parameters ---------------------------------------------------------------
    def state_dict(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, arrays):
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise ValidationError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, arr in arrays.items():
            if arr.shape != self.params[k].shape:
                raise DimensionError(f"checkpoint {k!r} has shape {arr.shape}, model expects {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _ln(self, x, prefix):
        return nc.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"], self.config.ln_eps)

    # -- embeddings ---------------------------------------------------------------
    def embed_question(self, batch: Batch) -> Tensor:
        p = self.params
        mask = batch.q_mask[..., None]
        if self.dims.question_mode == "learned":
            ids = batch.q_ids
            if ids.size and ids.max() >= p["ques.embed"].shape[0]:
                raise ValidationError(f"question token id {ids.max()} outside vocabulary")
            K = ids.shape[1]
            x = nc.gather_rows(p["ques.embed"], ids) + p["ques.pos"][:K]
        else:
            x = nc.linear(Tensor(batch.q_vecs), p["ques.proj"])
        return self._ln(x, "ques.ln") * mask

    def embed_objects(self, batch: Batch) -> Tensor:
        p = self.params
        if batch.obj_fr.shape[-1] != p["obj.w1"].shape[1]:
            raise DimensionError(f"object appearance dim {batch.obj_fr.shape[-1]} != {p['obj.w1'].shape[1]}")
        app = self._ln(nc.linear(Tensor(batch.obj_fr), p["obj.w1"]), "obj.ln1")
        loc = self._ln(nc.linear(Tensor(batch.obj_box), p["obj.w2"]), "obj.ln2")
        return (app + loc) * batch.obj_mask[..., None]

    def embed_ocr(self, batch: Batch) -> Tensor:
        p = self.params
        if batch.ocr_ft.shape[-1] != p["ocr.w3"].shape[1] or batch.ocr_fr.shape[-1] != p["ocr.w4"].shape[1]:
            raise DimensionError("OCR feature dims do not match the model")
        feat = (nc.linear(Tensor(batch.ocr_ft), p["ocr.w3"]) + nc.linear(Tensor(batch.ocr_fr), p["ocr.w4"])
                + nc.linear(Tensor(batch.ocr_phoc), p["ocr.w5"]))
        loc = self._ln(nc.linear(Tensor(batch.ocr_box), p["ocr.w6"]), "ocr.ln2")
        return (self._ln(feat, "ocr.ln1") + loc) * batch.ocr_mask[..., None]

    def step_inputs(self, prev_kind, prev_index, x_ocr: Tensor, ocr_mask) -> Tensor:
        """Decoder inputs for steps ``1..T'`` from the previous predictions.

        The base vector is the vocabulary weight row ``w_voc[i]`` for a vocabulary
        prediction or the OCR embedding ``x_ocr[n]`` for an OCR prediction; step
        position and previous-prediction type embeddings are added.
        """
        p = self.params
        prev_kind = np.asarray(prev_kind, dtype=np.int64)
        prev_index = np.asarray(prev_index, dtype=np.int64)
        B, steps = prev_kind.shape
        if steps > self.config.T:
            raise ValidationError(f"{steps} decode steps exceed T={self.config.T}")
        V = self.config.V
        N = x_ocr.shape[1]
        is_voc = prev_kind == VOCAB
        is_ocr = prev_kind == OCR
        if not np.all(is_voc | is_ocr):
            raise ValidationError("prev_kind entries must be 0 (vocab) or 1 (ocr)")
        if np.any(is_voc & ((prev_index < 0) | (prev_index >= V))):
            raise ValidationError("vocabulary index out of range in step inputs")
        if np.any(is_ocr):
            bad = (prev_index < 0) | (prev_index >= N)
            if np.any(is_ocr & bad):
                raise ValidationError("OCR index out of range in step inputs")
            rows, cols = np.nonzero(is_ocr)
            if not np.all(np.asarray(ocr_mask)[rows, prev_index[rows, cols]] > 0):
                raise ValidationError("step input points at a padding OCR slot")
        onehot_v = np.zeros((B, steps, V))
        onehot_o = np.zeros((B, steps, N))
        b_idx, t_idx = np.nonzero(is_voc)
        onehot_v[b_idx, t_idx, prev_index[b_idx, t_idx]] = 1.0
        b_idx, t_idx = np.nonzero(is_ocr)
        onehot_o[b_idx, t_idx, prev_index[b_idx, t_idx]] = 1.0
        base = nc.matmul(Tensor(onehot_v), p["voc.w"])
        if N:
            base = base + nc.matmul(Tensor(onehot_o), x_ocr)
        return base + p["dec.pos"][:steps] + nc.gather_rows(p["dec.type"], prev_kind)

    # -- transformer --------------------------------------------------------------
    def transformer(self, x: Tensor, allowed, train=False, rng=None) -> Tensor:
        cfg, p = self.config, self.params
        B, S, d = x.shape
        h = cfg.heads
        dh = d // h
        add_mask = np.where(allowed, 0.0, MASK_VALUE)[:, None, :, :]
        row_keep = allowed.any(axis=-1)[:, None, :, None].astype(np.float64)

        def split(t):
            return t.reshape(B, S, h, dh).transpose(0, 2, 1, 3)

        for i in range(cfg.L):
            pre = f"layer{i}"
            q = split(nc.linear(x, p[pre + ".attn.q.w"], p[pre + ".attn.q.b"]))
            k = split(nc.linear(x, p[pre + ".attn.k.w"], p[pre + ".attn.k.b"]))
            v = split(nc.linear(x, p[pre + ".attn.v.w"], p[pre + ".attn.v.b"]))
            ctx = nc.scaled_dot_attention(q, k, v, add_mask, row_keep).transpose(0, 2, 1, 3).reshape(B, S, d)
            att = nc.linear(ctx, p[pre + ".attn.o.w"], p[pre + ".attn.o.b"])
            x = self._ln(x + nc.dropout(att, cfg.dropout, rng, train), pre + ".ln1")
            hid = nc.gelu(nc.linear(x, p[pre + ".ffn.w1"], p[pre + ".ffn.b1"]))
            ffn = nc.linear(hid, p[pre + ".ffn.w2"], p[pre + ".ffn.b2"])
            x = self._ln(x + nc.dropout(ffn, cfg.dropout, rng, train), pre + ".ln2")
        return x

    # -- heads --------------------------------------------------------------------
    def vocab_scores(self, z_dec: Tensor) -> Tensor:
        """Linear vocabulary head, ``w_voc[i] . z + b_voc[i]`` for every word ``i``."""
        return nc.linear(z_dec, self.params["voc.w"], self.params["voc.b"])

    def pointer_scores(self, z_dec: Tensor, z_ocr: Tensor) -> Tensor:
        """Bilinear copy scores ``(W_ocr z_ocr[n] + b_ocr) . (W_dec z_dec + b_dec)``, shape (B, T', N)."""
        p = self.params
        ocr = nc.linear(z_ocr, p["ptr.ocr.w"], p["ptr.ocr.b"])
        dec = nc.linear(z_dec, p["ptr.dec.w"], p["ptr.dec.b"])
        return nc.matmul(dec, ocr.swapaxes(-1, -2))

    def eligible_columns(self, ocr_mask):
        """(B, V+N) bool mask of predictable columns under the ablation flags."""
        cfg = self.config
        ocr_mask = np.asarray(ocr_mask, dtype=bool)
        B = ocr_mask.shape[0]
        voc = np.full((B, cfg.V), cfg.enable_fixed_vocab, dtype=bool)
        voc[:, END_ID] = True
        voc[:, BEGIN_ID] = False
        ocr = ocr_mask & cfg.enable_ocr_copy
        return np.concatenate([voc, ocr], axis=1)

    # -- full pass ----------------------------------------------------------------
    def forward(self, batch: Batch, prev_kind, prev_index, train=False, rng=None) -> ForwardOutput:
        """Encode ``batch`` and score every materialised decode step.

        ``prev_kind``/``prev_index`` (B, T') give the input of each step: step 1
        is normally ``(VOCAB, BEGIN_ID)``.
        """
        x_q = self.embed_question(batch)
        x_obj = self.embed_objects(batch)
        x_ocr = self.embed_ocr(batch)
        x_dec = self.step_inputs(prev_kind, prev_index, x_ocr, batch.ocr_mask)
        K, M, N = x_q.shape[1], x_obj.shape[1], x_ocr.shape[1]
        steps = x_dec.shape[1]
        x = nc.concat([x_q, x_obj, x_ocr, x_dec], axis=1)
        allowed = build_joint_mask(batch.q_mask, batch.obj_mask, batch.ocr_mask, steps)
        z = self.transformer(x, allowed, train=train, rng=rng)
        z_ques, z_obj = z[:, :K], z[:, K:K + M]
        z_ocr, z_dec = z[:, K + M:K + M + N], z[:, K + M + N:]
        y_voc = self.vocab_scores(z_dec)
        y_ocr = self.pointer_scores(z_dec, z_ocr)
        y_all = nc.concat([y_voc, y_ocr], axis=-1)
        return ForwardOutput(z_ques=z_ques, z_obj=z_obj, z_ocr=z_ocr, z_dec=z_dec, x_ocr=x_ocr, y_voc=y_voc,
                             y_ocr=y_ocr, y_all=y_all, eligible=self.eligible_columns(batch.ocr_mask))


def masked_scores(y_all, eligible):
    """Numpy scores with ineligible columns set to ``-inf``; ``eligible`` is (B, V+N)."""
    y = np.asarray(getattr(y_all, "data", y_all))
    mask = np.asarray(eligible, dtype=bool)
    if y.ndim == 3:
        mask = mask[:, None, :]
    return np.where(mask, y, -np.inf)
