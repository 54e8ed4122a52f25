import numpy as np
import pytest

from m4c.config import M4CConfig
from m4c.featurize import DetectedObjectInput, Manifest, OcrTokenInput, ScenePack, make_batch
from m4c.model import M4C, FeatureDims

TINY_VOCAB = ["<begin>", "<end>", "light", "red", "blue", "open"]
TINY_QUESTION = ["what", "is", "the", "brand", "color"]
OCR_POOL = ["bud", "light", "exit", "coors", "sale", "open", "7up", "1:45"]


def tiny_manifest(answer_vocab=TINY_VOCAB):
    return Manifest(question_mode="learned", obj_feat_dim=5, ocr_feat_dim=4, word_dim=6,
                    question_vocab=list(TINY_QUESTION), answer_vocab=list(answer_vocab))


def tiny_config(**kw):
    base = dict(d=8, L=1, heads=2, ffn_dim=16, K=3, M=2, N=3, T=3, V=len(TINY_VOCAB), dropout=0.0)
    base.update(kw)
    return M4CConfig(**base)


def random_scene(rng, sid, n_q, n_obj, n_ocr, manifest, texts=None, answers=("light",)):
    W, H = float(rng.integers(50, 200)), float(rng.integers(50, 200))

    def box():
        x0, x1 = sorted(rng.uniform(0, W, 2))
        y0, y1 = sorted(rng.uniform(0, H, 2))
        return (x0, y0, x1, y1)

    if texts is None:
        texts = [OCR_POOL[i] for i in rng.choice(len(OCR_POOL), size=n_ocr, replace=False)]
    objs = [DetectedObjectInput(box(), rng.standard_normal(manifest.obj_feat_dim)) for _ in range(n_obj)]
    ocr = [OcrTokenInput(t, box(), rng.standard_normal(manifest.ocr_feat_dim), rng.standard_normal(manifest.word_dim))
           for t in texts]
    q = [manifest.question_vocab[i] for i in rng.integers(0, len(manifest.question_vocab), size=n_q)]
    return ScenePack(id=sid, image_size=(W, H), objects=objs, ocr=ocr, answers=list(answers), question_tokens=q)


def tiny_setup(seed=0, n_scenes=3, **cfg_kw):
    """Model, batch, scenes and manifest for a tiny instance with some padding in every modality."""
    rng = np.random.default_rng(seed)
    man = tiny_manifest()
    cfg = tiny_config(**cfg_kw)
    scenes = []
    for i in range(n_scenes):
        n_q = int(rng.integers(1, cfg.K + 1))
        n_obj = int(rng.integers(0, cfg.M + 1))
        n_ocr = int(rng.integers(1, cfg.N + 1))
        scenes.append(random_scene(rng, f"t{i}", n_q, n_obj, n_ocr, man, answers=("red light",)))
    scenes[0] = random_scene(rng, "t0", cfg.K - 1, cfg.M - 1, cfg.N - 1, man, answers=("red light",))
    model = M4C(cfg, FeatureDims.from_manifest(man), seed=seed)
    return model, make_batch(scenes, man, cfg.caps), scenes, man


def teacher_loss(model, batch, scenes, manifest):
    """Closure computing the teacher-forced sequence loss for ``batch``."""
    from m4c.train import assemble_targets, prepare_training_set, sequence_loss

    data = prepare_training_set(scenes, manifest, model.config)
    assert data.skipped == 0
    index = np.arange(len(scenes))
    eligible = model.eligible_columns(batch.ocr_mask)
    targets, loss_mask, kinds, idx = assemble_targets(data.options, index, np.random.default_rng(0),
                                                      batch.ocr_mask, eligible)

    def loss(_inputs=None):
        out = model.forward(batch, kinds, idx)
        return sequence_loss(out.y_all, targets, loss_mask)

    return loss


@pytest.fixture
def tiny():
    return tiny_setup(0)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
