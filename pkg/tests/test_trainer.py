"""Optimizer against a scalar reference, batch sampling, the training
loop end to end, and resume equivalence."""

import math
import os

import numpy as np
import pytest

from dign.errors import ParseError, TrainingError
from dign.generator import build_generator, load_checkpoint
from dign.losses import FeatureExtractor, LossWeights, total_loss
from dign.rng import Stream, derive_seed
from dign.tensor import OpGraph, Tensor, add, backward, constant, mul, zero_grads
from dign.trainer import (AdamState, ImageFolder, MaskFolder, TrainConfig,
                          adam_step, make_batch, train, train_step, worker_cap)


def scalar_adam_reference(lr, b1, b2, eps, grads):
    """Plain-float Adam, transcribed from the update rule."""
    p = m = v = 0.0
    p = 1.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(p)
    return out


def one_param(value=1.0):
    t = Tensor(np.full((1, 1, 1, 1), value), requires_grad=True,
               dtype=np.float64)
    return [("p", t)], t


def test_adam_matches_scalar_reference_1000_steps():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=1000)
    named, t = one_param(1.0)
    state = AdamState(lr=0.01, beta1=0.9, beta2=0.999, epsilon=1e-8)
    got = []
    for g in grads:
        adam_step(named, state, grads=[np.full((1, 1, 1, 1), g)])
        got.append(t.data[0, 0, 0, 0])
    want = scalar_adam_reference(0.01, 0.9, 0.999, 1e-8, grads)
    np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)


def test_first_step_magnitude_is_about_lr():
    named, t = one_param(0.0)
    state = AdamState(lr=0.1)
    adam_step(named, state, grads=[np.ones((1, 1, 1, 1))])
    # bias correction makes mhat/(sqrt(vhat)+eps) ~ 1 on step one
    np.testing.assert_allclose(abs(t.data[0, 0, 0, 0]), 0.1, rtol=1e-6)


def test_quadratic_convergence():
    named, t = one_param(3.0)
    state = AdamState(lr=0.1)
    for _ in range(100):
        adam_step(named, state, grads=[2.0 * t.data])
    assert abs(t.data[0, 0, 0, 0]) < 0.5


def test_zero_gradient_is_stationary_but_counts():
    named, t = one_param(2.5)
    state = AdamState()
    adam_step(named, state, grads=[np.zeros((1, 1, 1, 1))])
    adam_step(named, state, grads=[None])
    assert t.data[0, 0, 0, 0] == 2.5
    assert state.t == 2


def test_nonfinite_gradient_rejected_before_any_state_change():
    named, t = one_param(1.0)
    state = AdamState()
    adam_step(named, state, grads=[np.ones((1, 1, 1, 1))])
    m_before = {k: v.copy() for k, v in state.m.items()}
    with pytest.raises(TrainingError, match="p"):
        adam_step(named, state, grads=[np.full((1, 1, 1, 1), np.nan)])
    assert state.t == 1
    for k in m_before:
        np.testing.assert_array_equal(state.m[k], m_before[k])


def test_gradient_shape_mismatch():
    named, _ = one_param()
    with pytest.raises(TrainingError):
        adam_step(named, AdamState(), grads=[np.ones((1, 2, 1, 1))])


def test_adam_state_validation():
    with pytest.raises(TrainingError):
        AdamState(lr=0.0)
    with pytest.raises(TrainingError):
        AdamState(beta1=1.0)


def test_worker_cap(monkeypatch):
    monkeypatch.delenv("DIGN_THREADS", raising=False)
    assert worker_cap(4) == 4
    assert worker_cap(0) == 1
    monkeypatch.setenv("DIGN_THREADS", "3")
    assert worker_cap(8) == 3
    assert worker_cap(2) == 2
    for bad in ("0", "-2", "many"):
        monkeypatch.setenv("DIGN_THREADS", bad)
        with pytest.raises(ParseError):
            worker_cap(1)


def tiny_cfg(image_corpus, mask_corpus, out_dir, **over):
    base = dict(image_dir=image_corpus, mask_dir=mask_corpus, out_dir=out_dir,
                resolution=32, batch_size=2, iterations=4,
                channel_scale=1 / 16, lr=1e-3, checkpoint_interval=2,
                seed=5, precision="f64")
    base.update(over)
    return TrainConfig(**base)


def test_train_config_validation(image_corpus, mask_corpus, tmp_path):
    cfg = tiny_cfg(image_corpus, mask_corpus, str(tmp_path))
    cfg.validate()
    for field, bad in (("resolution", 50), ("precision", "f16"),
                       ("iterations", -1), ("channel_scale", 0.0),
                       ("batch_size", 0), ("checkpoint_interval", 0)):
        broken = tiny_cfg(image_corpus, mask_corpus, str(tmp_path),
                          **{field: bad})
        with pytest.raises(TrainingError):
            broken.validate()


def test_make_batch_shapes_and_determinism(image_corpus, mask_corpus, tmp_path):
    cfg = tiny_cfg(image_corpus, mask_corpus, str(tmp_path), batch_size=3)
    images = ImageFolder(image_corpus, 32)
    masks = MaskFolder(mask_corpus, 32)
    a_img, a_bits = make_batch(images, masks, Stream(99), cfg)
    b_img, b_bits = make_batch(images, masks, Stream(99), cfg)
    np.testing.assert_array_equal(a_img, b_img)
    np.testing.assert_array_equal(a_bits, b_bits)
    assert a_img.shape == (3, 3, 32, 32) and a_bits.shape == (3, 1, 32, 32)
    assert a_img.min() >= 0.0 and a_img.max() <= 1.0
    assert set(np.unique(a_bits)) <= {0.0, 1.0}
    c_img, _ = make_batch(images, masks, Stream(100), cfg)
    assert not np.array_equal(a_img, c_img)


def test_folder_skips_unreadable_with_warning(tmp_path, image_corpus, caplog):
    import shutil
    d = tmp_path / "mixed"
    d.mkdir()
    shutil.copy(os.path.join(image_corpus, "img_0.png"), d / "ok.png")
    (d / "broken.png").write_bytes(b"\x89PNG not really")
    (d / "ignored.txt").write_text("not an image")
    with caplog.at_level("WARNING", logger="dign.trainer"):
        folder = ImageFolder(str(d), 32)
    assert len(folder) == 1
    assert any("broken.png" in r.message for r in caplog.records)


def test_folder_empty_errors(tmp_path):
    d = tmp_path / "empty"
    d.mkdir()
    with pytest.raises(TrainingError):
        ImageFolder(str(d), 32)
    with pytest.raises(TrainingError):
        ImageFolder(str(tmp_path / "absent"), 32)


def test_train_writes_metrics_and_checkpoint(image_corpus, mask_corpus, tmp_path):
    out = str(tmp_path / "run")
    cfg = tiny_cfg(image_corpus, mask_corpus, out)
    summary = train(cfg)
    assert summary["iterations"] == 4
    rows = open(summary["metrics"]).read().splitlines()
    assert len(rows) == 4
    for i, row in enumerate(rows, start=1):
        cols = row.split("\t")
        assert len(cols) == 6
        assert int(cols[0]) == i
        assert all(math.isfinite(float(c)) for c in cols[1:])
    gen, opt, it = load_checkpoint(summary["checkpoint"])
    assert it == 4
    assert any(k.startswith("m.") for k in opt)
    assert any(k.startswith("v.") for k in opt)


def test_zero_iterations_leaves_initialization(image_corpus, mask_corpus, tmp_path):
    out = str(tmp_path / "run0")
    cfg = tiny_cfg(image_corpus, mask_corpus, out, iterations=0)
    summary = train(cfg)
    gen, opt, it = load_checkpoint(summary["checkpoint"])
    assert it == 0 and opt == {}
    fresh = build_generator(cfg.generator_config(),
                            derive_seed(cfg.seed, "init"), dtype=np.float64)
    for (n1, t1), (n2, t2) in zip(gen.parameters(), fresh.parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(t1.data, t2.data)


def test_resume_reproduces_uninterrupted_run_bitwise(image_corpus, mask_corpus,
                                                     tmp_path):
    full_out = str(tmp_path / "full")
    train(tiny_cfg(image_corpus, mask_corpus, full_out, iterations=4))

    part_out = str(tmp_path / "part")
    train(tiny_cfg(image_corpus, mask_corpus, part_out, iterations=2))
    resumed = tiny_cfg(image_corpus, mask_corpus, part_out, iterations=4)
    train(resumed, resume=os.path.join(part_out, "checkpoint.bin"))

    full_rows = open(os.path.join(full_out, "metrics.tsv")).read().splitlines()
    part_rows = open(os.path.join(part_out, "metrics.tsv")).read().splitlines()
    assert full_rows[2:] == part_rows[2:]  # iterations 3 and 4 line up
    a = open(os.path.join(full_out, "checkpoint.bin"), "rb").read()
    b = open(os.path.join(part_out, "checkpoint.bin"), "rb").read()
    assert a == b


def test_resume_precision_mismatch(image_corpus, mask_corpus, tmp_path):
    out = str(tmp_path / "p")
    train(tiny_cfg(image_corpus, mask_corpus, out, iterations=1))
    wrong = tiny_cfg(image_corpus, mask_corpus, out, iterations=2,
                     precision="f32")
    with pytest.raises(TrainingError, match="precision"):
        train(wrong, resume=os.path.join(out, "checkpoint.bin"))


def test_every_parameter_gets_gradient_within_10_iterations(image_corpus,
                                                            mask_corpus,
                                                            tmp_path):
    cfg = tiny_cfg(image_corpus, mask_corpus, str(tmp_path))
    gen = build_generator(cfg.generator_config(), seed=1, dtype=np.float64)
    fx = FeatureExtractor.default(seed=23, dtype=np.float64)
    images = ImageFolder(image_corpus, 32)
    masks = MaskFolder(mask_corpus, 32)
    named = gen.parameters()
    touched = {n: False for n, _ in named}
    for it in range(1, 11):
        imgs, bits = make_batch(images, masks,
                                Stream(derive_seed(5, "batch", it)), cfg)
        x, m = constant(imgs), constant(bits)
        inv = constant(1.0 - bits)
        with OpGraph() as g:
            out = gen.forward(x, m, mode="train")
            comp = add(mul(x, m), mul(out.features, inv))
            loss, _ = total_loss(x, out.features, comp, m, fx, cfg.weights)
        backward(g, loss)
        for n, t in named:
            if t.grad is not None and np.any(t.grad != 0.0):
                touched[n] = True
        zero_grads([t for _, t in named])
        if all(touched.values()):
            break
    dead = [n for n, hit in touched.items() if not hit]
    assert not dead, f"parameters with no gradient after 10 iterations: {dead}"


def test_nonfinite_loss_aborts_with_checkpoint_intact(image_corpus, mask_corpus,
                                                      tmp_path, monkeypatch):
    out = str(tmp_path / "abort")
    cfg = tiny_cfg(image_corpus, mask_corpus, out, iterations=3)

    import dign.trainer as tr
    real_build = tr.build_generator

    def poisoned(*args, **kwargs):
        gen = real_build(*args, **kwargs)
        name, t = gen.parameters()[0]
        t.data.flat[0] = np.nan
        return gen

    monkeypatch.setattr(tr, "build_generator", poisoned)
    with pytest.raises(TrainingError, match="non-finite"):
        train(cfg)
    # the initialization checkpoint written before the loop survives
    gen, _, it = load_checkpoint(os.path.join(out, "checkpoint.bin"))
    assert it == 0


def test_train_step_returns_breakdown(image_corpus, mask_corpus, tmp_path):
    cfg = tiny_cfg(image_corpus, mask_corpus, str(tmp_path))
    gen = build_generator(cfg.generator_config(), seed=2, dtype=np.float64)
    fx = FeatureExtractor.default(seed=23, dtype=np.float64)
    images = ImageFolder(image_corpus, 32)
    masks = MaskFolder(mask_corpus, 32)
    imgs, bits = make_batch(images, masks, Stream(1), cfg)
    state = AdamState(lr=1e-3)
    before = gen.parameters()[0][1].data.copy()
    terms = train_step(gen, imgs, bits, fx, cfg.weights, state)
    assert set(terms) == {"hole_l1", "valid_l1", "perc", "style", "total"}
    assert all(math.isfinite(v) for v in terms.values())
    assert state.t == 1
    assert not np.array_equal(gen.parameters()[0][1].data, before)
    # gradients were cleared for the next step
    assert all(t.grad is None or np.all(t.grad == 0)
               for _, t in gen.parameters())
