"""Loss terms against scalar-loop oracles, the Gram algebra, the
composite identities, and extractor persistence."""

import numpy as np
import pytest

from dign.errors import ContractError
from dign.gradcheck import grad_check
from dign.losses import (FeatureExtractor, LossWeights, gram, masked_l1,
                         perceptual_loss, style_loss, total_loss)
from dign.tensor import Tensor, add, constant, mul, scale, sum_all

from conftest import holed_mask, proj_loss, rand_tensor


def l1_oracle(x, out, m):
    """Flat-loop reference for the split L1 terms."""
    hole_sum = valid_sum = 0.0
    hole_n = valid_n = 0
    mb = np.broadcast_to(m, (x.shape[0], 1, x.shape[2], x.shape[3]))
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            for i in range(x.shape[2]):
                for j in range(x.shape[3]):
                    d = abs(x[n, c, i, j] - out[n, c, i, j])
                    if mb[n, 0, i, j] == 0:
                        hole_sum += d
                        hole_n += 1
                    else:
                        valid_sum += d
                        valid_n += 1
    return (hole_sum / hole_n if hole_n else 0.0,
            valid_sum / valid_n if valid_n else 0.0)


def gram_oracle(f):
    n, c, h, w = f.shape
    out = np.zeros((n, 1, c, c))
    for b in range(n):
        for i in range(c):
            for j in range(c):
                out[b, 0, i, j] = (f[b, i] * f[b, j]).sum() / (c * h * w)
    return out


def test_masked_l1_matches_loop_oracle():
    x = rand_tensor((2, 3, 6, 6), 60)
    out = rand_tensor((2, 3, 6, 6), 61)
    m = holed_mask(6, 6, (1, 4, 2, 5), n=2)
    hole, valid = masked_l1(x, out, m)
    oh, ov = l1_oracle(x.data, out.data, m)
    np.testing.assert_allclose(hole.item(), oh, rtol=1e-12)
    np.testing.assert_allclose(valid.item(), ov, rtol=1e-12)


def test_masked_l1_constant_residual_all_hole():
    x = Tensor(np.full((1, 3, 4, 4), 0.5), dtype=np.float64)
    out = Tensor(np.zeros((1, 3, 4, 4)), dtype=np.float64)
    hole, valid = masked_l1(x, out, np.zeros((1, 1, 4, 4)))
    assert hole.item() == 0.5
    assert valid.item() == 0.0  # empty region contributes exact zero


def test_masked_l1_empty_hole():
    x = rand_tensor((1, 2, 4, 4), 62)
    out = rand_tensor((1, 2, 4, 4), 63)
    hole, valid = masked_l1(x, out, np.ones((1, 1, 4, 4)))
    assert hole.item() == 0.0
    np.testing.assert_allclose(valid.item(),
                               np.abs(x.data - out.data).mean(), rtol=1e-12)


def test_gram_matches_double_loop_and_is_symmetric_psd():
    for seed in range(20):
        f = rand_tensor((2, 4, 5, 5), 100 + seed)
        g = gram(f).data
        np.testing.assert_allclose(g, gram_oracle(f.data), rtol=1e-10)
        np.testing.assert_allclose(g, g.transpose(0, 1, 3, 2), rtol=1e-12)
        for b in range(2):
            eig = np.linalg.eigvalsh(g[b, 0])
            assert eig.min() > -1e-10, eig


def test_style_ignores_spatial_permutation():
    f = rand_tensor((1, 3, 4, 4), 64, requires_grad=False)
    rng = np.random.default_rng(7)
    perm = rng.permutation(16)
    shuffled = f.data.reshape(1, 3, 16)[:, :, perm].reshape(1, 3, 4, 4)
    fx = FeatureExtractor.identity()
    loss = style_loss(Tensor(shuffled, dtype=np.float64), f, fx)
    np.testing.assert_allclose(loss.item(), 0.0, atol=1e-12)
    # the same permutation is visible to the perceptual term
    assert perceptual_loss(Tensor(shuffled, dtype=np.float64), f,
                           fx).item() > 0.01


def test_perceptual_identity_extractor_is_mean_l1():
    a = rand_tensor((2, 3, 5, 5), 65)
    b = rand_tensor((2, 3, 5, 5), 66)
    got = perceptual_loss(a, b, FeatureExtractor.identity())
    np.testing.assert_allclose(got.item(), np.abs(a.data - b.data).mean(),
                               rtol=1e-12)


def test_all_terms_zero_on_identical_inputs():
    x = rand_tensor((1, 3, 8, 8), 67)
    m = holed_mask(8, 8, (2, 6, 2, 6))
    fx = FeatureExtractor.default(seed=23, dtype=np.float64)
    total, bd = total_loss(x, x, x, m, fx, LossWeights())
    assert total.item() == 0.0
    assert all(v == 0.0 for v in bd.values())


def test_weight_selection_reduces_to_hole_l1():
    x = rand_tensor((1, 3, 6, 6), 68)
    out = rand_tensor((1, 3, 6, 6), 69)
    m = holed_mask(6, 6, (1, 5, 1, 5))
    fx = FeatureExtractor.identity()
    total, _ = total_loss(x, out, out, m, fx, LossWeights(1, 0, 0, 0))
    hole, _ = masked_l1(x, out, m)
    assert total.item() == hole.item()


def test_total_equals_sum_of_independent_terms():
    # fixed seed-13 scenario with the default weights
    x = rand_tensor((2, 3, 8, 8), 13)
    out = rand_tensor((2, 3, 8, 8), 14)
    comp = rand_tensor((2, 3, 8, 8), 15)
    m = holed_mask(8, 8, (2, 6, 3, 7), n=2)
    fx = FeatureExtractor.default(seed=23, dtype=np.float64)
    w = LossWeights()
    total, bd = total_loss(x, out, comp, m, fx, w)
    hole, valid = masked_l1(x, out, m)
    perc = perceptual_loss(comp, x, fx)
    sty = style_loss(comp, x, fx)
    want = (w.w_hole * hole.item() + w.w_valid * valid.item() +
            w.w_perc * perc.item() + w.w_style * sty.item())
    np.testing.assert_allclose(total.item(), want, rtol=1e-6)
    np.testing.assert_allclose(bd["total"], total.item(), rtol=1e-12)
    np.testing.assert_allclose(bd["style"], sty.item(), rtol=1e-12)


def test_zero_weight_terms_skipped_but_reported():
    x = rand_tensor((1, 3, 4, 4), 70)
    out = rand_tensor((1, 3, 4, 4), 71)
    m = holed_mask(4, 4, (1, 3, 1, 3))
    total, bd = total_loss(x, out, out, m, FeatureExtractor.identity(),
                           LossWeights(6, 1, 0, 0))
    assert bd["perc"] == 0.0 and bd["style"] == 0.0
    assert total.item() > 0


def test_weights_validation():
    with pytest.raises(ContractError):
        LossWeights(-1, 1, 0, 0).validate()
    with pytest.raises(ContractError):
        LossWeights(0, 0, 0, 0).validate()


def test_extractor_save_load_round_trip(tmp_path):
    fx = FeatureExtractor.default(seed=23, dtype=np.float64)
    p = str(tmp_path / "fx.bin")
    fx.save(p)
    back = FeatureExtractor.load(p, dtype=np.float64)
    assert back.digest() == fx.digest()
    assert back.taps == fx.taps
    x = rand_tensor((1, 3, 16, 16), 72, requires_grad=False)
    for a, b in zip(fx.features(x), back.features(x)):
        np.testing.assert_array_equal(a.data, b.data)


def test_identity_extractor_round_trip(tmp_path):
    fx = FeatureExtractor.identity()
    p = str(tmp_path / "fx_id.bin")
    fx.save(p)
    back = FeatureExtractor.load(p)
    x = rand_tensor((1, 3, 4, 4), 73, requires_grad=False)
    assert back.features(x)[0] is x


def test_loss_gradchecks():
    x = rand_tensor((1, 3, 6, 6), 74)
    out = rand_tensor((1, 3, 6, 6), 75)
    comp = rand_tensor((1, 3, 6, 6), 76)
    m = holed_mask(6, 6, (1, 4, 2, 5))
    fx = FeatureExtractor.default(seed=23, dtype=np.float64)

    def l1():
        hole, valid = masked_l1(x, out, m)
        return add(hole, valid)

    assert grad_check(l1, [x, out]) < 1e-4
    assert grad_check(lambda: perceptual_loss(comp, x, fx), [comp, x]) < 1e-4
    assert grad_check(lambda: style_loss(comp, x, fx), [comp, x]) < 1e-4
    assert grad_check(lambda: total_loss(x, out, comp, m, fx, LossWeights())[0],
                      [x, out, comp]) < 1e-4


def test_gram_gradcheck():
    f = rand_tensor((2, 3, 4, 4), 77)
    assert grad_check(lambda: proj_loss(gram(f)), [f]) < 1e-4
