"""Partial convolution against hand-computed windows, the all-valid
degeneracy, mask propagation, and finite differences."""

import numpy as np
import pytest

from dign.errors import ContractError
from dign.gradcheck import grad_check
from dign.ops import Conv2dParams, conv2d
from dign.pconv import (MaskedActivation, check_binary, mask_coverage,
                        partial_conv2d, update_mask)
from dign.tensor import OpGraph, Tensor, backward, constant, sum_all

from conftest import holed_mask, proj_loss, rand_tensor


def wrap(x, mask):
    return MaskedActivation(features=x, mask=constant(mask, dtype=x.data.dtype))


def ones_kernel_params(k, bias=None):
    w = Tensor(np.ones((1, 1, k, k)), requires_grad=True, dtype=np.float64)
    return Conv2dParams(weight=w, bias=bias)


def test_hand_windows_both_modes():
    # 3x3 input, 2x2 ones kernel, center pixel invalid.  Every window sees
    # exactly 3 valid pixels out of 4 in-bounds cells.
    x = Tensor(np.arange(1.0, 10.0).reshape(1, 1, 3, 3), requires_grad=True,
               dtype=np.float64)
    mask = np.ones((1, 1, 3, 3))
    mask[0, 0, 1, 1] = 0.0
    masked_sums = np.array([[7.0, 11.0], [19.0, 23.0]])

    out = partial_conv2d(wrap(x, mask), ones_kernel_params(2), "paper")
    np.testing.assert_allclose(out.features.data[0, 0], masked_sums / 3.0,
                               rtol=1e-12)
    out = partial_conv2d(wrap(x, mask), ones_kernel_params(2), "scaled")
    np.testing.assert_allclose(out.features.data[0, 0], masked_sums * (4.0 / 3.0),
                               rtol=1e-12)
    np.testing.assert_array_equal(out.mask.data, np.ones((1, 1, 2, 2)))


def test_all_invalid_window_is_exact_zero_and_bias_gated():
    x = rand_tensor((1, 1, 4, 4), 30)
    mask = holed_mask(4, 4, (0, 2, 0, 2))  # top-left 2x2 hole
    bias = Tensor(np.array([[[[1000.0]]]]), requires_grad=True,
                  dtype=np.float64)
    out = partial_conv2d(wrap(x, mask), ones_kernel_params(2, bias=bias))
    # window at (0,0) covers only the hole: exactly 0, no bias leak
    assert out.features.data[0, 0, 0, 0] == 0.0
    assert out.mask.data[0, 0, 0, 0] == 0.0
    # a fully valid window does get the bias
    assert out.features.data[0, 0, 2, 2] != 0.0
    assert out.mask.data[0, 0, 2, 2] == 1.0


def test_all_invalid_mask_outputs_zero_everywhere():
    x = rand_tensor((2, 3, 6, 6), 31)
    mask = np.zeros((2, 1, 6, 6))
    w = rand_tensor((4, 3, 3, 3), 32)
    out = partial_conv2d(wrap(x, mask), Conv2dParams(weight=w, bias=None,
                                                     padding=1))
    np.testing.assert_array_equal(out.features.data, 0.0)
    np.testing.assert_array_equal(out.mask.data, 0.0)


@pytest.mark.parametrize("shape,k,stride,pad", [
    ((2, 3, 8, 8), 3, 1, 1),
    ((1, 2, 9, 9), 5, 2, 2),
    ((2, 4, 7, 7), 1, 1, 0),
    ((1, 3, 10, 8), 3, 2, 1),
])
def test_all_valid_degenerates_to_conv2d_bitwise(shape, k, stride, pad):
    x = rand_tensor(shape, seed=sum(shape) + k)
    w = rand_tensor((5, shape[1], k, k), seed=k * 7)
    b = rand_tensor((1, 5, 1, 1), seed=k * 11)
    p = Conv2dParams(weight=w, bias=b, stride=stride, padding=pad)
    mask = np.ones((shape[0], 1, shape[2], shape[3]))
    got = partial_conv2d(wrap(x, mask), p, "scaled")
    want = conv2d(x, p)
    np.testing.assert_array_equal(got.features.data, want.data)
    np.testing.assert_array_equal(got.mask.data,
                                  np.ones_like(got.mask.data))


def test_paper_mode_divides_by_valid_count():
    # all-valid interior window: paper mode scales by 1/k^2 vs standard conv
    x = rand_tensor((1, 1, 5, 5), 33)
    mask = np.ones((1, 1, 5, 5))
    p = ones_kernel_params(3)
    got = partial_conv2d(wrap(x, mask), p, "paper")
    want = conv2d(x, p)
    np.testing.assert_allclose(got.features.data, want.data / 9.0, rtol=1e-12)


def test_update_mask_hand_case():
    # 5x5 mask, center 3x3 hole, 3x3 window pad 1: only the hole's center
    # pixel has a window with no valid neighbour
    mask = holed_mask(5, 5, (1, 4, 1, 4))
    new = update_mask(mask[0, 0][None, None], 3, 3, (1, 1), (1, 1))
    want = np.ones((1, 1, 5, 5))
    want[0, 0, 2, 2] = 0.0
    np.testing.assert_array_equal(new, want)


def test_mask_coverage_nondecreasing_through_layers():
    x = rand_tensor((1, 2, 16, 16), 34)
    mask = holed_mask(16, 16, (3, 12, 4, 13))
    cur = wrap(x, mask)
    seq = [cur.mask]
    for i in range(5):
        w = rand_tensor((2, 2, 3, 3), 35 + i)
        cur = partial_conv2d(cur, Conv2dParams(weight=w, bias=None, padding=1))
        seq.append(cur.mask)
    cov = mask_coverage(seq)
    assert all(b >= a for a, b in zip(cov, cov[1:])), cov
    assert cov[-1] == 1.0  # each 3x3 layer peels one ring off the 9x9 hole


def test_hole_input_gets_no_gradient():
    x = rand_tensor((1, 2, 6, 6), 36)
    mask = holed_mask(6, 6, (2, 4, 2, 4))
    w = rand_tensor((3, 2, 3, 3), 37)
    with OpGraph() as g:
        out = partial_conv2d(wrap(x, mask), Conv2dParams(weight=w, bias=None,
                                                         padding=1))
        loss = sum_all(out.features)
    backward(g, loss)
    assert np.all(x.grad[:, :, 2:4, 2:4] == 0.0)
    assert np.any(x.grad[:, :, 0, :] != 0.0)


def test_gradcheck_holed():
    x = rand_tensor((1, 3, 8, 8), 38)
    mask = holed_mask(8, 8, (2, 6, 3, 7))
    w = rand_tensor((4, 3, 3, 3), 39)
    b = rand_tensor((1, 4, 1, 1), 40)
    p = Conv2dParams(weight=w, bias=b, stride=2, padding=1)
    for mode in ("scaled", "paper"):
        err = grad_check(lambda: proj_loss(
            partial_conv2d(wrap(x, mask), p, mode).features), [x, w, b])
        assert err < 1e-4, (mode, err)


def test_check_binary_rejects_fractional():
    with pytest.raises(ContractError):
        check_binary(np.array([0.0, 0.5, 1.0]))


def test_masked_activation_shape_contracts():
    x = rand_tensor((1, 3, 4, 4), 41)
    with pytest.raises(ContractError):
        wrap(x, np.ones((1, 2, 4, 4)))  # two mask channels
    from dign.errors import ShapeError
    with pytest.raises(ShapeError):
        wrap(x, np.ones((1, 1, 5, 4)))  # spatial mismatch


def test_norm_mode_validated():
    x = rand_tensor((1, 1, 4, 4), 42)
    with pytest.raises(ContractError):
        partial_conv2d(wrap(x, np.ones((1, 1, 4, 4))), ones_kernel_params(3),
                       "banana")
