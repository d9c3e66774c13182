"""U-net assembly: the adaptive schedule, forward geometry, hole
independence, compositing, and checkpoint persistence."""

import numpy as np
import pytest

from dign.errors import (ConstructionError, IncompatibilityError, ParseError,
                         ShapeError)
from dign.generator import (GeneratorConfig, build_generator, inpaint,
                            load_checkpoint, save_checkpoint)
from dign.tensor import constant

from conftest import holed_mask


def small_gen(seed=7, res=32, scale=1 / 16, dtype=np.float64):
    return build_generator(GeneratorConfig(input_resolution=res,
                                           channel_scale=scale),
                           seed=seed, dtype=dtype)


def test_default_256_schedule():
    cfg = GeneratorConfig()
    assert len(cfg.encoder) == 8 and len(cfg.decoder) == 8
    trace = cfg.spatial_trace()
    assert trace["encoder"] == [256, 128, 64, 32, 32, 16, 8, 4]
    assert trace["decoder"] == [4, 8, 16, 32, 32, 64, 128, 256]
    # stage four runs at stride 1 so positions 4 and 5 share 32x32
    assert cfg.encoder[3].expected_spatial == cfg.encoder[4].expected_spatial == 32
    assert [e.stride for e in cfg.encoder] == [2, 2, 2, 1, 2, 2, 2, 1]
    assert [d.upsample for d in cfg.decoder] == \
        [False, True, True, True, False, True, True, True]
    assert [d.skip_source for d in cfg.decoder] == [7, 6, 5, 4, 3, 2, 1, 0]
    kinds = [e.kind for e in cfg.encoder]
    assert kinds[0] == "pconv" and kinds[7] == "pconv"
    assert all(k == "inception" for k in kinds[1:7])
    assert cfg.decoder[7].out_channels == 3


@pytest.mark.parametrize("res,want", [
    (64, [64, 32, 16, 8, 8, 4, 4, 4]),
    (32, [32, 16, 8, 4, 4, 4, 4, 4]),
])
def test_adaptive_schedule_small_inputs(res, want):
    cfg = GeneratorConfig(input_resolution=res)
    assert cfg.spatial_trace()["encoder"] == want
    assert cfg.encoder[3].stride == 1
    cfg.validate()  # junction arithmetic holds


def test_channel_scaling_with_floor():
    cfg = GeneratorConfig(input_resolution=32, channel_scale=1 / 16)
    assert [e.out_channels for e in cfg.encoder] == [2, 4, 8, 8, 16, 16, 16, 16]
    assert [d.out_channels for d in cfg.decoder] == [16, 16, 16, 8, 8, 4, 4, 3]


def test_resolution_must_be_multiple_of_16():
    with pytest.raises(ConstructionError):
        GeneratorConfig(input_resolution=50)


def test_validate_catches_bad_junctions():
    cfg = GeneratorConfig(input_resolution=64)
    cfg.encoder[2].expected_spatial = 99
    with pytest.raises(ConstructionError, match="encoder layer 3"):
        cfg.validate()
    cfg2 = GeneratorConfig(input_resolution=64)
    cfg2.decoder = cfg2.decoder[:7]
    with pytest.raises(ConstructionError):
        cfg2.validate()
    cfg3 = GeneratorConfig(input_resolution=64)
    cfg3.decoder[7].out_channels = 4
    with pytest.raises(ConstructionError):
        cfg3.validate()


def test_config_dict_round_trip_and_digest():
    cfg = GeneratorConfig(input_resolution=64, channel_scale=0.5,
                          norm_mode="paper")
    back = GeneratorConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    assert back.digest() == cfg.digest()
    other = GeneratorConfig(input_resolution=128, channel_scale=0.5)
    assert other.digest() != cfg.digest()


def test_forward_shapes_and_final_mask():
    gen = small_gen()
    rng = np.random.default_rng(0)
    img = constant(rng.random((2, 3, 32, 32)), dtype=np.float64)
    mask = constant(holed_mask(32, 32, (8, 24, 8, 24), n=2), dtype=np.float64)
    out = gen.forward(img, mask, mode="eval")
    assert out.features.shape == (2, 3, 32, 32)
    # skips reintroduce border validity; the decoder's output mask is full
    np.testing.assert_array_equal(out.mask.data, np.ones((2, 1, 32, 32)))


def test_eval_forward_is_pure():
    gen = small_gen()
    rng = np.random.default_rng(1)
    img = constant(rng.random((1, 3, 32, 32)), dtype=np.float64)
    mask = constant(holed_mask(32, 32, (10, 20, 10, 20)), dtype=np.float64)
    a = gen.forward(img, mask, mode="eval").features.data
    buf_before = {k: v.copy() for k, v in gen.buffers()}
    b = gen.forward(img, mask, mode="eval").features.data
    np.testing.assert_array_equal(a, b)
    for k, v in gen.buffers():
        np.testing.assert_array_equal(v, buf_before[k])


def test_train_forward_moves_running_stats():
    gen = small_gen()
    rng = np.random.default_rng(2)
    img = constant(rng.random((2, 3, 32, 32)), dtype=np.float64)
    mask = constant(np.ones((2, 1, 32, 32)), dtype=np.float64)
    before = {k: v.copy() for k, v in gen.buffers()}
    gen.forward(img, mask, mode="train")
    moved = [k for k, v in gen.buffers() if not np.array_equal(v, before[k])]
    assert moved, "train mode left every batch-norm buffer untouched"


def test_hole_independence_bitwise():
    gen = small_gen()
    rng = np.random.default_rng(3)
    img = rng.random((1, 3, 32, 32))
    mask = holed_mask(32, 32, (5, 25, 6, 28))
    base = gen.forward(constant(img, dtype=np.float64),
                       constant(mask, dtype=np.float64),
                       mode="eval").features.data
    for t in range(3):
        fuzzed = img.copy()
        noise = np.random.default_rng(10 + t).random((1, 3, 32, 32)) * 100 - 50
        fuzzed = np.where(mask == 0, noise, fuzzed)
        out = gen.forward(constant(fuzzed, dtype=np.float64),
                          constant(mask, dtype=np.float64),
                          mode="eval").features.data
        np.testing.assert_array_equal(out, base)


def test_inpaint_all_valid_is_identity():
    gen = small_gen()
    img = np.random.default_rng(4).random((1, 3, 32, 32))
    out = inpaint(gen, img, np.ones((1, 1, 32, 32)))
    np.testing.assert_array_equal(out.data, img)


def test_inpaint_fills_holes_in_range():
    gen = small_gen()
    img = np.random.default_rng(5).random((1, 3, 32, 32))
    mask = holed_mask(32, 32, (8, 20, 8, 20))
    out = inpaint(gen, img, mask).data
    valid = np.broadcast_to(mask, img.shape) == 1
    np.testing.assert_array_equal(out[valid], img[valid])
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_inpaint_resolution_mismatch():
    gen = small_gen(res=32)
    img = np.random.default_rng(6).random((1, 3, 64, 64))
    with pytest.raises(ShapeError):
        inpaint(gen, img, np.ones((1, 1, 64, 64)))


def test_parameter_names_and_final_layer_bias():
    gen = small_gen()
    names = [n for n, _ in gen.parameters()]
    assert names[0].startswith("enc1.")
    assert any(n.startswith("dec8.") for n in names)
    assert "dec8.bias" in names          # final conv keeps its bias
    assert not any(n == "enc1.bias" for n in names)  # BN eats the stem bias
    assert all(n.startswith(("enc", "dec")) for n in names)
    bufs = [k for k, _ in gen.buffers()]
    assert any("running_mean" in k for k in bufs)
    assert not any(k.startswith("dec8.") for k in bufs)  # no BN on output


def test_checkpoint_round_trip(tmp_path):
    gen = small_gen(seed=11)
    # move the state away from init so the trip is non-trivial
    rng = np.random.default_rng(7)
    img = constant(rng.random((2, 3, 32, 32)), dtype=np.float64)
    gen.forward(img, constant(np.ones((2, 1, 32, 32)), dtype=np.float64),
                mode="train")
    opt = {"m.enc1.weight": np.ones((1, 1, 1, 1), dtype=np.float64)}
    p = str(tmp_path / "g.bin")
    save_checkpoint(gen, p, iteration=17, opt_entries=opt)
    back, opt2, it = load_checkpoint(p)
    assert it == 17
    np.testing.assert_array_equal(opt2["m.enc1.weight"], opt["m.enc1.weight"])
    assert back.config.digest() == gen.config.digest()
    for (n1, t1), (n2, t2) in zip(gen.parameters(), back.parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(t1.data, t2.data)
    for (k1, v1), (k2, v2) in zip(gen.buffers(), back.buffers()):
        assert k1 == k2
        np.testing.assert_array_equal(v1, v2)
    mask = constant(holed_mask(32, 32, (9, 19, 9, 19)), dtype=np.float64)
    img1 = constant(rng.random((1, 3, 32, 32)), dtype=np.float64)
    np.testing.assert_array_equal(
        gen.forward(img1, mask, mode="eval").features.data,
        back.forward(img1, mask, mode="eval").features.data)


def test_checkpoint_expected_config_guard(tmp_path):
    gen = small_gen(seed=12)
    p = str(tmp_path / "g.bin")
    save_checkpoint(gen, p)
    load_checkpoint(p, expected=gen.config)  # matching config is fine
    with pytest.raises(IncompatibilityError):
        load_checkpoint(p, expected=GeneratorConfig(input_resolution=64,
                                                    channel_scale=1 / 16))


def test_checkpoint_truncation(tmp_path):
    gen = small_gen(seed=13)
    p = str(tmp_path / "g.bin")
    save_checkpoint(gen, p)
    blob = open(p, "rb").read()
    bad = str(tmp_path / "bad.bin")
    with open(bad, "wb") as fh:
        fh.write(blob[:len(blob) // 2])
    with pytest.raises(ParseError):
        load_checkpoint(bad)


def test_capture_layer_input_matches_layer_geometry():
    gen = small_gen()
    names = gen.layer_names()
    assert names[0] == "enc1" and names[-1] == "dec8"
    img = np.random.default_rng(8).random((1, 3, 32, 32))
    mask = np.ones((1, 1, 32, 32))
    act = gen.capture_layer_input("enc3", img, mask)
    # enc3 reads the 16x16 map produced by enc2 at 32-input scale
    assert act.features.shape[2] == gen.config.encoder[2].expected_spatial
    with pytest.raises(KeyError):
        gen.capture_layer_input("enc99", img, mask)
