import numpy as np
import pytest

from _fd import network_max_rel_err
from ctseg import engine, segnet
from ctseg.errors import ConfigError, FormatError, ShapeError
from ctseg.segnet import NetConfig

# computed by hand from the layer plan with defaults (16/32/64, 3 blocks, 3x3):
# stem 160, group1 3*4704, group2 13984 + 2*18624, group3 55616 + 2*74112, head 128 + 130
DEFAULT_TRAINABLE = 269602
DEFAULT_BUFFERS = 2 * 688  # running mean + var over all 688 normalised channels

TINY = NetConfig(group_channels=(2, 2, 3), seed=3)


def test_default_has_twenty_convs():
    p = segnet.build()
    assert len(p.conv_weight_names()) == 20
    assert NetConfig().conv_layers == 20


def test_parameter_count_frozen():
    p = segnet.build()
    assert segnet.parameter_count(NetConfig()) == DEFAULT_TRAINABLE
    assert p.num_trainable() == DEFAULT_TRAINABLE
    assert sum(v.size for _, v in p) == DEFAULT_TRAINABLE + DEFAULT_BUFFERS


def test_build_deterministic():
    assert segnet.build().equal(segnet.build())
    assert not segnet.build(NetConfig(seed=1)).equal(segnet.build())


def test_names_stable_and_unique():
    names = segnet.build(TINY).names()
    assert len(names) == len(set(names))
    assert names[:2] == ["stem.conv.w", "stem.conv.b"]
    assert names[-2:] == ["head.conv.w", "head.conv.b"]


def test_invalid_configs():
    for bad in (NetConfig(group_channels=(8, 4, 8)), NetConfig(group_channels=(4, 4)), NetConfig(kernel=2),
                NetConfig(num_classes=1), NetConfig(blocks_per_group=0)):
        with pytest.raises(ConfigError):
            segnet.build(bad)


def test_forward_shapes_and_sums(rng):
    p = segnet.build(TINY)
    for h, w in ((32, 32), (9, 13)):
        x = rng.random((1, 1, h, w))
        out = segnet.forward(p, x)
        assert out.shape == (1, 2, h, w)
        np.testing.assert_allclose(out.sum(axis=1), 1, atol=1e-6)


def test_forward_channel_mismatch():
    with pytest.raises(ShapeError):
        segnet.forward(segnet.build(TINY), np.zeros((1, 2, 9, 9)))


def test_identical_inputs_identical_outputs(rng):
    x = rng.random((1, 1, 12, 10))
    out = segnet.forward(segnet.build(TINY), np.concatenate([x, x]))
    np.testing.assert_array_equal(out[0], out[1])


def test_zero_head_gives_half(rng):
    p = segnet.build(TINY)
    p = p.replace({"head.conv.w": np.zeros_like(p["head.conv.w"])})
    np.testing.assert_array_equal(segnet.forward(p, rng.random((2, 1, 9, 9))), 0.5)


def test_train_mode_returns_running_stats(rng):
    p = segnet.build(TINY)
    before = p.copy()
    _, cache = segnet.forward(p, rng.random((2, 1, 9, 9)), mode="train", return_cache=True)
    assert set(cache.running) == {k for k in p.names() if k.endswith(("running_mean", "running_var"))}
    assert p.equal(before)


def test_zeroed_block_is_identity(rng):
    p = segnet.build(NetConfig(group_channels=(2, 3, 3), seed=1))
    x = rng.normal(size=(2, 2, 9, 9))
    zeros = {k: np.zeros_like(v) for k, v in p if k.startswith("g2.b1.conv")}
    out, _ = segnet.residual_block(p.replace(zeros), "g2.b1", x, 3, 2, "train")
    np.testing.assert_array_equal(out[:, :2], x)
    np.testing.assert_array_equal(out[:, 2], 0)


def test_predict_mask_rule():
    probs = np.zeros((1, 2, 1, 3))
    probs[0, 1] = [0.9, 0.5, 0.1]
    probs[0, 0] = 1 - probs[0, 1]
    np.testing.assert_array_equal(segnet.predict_mask(probs)[0, 0], [True, False, False])


def test_end_to_end_gradient_fd(rng):
    assert network_max_rel_err(rng, NetConfig(group_channels=(2, 2, 3), seed=5), 20) < 1e-4


def test_backward_covers_all_trainable(rng):
    p = segnet.build(TINY)
    probs, cache = segnet.forward(p, rng.random((1, 1, 9, 9)), mode="train", return_cache=True)
    grads = segnet.backward(p, cache, np.ones_like(probs))
    assert set(grads) == set(p.trainable())
    for k, g in grads.items():
        assert g.shape == p[k].shape


def test_checkpoint_roundtrip(tmp_path):
    p = segnet.build(TINY, np.float32)
    path = tmp_path / "m.ckpt"
    segnet.save_checkpoint(p, path)
    q = segnet.load_checkpoint(path)
    assert q.equal(p)
    segnet.save_checkpoint(q, tmp_path / "m2.ckpt")
    assert (tmp_path / "m2.ckpt").read_bytes() == path.read_bytes()
    assert path.read_bytes().startswith(b"CTSEG1\0")


def test_checkpoint_rejects_bad_files(tmp_path):
    segnet.save_checkpoint(segnet.build(TINY), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXXXX\0" + raw[7:])
    (tmp_path / "short").write_bytes(raw[:-3])
    (tmp_path / "long").write_bytes(raw + b"\0")
    for name in ("bad", "short", "long"):
        with pytest.raises(FormatError):
            segnet.load_checkpoint(tmp_path / name)
