"""Backbone architecture: shapes, invariances, checkpoints, trainability."""

import numpy as np
import pytest

import eegmoe.tensor as T
from eegmoe.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from eegmoe.model import (BackboneConfig, BackboneOutput, DualPathDown,
                          DualPathUp, ParamStore, Reconstructor)
from eegmoe.objectives import total_loss
from eegmoe.optim import adamw
from eegmoe.train import load_reconstructor


def rand(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def test_default_parameter_count_in_window():
    net = Reconstructor(BackboneConfig(), seed=0)
    assert 3.8e6 <= net.n_parameters() <= 4.8e6


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(hidden_dim=30)
    with pytest.raises(ValueError):
        BackboneConfig(hidden_dim=128, heads=3)


def test_down_stage_toy_shape():
    cfg = BackboneConfig.toy()
    store = ParamStore(np.random.default_rng(0), cfg.np_dtype)
    stage = DualPathDown(store, "s", 1, cfg.hidden_dim // 4, cfg, 1)
    out = stage(T.constant(rand((3, 1, 256), 1)))
    assert out.shape == (3, 8, 64)


def test_down_stage_zero_input_zero_bias_gives_zero():
    cfg = BackboneConfig.toy()
    store = ParamStore(np.random.default_rng(0), cfg.np_dtype)
    stage = DualPathDown(store, "s", 2, 8, cfg, 1)
    stage.b_small.values[:] = 0
    stage.b_large.values[:] = 0
    stage.b_proj.values[:] = 0
    out = stage(T.constant(np.zeros((2, 2, 64))))
    assert np.abs(out.values).max() == 0.0


def test_down_stage_ceil_lengths():
    cfg = BackboneConfig.toy()
    store = ParamStore(np.random.default_rng(0), cfg.np_dtype)
    stage = DualPathDown(store, "s", 1, 8, cfg, 2)
    for n, want in ((6000, 1500), (375, 94), (200, 50), (13, 4)):
        out = stage(T.constant(rand((1, 1, n), n)))
        assert out.shape[-1] == want, n


def test_up_stage_toy_shape_and_crop():
    cfg = BackboneConfig.toy()
    store = ParamStore(np.random.default_rng(0), cfg.np_dtype)
    up = DualPathUp(store, "u", 32 + 16, 16, cfg)
    out = up(T.constant(rand((2, 32, 16), 2)), T.constant(rand((2, 16, 64), 3)))
    assert out.shape == (2, 16, 64)
    # 94 -> 376 upsample cropped to the 375-long mirror stage
    up2 = DualPathUp(store, "u2", 8 + 4, 8, cfg)
    out = up2(T.constant(rand((1, 8, 94), 4)), T.constant(rand((1, 4, 375), 5)))
    assert out.shape[-1] == 375


def test_up_stage_rejects_short_skip_mismatch():
    cfg = BackboneConfig.toy()
    store = ParamStore(np.random.default_rng(0), cfg.np_dtype)
    up = DualPathUp(store, "u", 12, 8, cfg)
    with pytest.raises(ValueError):
        up(T.constant(rand((1, 8, 10), 6)), T.constant(rand((1, 4, 100), 7)))


def test_forward_shapes_and_stage_arithmetic():
    toy = Reconstructor(BackboneConfig.toy(), seed=0)
    assert toy.stage_lengths(6000) == (1500, 375, 94)
    out = toy.forward(rand((2, 6000), 8))
    assert out.final_short.shape == (2, 6000)
    assert out.final_long.shape == (2, 6000)
    assert out.interm1.shape == (2, 375)       # 1/16 of the input
    assert out.interm2.shape == (2, 1500)      # 1/4 of the input
    assert out.latent.shape[:2] == (2, toy.cfg.hidden_dim)


def test_forward_channel_count_invariance():
    toy = Reconstructor(BackboneConfig.toy(), seed=0)
    for c in (1, 2, 19):
        out = toy.forward(rand((c, 200), c))
        assert out.final_short.shape == (c, 200)


def test_forward_length_invariance():
    toy = Reconstructor(BackboneConfig.toy(), seed=0)
    for n in (200, 1600):
        out = toy.forward(rand((2, n), n))
        assert out.final_short.shape == (2, n)


def test_forward_rejects_tiny_length():
    toy = Reconstructor(BackboneConfig.toy(), seed=0)
    with pytest.raises(ValueError):
        toy.forward(rand((2, 32), 9))


def test_channel_permutation_equivariance():
    toy = Reconstructor(BackboneConfig.toy(), seed=0)
    x = rand((1, 6, 256), 10)
    perm = np.array([4, 2, 0, 5, 1, 3])
    a = toy.forward(x)
    b = toy.forward(x[:, perm])
    for field in ("final_short", "final_long", "interm1", "interm2"):
        got = getattr(b, field).values
        want = getattr(a, field).values[:, perm]
        assert np.abs(got - want).max() < 1e-9, field


def test_batched_and_unbatched_agree():
    toy = Reconstructor(BackboneConfig.toy(), seed=0)
    x = rand((3, 2, 256), 11)
    batched = toy.forward(x).final_short.values
    single = np.stack([toy.forward(x[i]).final_short.values for i in range(3)])
    assert np.abs(batched - single).max() < 1e-9


def test_encode_returns_bottleneck():
    toy = Reconstructor(BackboneConfig.toy(), seed=0)
    lat = toy.encode(rand((2, 3, 256), 12))
    assert lat.shape == (2, 3, 32, 4)          # 256 / 4**3


def test_head_constant_features_constant_signal():
    cfg = BackboneConfig.toy()
    store = ParamStore(np.random.default_rng(3), cfg.np_dtype)
    from eegmoe.model import PointHead
    head = PointHead(store, "h", 8)
    feats = np.full((1, 8, 10), 0.7)
    out = head(T.constant(feats))
    want = 0.7 * head.w.values.sum() + head.b.values[0]
    np.testing.assert_allclose(out.values, want, atol=1e-12)


def test_gradients_reach_every_parameter():
    toy = Reconstructor(BackboneConfig.toy(), seed=1)
    x = rand((2, 256), 13)
    toy.zero_grad()
    with T.tape():
        T.backward(total_loss(toy.forward(x), x))
    missing = [n for n, p in toy.params.items() if p.grad is None]
    assert missing == []


def test_trainability_loss_decreases():
    toy = Reconstructor(BackboneConfig.toy(dtype="float32"), seed=2)
    x = rand((1, 2, 256), 14) * 0.5
    opt = adamw(toy.parameters())
    losses = []
    for _ in range(60):
        toy.zero_grad()
        with T.tape():
            loss = total_loss(toy.forward(x), x)
            T.backward(loss)
        opt.step()
        losses.append(float(loss.values))
    assert losses[-1] < 0.6 * losses[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_and_fingerprint(tmp_path):
    cfg = BackboneConfig.toy()
    net = Reconstructor(cfg, seed=3)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, {k: p.values for k, p in net.params.items()},
                    cfg.to_dict(), meta={"note": "test"})
    loaded = load_reconstructor(path, cfg)
    x = rand((2, 256), 15)
    a = net.forward(x).final_short.values
    b = loaded.forward(x).final_short.values
    np.testing.assert_array_equal(a, b)


def test_checkpoint_refuses_config_mismatch(tmp_path):
    cfg = BackboneConfig.toy()
    net = Reconstructor(cfg, seed=4)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, {k: p.values for k, p in net.params.items()},
                    cfg.to_dict())
    other = BackboneConfig(hidden_dim=64, heads=4)
    with pytest.raises(CheckpointError):
        load_reconstructor(path, other)


def test_checkpoint_corrupted_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"w": np.ones(3)}, {"a": 1})
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_bytes_deterministic(tmp_path):
    cfg = BackboneConfig.toy()
    net = Reconstructor(cfg, seed=5)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    params = {k: p.values for k, p in net.params.items()}
    save_checkpoint(p1, params, cfg.to_dict(), meta={"run": 1})
    save_checkpoint(p2, params, cfg.to_dict(), meta={"run": 1})
    assert p1.read_bytes() == p2.read_bytes()
