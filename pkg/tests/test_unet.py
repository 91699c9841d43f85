import json
import struct

import numpy as np
import pytest

from gradcheck import KinkRecorder, numeric_vs_analytic
from dectseg.autodiff import Tensor, backward, weighted_cross_entropy
from dectseg.unet import (
    Checkpoint,
    CheckpointError,
    UNetConfig,
    build,
    checkpoint_size,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)


def test_parameter_count_by_hand():
    # levels 2, base 4, in 2, out 5: enc0 (2->4, 4->4), enc1 (4->8, 8->8),
    # up (8->4, 2^3 kernel + bias), dec0 (8->4, 4->4), 1^3 head (4->5 + bias);
    # every 3^3 conv carries a BN gamma and beta instead of a bias
    conv = lambda cin, cout: cin * cout * 27 + 2 * cout  # noqa: E731
    expected = conv(2, 4) + conv(4, 4) + conv(4, 8) + conv(8, 8) + (8 * 4 * 8 + 4) + conv(8, 4) + conv(4, 4) + (4 * 5 + 5)
    assert expected == 4885
    cfg = UNetConfig(levels=2, base_channels=4)
    assert parameter_count(cfg) == expected
    assert sum(p.data.size for p in build(cfg, 0).params.values()) == expected


def test_build_deterministic_and_zero_biases():
    a, b = build(UNetConfig(), 7), build(UNetConfig(), 7)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    for k, p in a.params.items():
        if k.endswith(".bias") or k.endswith(".beta"):
            assert not p.data.any()
    assert a.params["enc0.conv1.weight"].data.tobytes() != build(UNetConfig(), 8).params["enc0.conv1.weight"].data.tobytes()


def test_he_init_scale():
    w = build(UNetConfig(base_channels=16), 0).params["enc1.conv2.weight"].data
    fan_in = w.shape[1] * 27
    assert abs(w.std() - np.sqrt(2 / fan_in)) < 0.05 * np.sqrt(2 / fan_in)


def test_shape_contract_and_eval_determinism(rng):
    net = build(UNetConfig(), 0)
    x = rng.normal(size=(1, 2, 16, 16, 16)).astype(np.float32)
    out = net(Tensor(x), "eval")
    assert out.shape == (1, 5, 16, 16, 16)
    assert np.array_equal(out.data, net(Tensor(x), "eval").data)
    assert net(Tensor(rng.normal(size=(1, 2, 8, 12, 4)).astype(np.float32))).shape == (1, 5, 8, 12, 4)
    swapped = net(Tensor(x[:, ::-1].copy()), "eval").data
    assert not np.allclose(swapped, out.data)


def test_rejects_bad_inputs():
    net = build(UNetConfig(), 0)
    with pytest.raises(ValueError):
        net(Tensor(np.zeros((1, 2, 10, 8, 8), np.float32)))
    with pytest.raises(ValueError):
        net(Tensor(np.zeros((1, 3, 8, 8, 8), np.float32)))
    with pytest.raises(ValueError):
        UNetConfig(levels=1)


def test_gradient_reaches_every_parameter(rng):
    net = build(UNetConfig(), 0)
    x = Tensor(rng.normal(size=(2, 2, 8, 8, 8)).astype(np.float32))
    target = rng.integers(0, 5, (2, 8, 8, 8))
    backward(weighted_cross_entropy(net(x, "train"), target, np.ones(5)))
    for name, p in net.params.items():
        assert p.grad is not None and np.any(p.grad != 0), name


def test_train_mode_gradients_agree_away_from_kinks(rng, monkeypatch):
    """Every finite-difference disagreement must coincide with a kink being crossed.

    The kinks are a ReLU changing sign or a max-pool window changing winner.
    """
    kinks = KinkRecorder(monkeypatch)
    net = build(UNetConfig(), 0)
    names = list(net.params)
    target = rng.integers(0, 5, (2, 8, 8, 8))

    def loss(x, *params):
        net.params = dict(zip(names, params))
        return weighted_cross_entropy(net(x, "train"), target, np.ones(5))

    arrays = [rng.normal(size=(2, 2, 8, 8, 8))] + [net.params[n].data.astype(np.float64) for n in names]
    errors, crossed = numeric_vs_analytic(loss, arrays, n_samples=40, fingerprint=kinks)
    assert (~crossed).sum() >= 5
    assert np.all(errors[~crossed] < 1e-3)


def _trained_checkpoint(cfg=None):
    net = build(cfg or UNetConfig(), 3)
    net.stats["enc0.conv1.bn"].mean[:] = 0.25
    return Checkpoint.from_network(net, stage=2, alpha_training=0.6, iteration=12, loss_tail=[0.5, 0.25], seed=3)


def test_checkpoint_round_trip_and_size(tmp_path):
    ckpt = _trained_checkpoint()
    path = save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = load_checkpoint(path, expected_config=UNetConfig())
    assert back.metadata == ckpt.metadata and back.config == ckpt.config
    assert set(back.arrays) == set(ckpt.arrays)
    for k in ckpt.arrays:
        assert back.arrays[k].tobytes() == ckpt.arrays[k].tobytes()
    meta = json.dumps({**ckpt.metadata, "config": ckpt.config.to_dict()}, sort_keys=True, separators=(",", ":"))
    names = sum(2 + len(k) + 1 + 4 * v.ndim for k, v in ckpt.arrays.items())
    values = 4 * sum(v.size for v in ckpt.arrays.values())
    assert path.stat().st_size == 4 + 2 + 4 + len(meta) + 4 + names + values == checkpoint_size(ckpt)
    assert path.read_bytes()[:4] == b"DSEG"


def test_checkpoint_errors(tmp_path):
    path = save_checkpoint(_trained_checkpoint(), tmp_path / "c.ckpt")
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(path, expected_config=UNetConfig(levels=2))
    blob = path.read_bytes()
    cases = {
        "magic": b"XXXX" + blob[4:],
        "version": blob[:4] + struct.pack("<H", 9) + blob[6:],
        "truncated": blob[:-5],
        "trailing": blob + b"\0",
    }
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


def test_loaded_network_reproduces_outputs(tmp_path, rng):
    ckpt = _trained_checkpoint()
    x = Tensor(rng.normal(size=(1, 2, 8, 8, 8)).astype(np.float32))
    before = ckpt.network()(x, "eval").data
    after = load_checkpoint(save_checkpoint(ckpt, tmp_path / "c.ckpt")).network()(x, "eval").data
    assert before.tobytes() == after.tobytes()
