import numpy as np
import pytest

from edip import unet
from edip.tensor import Adam, LearningRateSchedule, Tensor, backward
from edip.tensor import functional as F
from edip.unet import (ArchitectureMismatchError, CheckpointMeta, UNetConfig, init_params, load_checkpoint,
                       save_checkpoint)

from conftest import central_difference

TINY = UNetConfig(scales=2, channels=8, skip_channels=2, groups=2)


def closed_form_count(scales, c, s, k=3):
    conv = lambda cin, cout, kk: cout * cin * kk * kk + cout  # noqa: E731
    gn = lambda ch: 2 * ch  # noqa: E731
    unit = lambda cin, cout: conv(cin, cout, k) + gn(cout)  # noqa: E731
    down = scales - 1
    total = unit(1, c) + unit(c, c)                        # input block
    total += down * 2 * unit(c, c)                         # stride-2 unit + plain unit per scale
    total += down * (conv(c, s, 1) + gn(s))                # 1x1 skip projections
    total += down * (unit(c + s, c) + unit(c, c))          # decoder units after concat
    return total + conv(c, 1, 1)                           # output head


class TestConfig:
    def test_closed_form_count(self):
        cfg = UNetConfig(scales=3, channels=32, skip_channels=4, kernel_size=3)
        assert closed_form_count(3, 32, 4) == 86809
        assert unet.num_params(cfg) == 86809 == init_params(cfg, 0).num_params

    @pytest.mark.parametrize("scales,c,s", [(2, 8, 2), (4, 16, 4), (4, 32, 4)])
    def test_count_matches_flat_length(self, scales, c, s):
        cfg = UNetConfig(scales=scales, channels=c, skip_channels=s, groups=2 if c == 8 else 8)
        assert init_params(cfg, 1).flat().size == unet.num_params(cfg) == closed_form_count(scales, c, s)

    @pytest.mark.parametrize("kwargs", [{"scales": 1}, {"channels": 12, "groups": 8}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            UNetConfig(**kwargs)

    def test_input_size_check(self):
        with pytest.raises(ArchitectureMismatchError):
            UNetConfig(scales=4).check_input_size(36, 36)
        UNetConfig(scales=4).check_input_size(64, 64)

    def test_roundtrip_and_hash(self):
        cfg = UNetConfig(channels=16)
        assert UNetConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.hash() == UNetConfig(channels=16).hash() != UNetConfig(channels=32).hash()
        assert len(cfg.hash()) == 32


class TestParams:
    def test_determinism(self):
        a, b = init_params(TINY, 3), init_params(TINY, 3)
        assert a.flat().tobytes() == b.flat().tobytes()
        assert a.flat().tobytes() != init_params(TINY, 4).flat().tobytes()

    def test_norm_init(self):
        p = init_params(UNetConfig(channels=16), 0)
        for name, t in p.items():
            if name.endswith("norm.gain"):
                assert np.all(t.data == 1.0)
            elif name.endswith("norm.bias") or name.endswith("conv.bias"):
                assert np.all(t.data == 0.0)

    def test_partition(self):
        p = init_params(UNetConfig(channels=16), 0)
        enc, dec = unet.split_params(p)
        assert set(enc) | set(dec) == set(p) and not set(enc) & set(dec)
        assert all(n.startswith(("inc.", "down")) for n in enc)
        assert all(n.startswith(("skip", "up", "outc")) for n in dec)

    def test_flat_roundtrip(self):
        p = init_params(TINY, 0)
        vec = np.arange(p.num_params, dtype=float)
        p.set_flat(vec)
        np.testing.assert_array_equal(p.flat(), vec)
        slices = p.block_slices()
        assert sum(s.stop - s.start for s in slices.values()) == p.num_params


class TestForward:
    def test_shape_and_range(self, rng):
        p = init_params(TINY, 0)
        out = unet.forward(p, rng.standard_normal((2, 1, 16, 16)))
        assert out.shape == (2, 1, 16, 16)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_incompatible_size(self):
        with pytest.raises(ArchitectureMismatchError):
            unet.forward(init_params(UNetConfig(scales=3, channels=8, groups=2), 0), np.zeros((1, 1, 18, 18)))

    def test_deterministic(self, rng):
        p = init_params(TINY, 0)
        z = rng.standard_normal((1, 1, 16, 16))
        assert unet.forward(p, z).data.tobytes() == unet.forward(p, z).data.tobytes()

    def test_predict_keeps_leading_shape(self, rng):
        p = init_params(TINY, 0)
        assert unet.predict(p, rng.uniform(size=(16, 16))).shape == (16, 16)
        assert unet.predict(p, rng.uniform(size=(3, 16, 16))).shape == (3, 16, 16)

    def test_gradient_matches_finite_differences(self, rng):
        p = init_params(TINY, 5)
        z = rng.uniform(size=(1, 1, 16, 16))
        w = rng.standard_normal((1, 1, 16, 16))

        def value():
            return float(F.sum(F.mul(unet.forward(p, z), Tensor(w))).data)

        backward(F.sum(F.mul(unet.forward(p, z), Tensor(w))))
        names = list(p)
        ad, fd = [], []
        for _ in range(60):
            name = names[rng.integers(len(names))]
            t = p[name]
            idx = tuple(int(rng.integers(s)) for s in t.shape)
            ad.append(t.grad[idx])
            fd.append(central_difference(value, t.data, idx))
        ad, fd = np.array(ad), np.array(fd)
        assert np.linalg.norm(ad - fd) / np.linalg.norm(fd) < 1e-5


class TestFreeze:
    def test_hundred_steps(self, rng):
        p = init_params(TINY, 0)
        enc, _ = unet.split_params(p)
        unet.freeze(p, enc)
        before = {n: p[n].data.copy() for n in p}
        opt = Adam(dict(p.items()), LearningRateSchedule.constant(1e-2))
        z = rng.uniform(size=(1, 1, 16, 16))
        target = Tensor(rng.uniform(size=(1, 1, 16, 16)))
        for _ in range(100):
            p.zero_grad()
            backward(F.l2_norm_sq(F.sub(unet.forward(p, z), target)))
            opt.step()
        for n in enc:
            assert p[n].data.tobytes() == before[n].tobytes()
            assert p[n].grad is None
            assert n not in opt.state.first_moment and n not in opt.state.second_moment
        assert any(not np.array_equal(p[n].data, before[n]) for n in p if n not in enc)


class TestCheckpoint:
    def test_roundtrip_bytes(self, tmp_path):
        p = init_params(TINY, 2)
        save_checkpoint(tmp_path / "a.ckpt", p, CheckpointMeta(epoch=7, seed=2, val_loss=0.125))
        q, meta = load_checkpoint(tmp_path / "a.ckpt", TINY)
        save_checkpoint(tmp_path / "b.ckpt", q, meta)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert meta.epoch == 7 and meta.seed == 2 and meta.val_loss == 0.125
        assert meta.config_hash == TINY.hash()
        assert list(q) == list(p) and q.tags == p.tags

    def test_wrong_architecture(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", init_params(TINY, 0), CheckpointMeta())
        other = UNetConfig(scales=3, channels=8, skip_channels=2, groups=2)
        with pytest.raises(ArchitectureMismatchError, match="config hash"):
            load_checkpoint(tmp_path / "a.ckpt", other)

    def test_optimizer_state(self, tmp_path, rng):
        p = init_params(TINY, 0)
        opt = Adam(dict(p.items()), LearningRateSchedule.constant(1e-3))
        backward(F.sum(unet.forward(p, rng.uniform(size=(1, 1, 16, 16)))))
        opt.step()
        save_checkpoint(tmp_path / "a.ckpt", p, CheckpointMeta(epoch=1), opt.state)
        _, meta, moments = load_checkpoint(tmp_path / "a.ckpt", TINY, with_optimizer=True)
        assert meta.optimizer_step == 1
        name = next(iter(p))
        np.testing.assert_array_equal(moments[name][0], opt.state.first_moment[name])
        np.testing.assert_array_equal(moments[name][1], opt.state.second_moment[name])

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"garbage" * 10)
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(tmp_path / "x", TINY)
