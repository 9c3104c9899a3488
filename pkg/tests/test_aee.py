import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from peakcast import aee
from peakcast import autodiff as ad

STEP = timedelta(minutes=15)


def zero_params(cfg, m, feat=aee.TIMESTAMP_FEATURE_WIDTH):
    params = {}
    for layer in range(cfg.layers):
        enc_in = m if layer == 0 else cfg.hidden
        dec_in = feat if layer == 0 else cfg.hidden
        for prefix, width in (("enc", enc_in), ("dec", dec_in)):
            shapes = aee.lstm_param_shapes(width, cfg.hidden)
            for key, shape in shapes.items():
                params[f"aee.{prefix}.{layer}.{key}"] = ad.tensor(np.zeros(shape))
    return params


def random_params(cfg, m, seed=0, feat=aee.TIMESTAMP_FEATURE_WIDTH):
    rng = np.random.default_rng(seed)
    params = zero_params(cfg, m, feat)
    for key, t in params.items():
        scale = 1.0 / math.sqrt(cfg.hidden)
        params[key] = ad.parameter(rng.uniform(-scale, scale, size=t.shape))
    return params


class TestEncode:
    def test_zero_params_zero_states(self):
        cfg = aee.AeeConfig(hidden=4, layers=2)
        win = np.random.default_rng(0).normal(size=(2, 12))
        states = aee.encode(win, zero_params(cfg, 2), cfg)
        for h, c in states:
            assert np.array_equal(h.values, np.zeros((1, 4)))
            assert np.array_equal(c.values, np.zeros((1, 4)))

    def test_state_shapes(self):
        cfg = aee.AeeConfig(hidden=6, layers=2)
        win = np.zeros((3, 2, 10))  # batch of 3
        states = aee.encode(win, random_params(cfg, 2), cfg)
        assert len(states) == 2
        for h, c in states:
            assert h.shape == (3, 6) and c.shape == (3, 6)

    def test_single_cell_matches_hand_equations(self):
        # one step, scalar input 1, all weights 1, bias 0
        cfg = aee.AeeConfig(hidden=1, layers=1)
        params = zero_params(cfg, 1)
        params["aee.enc.0.w"] = ad.tensor(np.ones((1, 4)))
        params["aee.enc.0.u"] = ad.tensor(np.ones((1, 4)))
        (h, c), = aee.encode(np.ones((1, 1)), params, cfg)
        sig = 1.0 / (1.0 + math.exp(-1.0))
        c_exp = sig * math.tanh(1.0)  # f*0 + i*g
        h_exp = sig * math.tanh(c_exp)
        assert c.values[0, 0] == pytest.approx(c_exp, abs=1e-12)
        assert h.values[0, 0] == pytest.approx(h_exp, abs=1e-12)

    def test_forget_path(self):
        # second step keeps a fraction of c via the forget gate
        cfg = aee.AeeConfig(hidden=1, layers=1)
        params = zero_params(cfg, 1)
        params["aee.enc.0.w"] = ad.tensor(np.ones((1, 4)))
        params["aee.enc.0.u"] = ad.tensor(np.zeros((1, 4)))
        (h1, c1), = aee.encode(np.ones((1, 1)), params, cfg)
        (h2, c2), = aee.encode(np.ones((1, 2)), params, cfg)
        sig = 1.0 / (1.0 + math.exp(-1.0))
        c2_exp = sig * c1.values[0, 0] + sig * math.tanh(1.0)
        assert c2.values[0, 0] == pytest.approx(c2_exp, abs=1e-12)


class TestTimestampFeatures:
    def test_first_component_zero_at_origin(self):
        f = aee.timestamp_features(0, 8)
        assert f[0, 0] == 0.0
        assert np.allclose(f[:, 0], np.arange(8) / 8)

    def test_unit_circle_rows(self):
        f = aee.timestamp_features(123, 50)
        assert np.allclose(f[:, 1] ** 2 + f[:, 2] ** 2, 1.0, atol=1e-12)
        assert np.allclose(f[:, 3] ** 2 + f[:, 4] ** 2, 1.0, atol=1e-12)

    def test_daily_period(self):
        start = datetime(2021, 9, 1, tzinfo=timezone.utc)  # midnight issue
        f = aee.timestamp_features(issue_index=-1, horizon=97, step=STEP, start=start)
        assert np.allclose(f[96, 1:3], f[0, 1:3], atol=1e-9)

    def test_width(self):
        assert aee.timestamp_features(0, 4).shape == (4, aee.TIMESTAMP_FEATURE_WIDTH)


class TestDecode:
    def run(self, cfg, seed=1, batch=2, horizon=5, m=2):
        params = random_params(cfg, m, seed)
        win = np.random.default_rng(seed + 1).normal(size=(batch, m, 9))
        latents = aee.encode(win, params, cfg)
        ts = np.stack([aee.timestamp_features(10 + i, horizon) for i in range(batch)])
        return aee.decode(latents, ts, params, cfg), latents, params

    def test_output_shape(self):
        cfg = aee.AeeConfig(hidden=7, layers=2)
        out, _, _ = self.run(cfg, horizon=5)
        assert out.shape == (2, 5, 7)

    def test_zero_params_zero_embedding(self):
        cfg = aee.AeeConfig(hidden=3, layers=1)
        params = zero_params(cfg, 2)
        latents = aee.encode(np.zeros((1, 2, 6)), params, cfg)
        ts = aee.timestamp_features(0, 4)[None, ...]
        out = aee.decode(latents, ts, params, cfg)
        assert np.array_equal(out.values, np.zeros((1, 4, 3)))

    def test_latent_sensitivity_at_first_row(self):
        cfg = aee.AeeConfig(hidden=4, layers=1)
        params = random_params(cfg, 2, seed=3)
        win = np.random.default_rng(4).normal(size=(1, 2, 8))
        ts = aee.timestamp_features(5, 6)[None, ...]
        base = aee.decode(aee.encode(win, params, cfg), ts, params, cfg).values
        bumped = aee.encode(win + 1.0, params, cfg)
        out = aee.decode(bumped, ts, params, cfg).values
        assert not np.allclose(out[0, 0], base[0, 0])

    def test_no_target_values_enter_decoder(self):
        # decoding depends only on latents and time stamps: replaying with a
        # different window but identical latents gives identical output
        cfg = aee.AeeConfig(hidden=4, layers=1)
        params = random_params(cfg, 2, seed=5)
        win = np.random.default_rng(6).normal(size=(1, 2, 8))
        latents = aee.encode(win, params, cfg)
        ts = aee.timestamp_features(3, 5)[None, ...]
        a = aee.decode(latents, ts, params, cfg).values
        b = aee.decode(latents, ts, params, cfg).values
        assert np.array_equal(a, b)


class TestAuxHead:
    def test_zero_head(self):
        emb = ad.tensor(np.random.default_rng(0).normal(size=(2, 6, 4)))
        out = aee.aux_head(emb, ad.tensor(np.zeros((4, 1))), ad.tensor(np.zeros(1)))
        assert np.array_equal(out.values, np.zeros((2, 6)))

    def test_shape(self):
        emb = ad.tensor(np.zeros((3, 288, 16)))
        out = aee.aux_head(emb, ad.tensor(np.zeros((16, 1))), ad.tensor(np.zeros(1)))
        assert out.shape == (3, 288)

    def test_mean_pool_weights_give_row_means(self):
        rng = np.random.default_rng(1)
        emb_np = rng.normal(size=(2, 5, 8))
        w = ad.tensor(np.full((8, 1), 1.0 / 8.0))
        out = aee.aux_head(ad.tensor(emb_np), w, ad.tensor(np.zeros(1)))
        assert np.allclose(out.values, emb_np.mean(axis=-1))


def test_gradients_through_full_autoencoder():
    # tiny config: t=8, h=4, hidden=3; finite differences within 1e-4
    cfg = aee.AeeConfig(hidden=3, layers=2)
    params = random_params(cfg, 2, seed=7)
    win = np.random.default_rng(8).normal(size=(1, 2, 8))
    ts = aee.timestamp_features(7, 4)[None, ...]
    head_b = ad.parameter(np.array([0.05]))
    target = np.random.default_rng(9).normal(size=(1, 4))

    def loss_for(head_w: ad.Tensor) -> ad.Tensor:
        latents = aee.encode(win, params, cfg)
        emb = aee.decode(latents, ts, params, cfg)
        pred = aee.aux_head(emb, head_w, head_b)
        return ad.rmse(pred, ad.tensor(target))

    head_w = ad.parameter(np.random.default_rng(10).normal(0, 0.5, size=(3, 1)))
    assert ad.finite_diff_check(loss_for, head_w) < 1e-4

    # and through a recurrent weight, the long path
    w_key = "aee.enc.0.u"

    def loss_for_recurrent(u: ad.Tensor) -> ad.Tensor:
        params[w_key] = u
        latents = aee.encode(win, params, cfg)
        emb = aee.decode(latents, ts, params, cfg)
        pred = aee.aux_head(emb, head_w, head_b)
        return ad.rmse(pred, ad.tensor(target))

    assert ad.finite_diff_check(loss_for_recurrent, params[w_key]) < 1e-4
