"""LSTM autoencoder embedding (the aee.* config surface).

An LSTM encoder folds the whole input window into latent states (h, c);
an LSTM decoder, seeded with those latents and driven only by forecast
time-stamp features, unrolls the horizon. Its hidden-state sequence is
the decoder-side embedding, and a per-step linear head turns the same
sequence into the short-term auxiliary prediction. No target value,
observed or predicted, ever enters the decoder: prediction is direct,
not recursive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TIMESTAMP_FEATURE_WIDTH = 5


@dataclass
class AeeConfig:
    hidden: int = 64
    layers: int = 1

    def __post_init__(self) -> None:
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if self.layers not in (1, 2):
            raise ValueError(f"layers must be 1 or 2, got {self.layers}")


def lstm_param_shapes(input_width: int, hidden: int) -> dict[str, tuple[int, ...]]:
    """Gate-stacked cell parameterization: i, f, g, o along the last axis."""
    return {"w": (input_width, 4 * hidden), "u": (hidden, 4 * hidden), "b": (4 * hidden,)}


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, u: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One recurrence step on a (B, input) slice; returns (h', c')."""
    hidden = h.shape[-1]
    gates = ad.add_bias(ad.add(ad.matmul(x, w), ad.matmul(h, u)), b)
    i = ad.sigmoid(ad.slice_last(gates, 0, hidden))
    f = ad.sigmoid(ad.slice_last(gates, hidden, 2 * hidden))
    g = ad.tanh(ad.slice_last(gates, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.slice_last(gates, 3 * hidden, 4 * hidden))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def _zeros(batch: int, hidden: int) -> Tensor:
    return ad.tensor(np.zeros((batch, hidden)))


def encode(windows: np.ndarray, params: dict[str, Tensor], cfg: AeeConfig) -> list[tuple[Tensor, Tensor]]:
    """Run the encoder stack over all t columns of (B, m, t) windows.

    Returns the final (h, c) of each layer, bottom first.
    """
    if windows.ndim == 2:
        windows = windows[None, ...]
    B, m, t = windows.shape
    states = [( _zeros(B, cfg.hidden), _zeros(B, cfg.hidden)) for _ in range(cfg.layers)]
    for j in range(t):
        inp: Tensor = ad.tensor(windows[:, :, j])
        for layer in range(cfg.layers):
            h, c = states[layer]
            h, c = lstm_cell(inp, h, c,
                             params[f"aee.enc.{layer}.w"],
                             params[f"aee.enc.{layer}.u"],
                             params[f"aee.enc.{layer}.b"])
            states[layer] = (h, c)
            inp = h
    return states


def timestamp_features(
    issue_index: int,
    horizon: int,
    step: timedelta = timedelta(minutes=15),
    start: datetime | None = None,
) -> np.ndarray:
    """(horizon, 5) decoder-input features for one forecast issuance.

    Row k describes forecast step k: normalized index k/h, then sine and
    cosine of the fractional time-of-day and day-of-year of the step's
    absolute timestamp (grid index issue_index + 1 + k). Without a start
    timestamp the calendar features fall back to a fixed epoch so the
    encoding stays total.
    """
    from .data import DEFAULT_SYNTH_START

    anchor = start if start is not None else DEFAULT_SYNTH_START
    out = np.empty((horizon, TIMESTAMP_FEATURE_WIDTH))
    for k in range(horizon):
        ts = anchor + (issue_index + 1 + k) * step
        tod = (ts.hour * 3600 + ts.minute * 60 + ts.second) / 86400.0
        doy = (ts.timetuple().tm_yday - 1 + tod) / 366.0
        out[k] = (k / horizon,
                  math.sin(2 * math.pi * tod), math.cos(2 * math.pi * tod),
                  math.sin(2 * math.pi * doy), math.cos(2 * math.pi * doy))
    return out


def decode(
    latents: list[tuple[Tensor, Tensor]],
    ts_features: np.ndarray,
    params: dict[str, Tensor],
    cfg: AeeConfig,
) -> Tensor:
    """Unroll the decoder stack over (B, h, 5) time-stamp features.

    Latents map layer-to-layer from the encoder. The result is the
    top layer's hidden-state sequence, (B, h, hidden).
    """
    if ts_features.ndim == 2:
        ts_features = ts_features[None, ...]
    B, horizon, _ = ts_features.shape
    states = list(latents)
    outputs: list[Tensor] = []
    for k in range(horizon):
        inp: Tensor = ad.tensor(ts_features[:, k, :])
        for layer in range(cfg.layers):
            h, c = states[layer]
            h, c = lstm_cell(inp, h, c,
                             params[f"aee.dec.{layer}.w"],
                             params[f"aee.dec.{layer}.u"],
                             params[f"aee.dec.{layer}.b"])
            states[layer] = (h, c)
            inp = h
        outputs.append(inp)
    return ad.stack_steps(outputs)


def aux_head(embedding: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-step linear map hidden -> 1, squeezed to (B, h)."""
    out = ad.add_bias(ad.matmul(embedding, weight), bias)
    return ad.reshape(out, out.shape[:-1])
