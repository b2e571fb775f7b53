"""Pair-wise interaction encoders over agents (spatial) and time (temporal).

Both encoders use pre-norm blocks: x + MHA(LN(x)) then x + FFN(LN(x)),
with additive masks carrying presence and a learned distance/time-gap
bias.  The spatial encoder adds a distance-thresholded graph-convolution
branch residually after attention; agents are unordered, so only the
temporal encoder gets positional codes.  Absent (agent, timestep) slots
are zeroed on output.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import (
    build_spatial_masks_batch,
    build_temporal_mask,
    masked_mha,
    pairwise_distances,
    positional_encode,
)
from .autodiff import Tensor


def ffn_forward(params, prefix, x):
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}/w1"]), params[f"{prefix}/b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}/w2"]), params[f"{prefix}/b2"])


def layer_norm_p(params, prefix, x):
    return ad.layer_norm(x, params[f"{prefix}/g"], params[f"{prefix}/b"])


def gcn_adjacency(positions, presence, radius):
    """Symmetric-normalized proximity adjacency per timestep.

    positions: [T, N, 2]; presence: [T, N].  Edges link present agents
    closer than ``radius`` (self-loops included); absent agents get zero
    rows and columns.
    """
    presence = np.asarray(presence, dtype=bool)
    dist = pairwise_distances(positions)
    pair_ok = presence[:, :, None] & presence[:, None, :]
    a = ((dist < radius) & pair_ok).astype(np.float64)
    deg = a.sum(axis=-1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return inv[:, :, None] * a * inv[:, None, :]


def _encoder_block(params, prefix, x, heads, mask, adj=None, record=None, record_key=None):
    """Pre-norm attention (+ optional GCN residual) + feed-forward."""
    attn_in = layer_norm_p(params, f"{prefix}/ln1", x)
    attended = masked_mha(params, f"{prefix}/attn", attn_in, attn_in, heads,
                          mask=mask, record=record, record_key=record_key)
    x = ad.add(x, attended)
    if adj is not None:
        conv = ad.relu(ad.matmul(ad.matmul(adj, x), params[f"{prefix}/gcn/w"]))
        x = ad.add(x, conv)
    return ad.add(x, ffn_forward(params, f"{prefix}/ffn", layer_norm_p(params, f"{prefix}/ln2", x)))


def spatial_forward(params, cfg, x_obs, presence_obs, record=None):
    """Cross-agent attention per timestep; returns [N, T_i, d_model].

    x_obs: [N, T_i, 2] observed positions (absent slots zero);
    presence_obs: [N, T_i] bool.
    """
    pos_t = np.asarray(x_obs, dtype=np.float64).transpose(1, 0, 2)  # [T, N, 2]
    pres_t = np.asarray(presence_obs, dtype=bool).T  # [T, N]
    dtype = params["spatial/embed/w"].dtype
    keep = Tensor(pres_t[:, :, None].astype(dtype))

    x = ad.add(ad.matmul(Tensor(pos_t, dtype=dtype), params["spatial/embed/w"]), params["spatial/embed/b"])
    x = ad.mul(x, keep)

    mask = build_spatial_masks_batch(pos_t, pres_t, params["spatial/mask/w"], params["spatial/mask/b"])
    adj = Tensor(gcn_adjacency(pos_t, pres_t, cfg.gcn_radius), dtype=dtype)

    for layer in range(cfg.layers):
        x = _encoder_block(params, f"spatial/l{layer}", x, cfg.heads, mask, adj=adj,
                           record=record, record_key=f"attn/spatial/{layer}")
    x = layer_norm_p(params, "spatial/ln_out", x)
    x = ad.mul(x, keep)
    return ad.swapaxes(x, 0, 1)  # [N, T, d]


def temporal_forward(params, cfg, x_obs, presence_obs, record=None):
    """Per-agent attention across observed timesteps; returns [N, T_i, d_model]."""
    pos = np.asarray(x_obs, dtype=np.float64)  # [N, T, 2]
    pres = np.asarray(presence_obs, dtype=bool)
    dtype = params["temporal/embed/w"].dtype
    keep = Tensor(pres[:, :, None].astype(dtype))

    x = ad.add(ad.matmul(Tensor(pos, dtype=dtype), params["temporal/embed/w"]), params["temporal/embed/b"])
    x = ad.mul(x, keep)
    x = positional_encode(x)

    mask = build_temporal_mask(pres, params["temporal/mask/w"], params["temporal/mask/b"],
                               use_gap_bias=cfg.temporal_bias)

    for layer in range(cfg.layers):
        x = _encoder_block(params, f"temporal/l{layer}", x, cfg.heads, mask,
                           record=record, record_key=f"attn/temporal/{layer}")
    x = layer_norm_p(params, "temporal/ln_out", x)
    return ad.mul(x, keep)
