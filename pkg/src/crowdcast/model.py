"""Full forecasting model: branch encoders, fusion, CVAE heads, parameters.

Parameters live in a flat name -> Tensor dict so the optimizer, the
checkpoint archive, and gradient checks all see one namespace.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import cvae
from .autodiff import Tensor
from .checkpoint import load_archive, save_archive, verify_names_shapes
from .data import last_observed_positions
from .fusion import fuse
from .hypergraph import multiscale_group_features
from .transformer import spatial_forward, temporal_forward


def _xavier(rng, n_in, n_out):
    s = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-s, s, size=(n_in, n_out))


class _Builder:
    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.p = {}

    def weight(self, name, n_in, n_out, zero=False):
        w = np.zeros((n_in, n_out)) if zero else _xavier(self.rng, n_in, n_out)
        self.p[name] = Tensor(w, requires_grad=True, dtype=self.dtype)

    def vector(self, name, n, value=0.0):
        self.p[name] = Tensor(np.full(n, value, dtype=np.float64), requires_grad=True, dtype=self.dtype)

    def linear(self, prefix, n_in, n_out, zero=False, suffix=("w", "b")):
        self.weight(f"{prefix}/{suffix[0]}", n_in, n_out, zero=zero)
        self.vector(f"{prefix}/{suffix[1]}", n_out)

    def ln(self, prefix, d):
        self.vector(f"{prefix}/g", d, value=1.0)
        self.vector(f"{prefix}/b", d)

    def mha(self, prefix, d):
        for gate in ("wq", "wk", "wv", "wo"):
            self.weight(f"{prefix}/{gate}", d, d)
        for gate in ("bq", "bk", "bv", "bo"):
            self.vector(f"{prefix}/{gate}", d)

    def ffn(self, prefix, d, hidden):
        self.linear(f"{prefix}/ffn", d, hidden, suffix=("w1", "b1"))
        self.linear(f"{prefix}/ffn", hidden, d, suffix=("w2", "b2"))

    def encoder_stack(self, prefix, cfg, with_gcn):
        d = cfg.d_model
        self.linear(f"{prefix}/embed", 2, d)
        self.vector(f"{prefix}/mask/w", 1)
        self.vector(f"{prefix}/mask/b", 1)
        for layer in range(cfg.layers):
            base = f"{prefix}/l{layer}"
            self.ln(f"{base}/ln1", d)
            self.mha(f"{base}/attn", d)
            if with_gcn:
                self.weight(f"{base}/gcn/w", d, d)
            self.ln(f"{base}/ln2", d)
            self.ffn(base, d, cfg.ffn_hidden)
        self.ln(f"{prefix}/ln_out", d)


def init_params(cfg, seed):
    """Deterministic parameter dict for the given config and seed."""
    b = _Builder(np.random.default_rng(seed), cfg.dtype)
    d = cfg.d_model

    b.encoder_stack("spatial", cfg, with_gcn=True)
    b.encoder_stack("temporal", cfg, with_gcn=False)

    b.linear("hyper/embed", 2 * cfg.t_in, cfg.d_emb)
    for idx in range(len(cfg.scales)):
        b.weight(f"hyper/conv{idx}/theta1", cfg.d_emb, d)
        b.weight(f"hyper/conv{idx}/theta2", d, d)
    b.linear("hyper/mlp", d, d, suffix=("w1", "b1"))
    b.linear("hyper/mlp", d, d, suffix=("w2", "b2"))

    for name in ("cross_s", "cross_t", "cross_h"):
        base = f"fusion/{name}"
        b.ln(f"{base}/ln_q", d)
        b.ln(f"{base}/ln_kv", d)
        b.mha(f"{base}/attn", d)
        b.ln(f"{base}/ln2", d)
        b.ffn(base, d, cfg.ffn_hidden)
    b.ln("fusion/self/ln1", d)
    b.mha("fusion/self/attn", d)
    b.ln("fusion/self/ln2", d)
    b.ffn("fusion/self", d, cfg.ffn_hidden)
    b.ln("fusion/ln_out", d)

    b.linear("cvae/obs", 2 * cfg.t_in, d)
    b.linear("cvae/fut", 2 * cfg.t_out, d)
    b.linear("cvae/post", 3 * d, cfg.cvae_hidden, suffix=("w1", "b1"))
    b.linear("cvae/post", cfg.cvae_hidden, 2 * cfg.d_z, zero=True, suffix=("w2", "b2"))
    b.linear("cvae/recon", cfg.cvae_hidden, 2 * cfg.t_in, zero=True)
    b.linear("cvae/dec", cfg.d_z + 2 * d, cfg.cvae_hidden, suffix=("w1", "b1"))
    b.linear("cvae/dec", cfg.cvae_hidden, 2 * cfg.t_out, zero=True, suffix=("w2", "b2"))
    return b.p


class CrowdForecaster:
    """Forecasting pipeline over normalized trajectory windows."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.params = init_params(cfg, seed)

    # -- persistence -------------------------------------------------------

    def save(self, path):
        save_archive(path, {name: t.data for name, t in self.params.items()})

    def load(self, path):
        loaded = load_archive(path)
        verify_names_shapes(loaded, {name: t.shape for name, t in self.params.items()})
        for name, t in self.params.items():
            t.data = loaded[name].astype(t.dtype)
        return self

    # -- forward paths -------------------------------------------------------

    def features(self, window, record=None, hyper_dump=None):
        """Fused crowd feature, observation embedding, and anchors."""
        x_obs, pres_obs = window.observed()
        y_s = spatial_forward(self.params, self.cfg, x_obs, pres_obs, record=record)
        y_t = temporal_forward(self.params, self.cfg, x_obs, pres_obs, record=record)
        y_h = multiscale_group_features(x_obs, pres_obs, self.params, "hyper", self.cfg.scales, dump=hyper_dump)
        y_m = fuse(self.params, self.cfg, y_s, y_t, y_h, record=record)
        obs_emb = cvae.observed_embedding(self.params, x_obs, pres_obs)
        anchors = last_observed_positions(window)
        return y_m, obs_emb, anchors

    def training_loss(self, window, latent_eps=None, rng=None):
        """Loss on one normalized window; draws the latent from ``rng``
        unless an explicit ``latent_eps`` is given (gradient checks)."""
        cfg = self.cfg
        x_obs, pres_obs = window.observed()
        x_fut, pres_fut = window.future()
        y_m, obs_emb, anchors = self.features(window)
        posterior, recon = cvae.encode_posterior(self.params, x_obs, pres_obs, x_fut, y_m, cfg.d_z)
        if latent_eps is None:
            latent_eps = rng.standard_normal((window.n_agents, cfg.d_z))
        z = cvae.reparameterize(posterior, latent_eps)
        pred = cvae.decode_trajectories(self.params, z, obs_emb, y_m, anchors, cfg.t_out)
        return cvae.loss_total(
            pred, x_fut, pres_fut, posterior, recon, x_obs, pres_obs,
            (cfg.kappa1, cfg.kappa2, cfg.kappa3, cfg.kappa4), cfg.sigma_prior,
        )

    def sample_futures(self, window, k, rng, record=None, hyper_dump=None):
        """K prior-sampled futures [K, N, T_o, 2] for a normalized window."""
        cfg = self.cfg
        with ad.no_grad():
            y_m, obs_emb, anchors = self.features(window, record=record, hyper_dump=hyper_dump)
            out = np.zeros((k, window.n_agents, cfg.t_out, 2))
            for i in range(k):
                z = cvae.sample_latent(None, rng, "test", n=window.n_agents, d_z=cfg.d_z,
                                       sigma_prior=cfg.sigma_prior, dtype=cfg.dtype)
                pred = cvae.decode_trajectories(self.params, z, obs_emb, y_m, anchors, cfg.t_out)
                out[i] = pred.data
        return out
