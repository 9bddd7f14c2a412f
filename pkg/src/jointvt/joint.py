"""Joint model: two autoencoders tied by a shared-latent flow bridge plus
conditional flow priors on each domain-only slice."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .flows import FlowChain, LOG_2PI, log_prob, sample_mode, std_normal_logpdf
from .models import Autoencoder, AutoencoderConfig, LatentCode, PartitionSpec, recon_loss

COMPONENTS = ("rec_g", "rec_s", "g2s", "s2g", "nll_g", "nll_s", "nll_shared")


@dataclass
class LossWeights:
    rec_g: float = 1.0
    rec_s: float = 1.0
    map: float = 1.0
    prior: float = 0.1
    entropy: float = 0.0  # multiplies an identically-zero term for deterministic encoders
    prior_encoder: float = 0.0  # share of the prior-loss gradient that reaches the encoders

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


@dataclass
class ModelConfig:
    height: int = 32
    width: int = 32
    geometry_channels: int = 1
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    channels: tuple = (16, 32, 64, 64)
    attention_stage: int = 3
    attention_reduction: int = 1
    bridge_steps: int = 8
    prior_steps: int = 4
    flow_hidden: int = 128
    coupling_clamp: float = 5.0
    sigma: float = 0.1  # decoder noise scale for the evidence bound

    def ae_config(self, domain):
        p = self.partition
        return AutoencoderConfig(
            in_channels=self.geometry_channels if domain == "g" else 1,
            height=self.height, width=self.width, channels=tuple(self.channels),
            attention_stage=self.attention_stage,
            attention_reduction=self.attention_reduction,
            latent_dim=p.d_l_g if domain == "g" else p.d_l_s)

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["partition"] = PartitionSpec(**d["partition"])
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def mapping_losses(g_shared, s_shared, bridge: FlowChain):
    """Mean squared error between each shared slice and the other mapped across."""
    pred_s, _ = bridge.forward(g_shared)
    pred_g, _ = bridge.inverse(s_shared)
    return ad.mse(s_shared, pred_s), ad.mse(g_shared, pred_g)


def prior_losses(z_g, z_s, part: PartitionSpec, prior_g: FlowChain, prior_s: FlowChain):
    """Batch-mean negative log-likelihoods of each domain-only slice (given its
    shared slice) and of the shared slices under a standard normal."""
    g_sh, g_only = z_g[:, :part.d_shared], z_g[:, part.d_shared:]
    s_sh, s_only = z_s[:, :part.d_shared], z_s[:, part.d_shared:]
    nll_g = -log_prob(g_only, prior_g, cond=g_sh).mean()
    nll_s = -log_prob(s_only, prior_s, cond=s_sh).mean()
    nll_shared = -(std_normal_logpdf(g_sh) + std_normal_logpdf(s_sh)).mean() * 0.5
    return nll_g, nll_s, nll_shared


def scale_grad(x, alpha):
    """Identity in the forward pass; scales the gradient flowing back by ``alpha``."""
    if alpha == 1.0:
        return x
    if alpha == 0.0:
        return x.detach()
    return x * alpha + x.detach() * (1.0 - alpha)


def total_loss(parts: dict, w: LossWeights):
    return (parts["rec_g"] * w.rec_g + parts["rec_s"] * w.rec_s
            + (parts["g2s"] + parts["s2g"]) * w.map
            + (parts["nll_g"] + parts["nll_s"] + parts["nll_shared"]) * w.prior)


def gaussian_loglik(x, x_rec, sigma):
    """Per-sample log N(x; x_rec, sigma^2 I), summed over pixels."""
    x = np.asarray(x, dtype=np.float64)
    x_rec = np.asarray(x_rec, dtype=np.float64)
    d = int(np.prod(x.shape[1:]))
    sq = ((x - x_rec) ** 2).reshape(x.shape[0], d).sum(axis=1)
    return -0.5 * sq / sigma ** 2 - 0.5 * d * np.log(2 * np.pi * sigma ** 2)


class JointModel(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        part = cfg.partition
        self.ae_g = Autoencoder(cfg.ae_config("g"), rng)
        self.ae_s = Autoencoder(cfg.ae_config("s"), rng)
        # g -> s on the shared slices
        self.bridge = FlowChain(part.d_shared, cfg.bridge_steps, rng, cfg.flow_hidden,
                                clamp=cfg.coupling_clamp, direction="normalizing")
        self.prior_g = FlowChain(part.d_g_only, cfg.prior_steps, rng, cfg.flow_hidden,
                                 cond_dim=part.d_shared, clamp=cfg.coupling_clamp,
                                 direction="normalizing")
        self.prior_s = FlowChain(part.d_s_only, cfg.prior_steps, rng, cfg.flow_hidden,
                                 cond_dim=part.d_shared, clamp=cfg.coupling_clamp,
                                 direction="normalizing")

    @property
    def part(self):
        return self.cfg.partition

    def component_modules(self):
        return {"ae_g": self.ae_g, "ae_s": self.ae_s, "bridge": self.bridge,
                "prior_g": self.prior_g, "prior_s": self.prior_s}

    # training objective
    def loss_parts(self, x_g, x_s, prior_encoder=0.0):
        x_g, x_s = ad.tensor.as_tensor(x_g), ad.tensor.as_tensor(x_s)
        d = self.part.d_shared
        z_g = self.ae_g.encode(x_g)
        z_s = self.ae_s.encode(x_s)
        rec_g = self.ae_g.decode(z_g)
        rec_s = self.ae_s.decode(z_s)
        g2s, s2g = mapping_losses(z_g[:, :d], z_s[:, :d], self.bridge)
        nll_g, nll_s, nll_shared = prior_losses(scale_grad(z_g, prior_encoder),
                                                scale_grad(z_s, prior_encoder),
                                                self.part, self.prior_g, self.prior_s)
        parts = {"rec_g": recon_loss(x_g, rec_g), "rec_s": recon_loss(x_s, rec_s),
                 "g2s": g2s, "s2g": s2g, "nll_g": nll_g, "nll_s": nll_s,
                 "nll_shared": nll_shared}
        return parts, (rec_g, rec_s)

    def elbo_report(self, x_g, x_s, parts=None, recons=None):
        """Evidence-bound pieces per sample (nats), averaged over the batch.

        The encoders are deterministic so the entropy term is zero.
        """
        if parts is None:
            with ad.no_grad():
                parts, recons = self.loss_parts(x_g, x_s)
        sigma = self.cfg.sigma
        data = (gaussian_loglik(_np(x_g), recons[0].data, sigma)
                + gaussian_loglik(_np(x_s), recons[1].data, sigma)).mean()
        prior = -(parts["nll_g"].item() + parts["nll_s"].item() + parts["nll_shared"].item())
        return {"data_term": float(data), "prior_term": float(prior), "entropy_term": 0.0,
                "elbo": float(data + prior)}

    # inference
    def _ready_flows(self):
        # act-norms never fed data (an untrained model) act as the identity
        for chain in (self.bridge, self.prior_g, self.prior_s):
            for step in chain.steps:
                if not step.actnorm.is_initialized:
                    step.actnorm.set(1.0, 0.0)

    def _batch(self, x, domain):
        x = np.asarray(getattr(x, "pixels", getattr(x, "values", x)), dtype=np.float32)
        return x[None] if x.ndim == 3 else x

    def encode_geometry(self, x):
        return LatentCode(self.ae_g.encode(Tensor(self._batch(x, "g"))).data,
                          self.part.d_shared, "g")

    def encode_spectrogram(self, x):
        return LatentCode(self.ae_s.encode(Tensor(self._batch(x, "s"))).data,
                          self.part.d_shared, "s")

    def map_g2s(self, g_shared):
        self._ready_flows()
        return self.bridge.forward(Tensor(g_shared))[0].data

    def map_s2g(self, s_shared):
        self._ready_flows()
        return self.bridge.inverse(Tensor(s_shared))[0].data

    def geometry_to_spectrogram(self, x_g):
        """Geometry image(s) -> mel image(s), via the bridge and the mode of the
        speech-side conditional prior."""
        with ad.no_grad():
            code = self.encode_geometry(x_g)
            s_sh = self.map_g2s(code.shared)
            s_only = sample_mode(self.prior_s, len(s_sh), Tensor(s_sh)).data
            z = np.concatenate([s_sh, s_only], axis=1)
            return self.ae_s.decode(Tensor(z)).data, code

    def spectrogram_to_geometry(self, x_s):
        with ad.no_grad():
            code = self.encode_spectrogram(x_s)
            g_sh = self.map_s2g(code.shared)
            g_only = sample_mode(self.prior_g, len(g_sh), Tensor(g_sh)).data
            z = np.concatenate([g_sh, g_only], axis=1)
            return self.ae_g.decode(Tensor(z)).data, code


def _np(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)
