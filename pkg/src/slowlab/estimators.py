"""Trainable estimators: flow likelihood, pair VAE, and contrastive PCL.

Every loss is assembled on the gradcore tape from a parameter mapping,
so the same builder serves training (reading a model's ParamStore) and
finite-difference checking (reading the checker's tensor dict).  Flows
are square and volume preserving except for the single-matrix linear
kind; VAEs carry diagonal Gaussian posteriors with a fixed observation
noise.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaln

from .gradcore import (
    GradcoreError,
    ParamStore,
    Tensor,
    absval,
    adam_step,
    backward,
    exp,
    matmul,
    normal_cdf,
    pow_const,
    slogdet,
    smooth_leaky_relu,
    softplus,
    tmean,
    tsum,
)
from .synthgen import PairBatch

__all__ = [
    "TrainLog",
    "FlowConfig",
    "FlowModel",
    "make_flow",
    "flow_forward",
    "flow_encode",
    "slowflow_nll",
    "train_slowflow",
    "VaeConfig",
    "VaeModel",
    "make_vae",
    "vae_encode",
    "vae_decode",
    "vae_encode_np",
    "slowvae_loss",
    "slowvae_terms",
    "pmvae_loss",
    "pmvae_terms",
    "train_slowvae",
    "PclConfig",
    "PclModel",
    "make_pcl",
    "pcl_logits",
    "pcl_loss",
    "pcl_accuracy",
    "pcl_train",
    "save_model",
    "load_model",
]

LOG_2PI = float(np.log(2.0 * np.pi))
MLP_SLOPE = 0.2


@dataclass
class TrainLog:
    """Per-step training record; step indices must strictly increase."""

    seed: int = 0
    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    kl_marginal: list = field(default_factory=list)
    kl_transition: list = field(default_factory=list)
    wall_clock: float = 0.0

    def add(self, step, loss, recon=None, kl_marginal=None, kl_transition=None):
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"step {step} does not advance past {self.steps[-1]}")
        self.steps.append(int(step))
        self.loss.append(float(loss))
        if recon is not None:
            self.recon.append(float(recon))
            self.kl_marginal.append(float(kl_marginal))
            self.kl_transition.append(float(kl_transition))


# ---------------------------------------------------------------------------
# flows


@dataclass
class FlowConfig:
    kind: str
    dim: int
    n_blocks: int = 6
    hidden: int = 64
    lam: float = 6.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "coupling"):
            raise ValueError(f"kind must be 'linear' or 'coupling', got {self.kind!r}")
        if self.dim < 1 or (self.kind == "coupling" and self.dim < 2):
            raise ValueError(f"invalid dim {self.dim} for kind {self.kind!r}")
        if self.n_blocks < 1 or self.hidden < 1:
            raise ValueError("n_blocks and hidden must be >= 1")
        if self.lam <= 0 or self.alpha <= 0:
            raise ValueError("lam and alpha must be > 0")


@dataclass
class FlowModel:
    config: FlowConfig
    store: ParamStore
    masks: list


def _orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def make_flow(config: FlowConfig, rng: np.random.Generator) -> FlowModel:
    store = ParamStore()
    masks = []
    if config.kind == "linear":
        store.add("W", _orthogonal(config.dim, rng))
    else:
        base = (np.arange(config.dim) % 2 == 0).astype(float)
        for k in range(config.n_blocks):
            m = base if k % 2 == 0 else 1.0 - base
            masks.append(m)
            store.add(f"blk{k}_W1", rng.standard_normal((config.dim, config.hidden))
                      / np.sqrt(config.dim))
            store.add(f"blk{k}_b1", np.zeros(config.hidden))
            # zero-initialized output layer makes the flow start at identity
            store.add(f"blk{k}_W2", np.zeros((config.hidden, config.dim)))
            store.add(f"blk{k}_b2", np.zeros(config.dim))
    return FlowModel(config, store, masks)


def flow_forward(model: FlowModel, x, params=None) -> Tensor:
    p = params if params is not None else model.store
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    if x.data.ndim != 2 or x.data.shape[1] != model.config.dim:
        raise ValueError(f"expected (n, {model.config.dim}) input, got {x.data.shape}")
    if model.config.kind == "linear":
        return matmul(x, p["W"])
    z = x
    for k, m in enumerate(model.masks):
        h = smooth_leaky_relu(matmul(z * m, p[f"blk{k}_W1"]) + p[f"blk{k}_b1"], MLP_SLOPE)
        t = matmul(h, p[f"blk{k}_W2"]) + p[f"blk{k}_b2"]
        z = z + (1.0 - m) * t
    return z


def flow_encode(model: FlowModel, x: np.ndarray) -> np.ndarray:
    """Plain-array encoding through the current weights."""
    return flow_forward(model, np.asarray(x, dtype=float)).data


def _genlap_log_norm(alpha: float, lam: float) -> float:
    return float(np.log(alpha) + np.log(lam) - np.log(2.0) - gammaln(1.0 / alpha))


def slowflow_nll(model: FlowModel, batch: PairBatch, lam: float, alpha: float = 1.0,
                 params=None) -> Tensor:
    """Mean negative pair log-likelihood under the temporal prior.

    Standard-normal marginal on the first slice, generalized-Laplace
    transition per dimension, plus the flow's volume change (zero for
    coupling blocks, 2 log|det W| per pair for the linear kind).  The
    alpha=1 default is the training objective; other shapes are meant
    for evaluation (alpha < 1 has unbounded gradients at zero steps).
    """
    if lam <= 0 or alpha <= 0:
        raise ValueError("lam and alpha must be > 0")
    if batch.dim != model.config.dim:
        raise ValueError(f"flow is square on dim {model.config.dim}; "
                         f"batch has dim {batch.dim}")
    p = params if params is not None else model.store
    z_prev = flow_forward(model, batch.prev, p)
    z_next = flow_forward(model, batch.next, p)
    d = model.config.dim

    log_marginal = -0.5 * d * LOG_2PI - 0.5 * tsum(z_prev * z_prev, axis=1)
    delta = z_next - z_prev
    if alpha == 1.0:
        energy = lam * tsum(absval(delta), axis=1)
    elif alpha == 2.0:
        energy = tsum(pow_const(lam * delta, 2.0), axis=1)
    else:
        energy = tsum(pow_const(lam * absval(delta), alpha), axis=1)
    log_transition = d * _genlap_log_norm(alpha, lam) - energy

    total = tmean(log_marginal + log_transition)
    if model.config.kind == "linear":
        total = total + 2.0 * slogdet(p["W"])
    return -total


def train_slowflow(
    dataset: PairBatch,
    config: FlowConfig,
    rng: np.random.Generator,
    steps: int = 10_000,
    batch_size: int = 256,
    lr: float = 1e-3,
    lr_decay: float = 1.0,
) -> tuple:
    """Adam on slowflow_nll over with-replacement batches."""
    model = make_flow(config, rng)
    log = TrainLog()
    start = time.perf_counter()
    n = dataset.count
    for t in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        sub = PairBatch(dataset.prev[idx], dataset.next[idx])
        model.store.zero_grad()
        loss = slowflow_nll(model, sub, config.lam, config.alpha)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"slowflow training diverged at step {t}")
        backward(loss)
        try:
            adam_step(model.store, lr=lr * (lr_decay**t))
        except GradcoreError as e:
            raise RuntimeError(f"slowflow training diverged at step {t}: {e}") from e
        log.add(t, loss.data)
    log.wall_clock = time.perf_counter() - start
    return model, log


# ---------------------------------------------------------------------------
# vae


@dataclass
class VaeConfig:
    latent_dim: int
    obs_dim: int
    encoder: str = "linear"
    decoder: str = "linear"
    hidden: int = 64
    sigma_x: float = 0.1

    def __post_init__(self):
        if self.latent_dim < 1 or self.obs_dim < 1:
            raise ValueError("latent_dim and obs_dim must be >= 1")
        for kind in (self.encoder, self.decoder):
            if kind not in ("linear", "mlp"):
                raise ValueError(f"network kind must be 'linear' or 'mlp', got {kind!r}")
        if self.sigma_x <= 0:
            raise ValueError("sigma_x must be > 0")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")


@dataclass
class VaeModel:
    config: VaeConfig
    store: ParamStore


def _tall_orthonormal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((max(rows, cols), cols)))
    return (q * np.sign(np.diag(r)))[:rows]


def make_vae(config: VaeConfig, rng: np.random.Generator) -> VaeModel:
    store = ParamStore()
    d_in, d_z, h = config.obs_dim, config.latent_dim, config.hidden
    if config.encoder == "linear":
        store.add("enc_W", _tall_orthonormal(d_in, d_z, rng))
        store.add("enc_b", np.zeros(d_z))
        store.add("enc_Wv", np.zeros((d_in, d_z)))
        store.add("enc_bv", np.zeros(d_z))
    else:
        store.add("enc_W1", rng.standard_normal((d_in, h)) / np.sqrt(d_in))
        store.add("enc_b1", np.zeros(h))
        store.add("enc_Wm", rng.standard_normal((h, d_z)) / np.sqrt(h))
        store.add("enc_bm", np.zeros(d_z))
        store.add("enc_Wv", np.zeros((h, d_z)))
        store.add("enc_bv", np.zeros(d_z))
    if config.decoder == "linear":
        store.add("dec_W", rng.standard_normal((d_z, d_in)) / np.sqrt(d_z))
        store.add("dec_b", np.zeros(d_in))
    else:
        store.add("dec_W1", rng.standard_normal((d_z, h)) / np.sqrt(d_z))
        store.add("dec_b1", np.zeros(h))
        store.add("dec_W2", rng.standard_normal((h, d_in)) / np.sqrt(h))
        store.add("dec_b2", np.zeros(d_in))
    return VaeModel(config, store)


def vae_encode(model: VaeModel, x, params=None) -> tuple:
    """Posterior parameters (mu, logvar) as graph nodes."""
    p = params if params is not None else model.store
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    if x.data.ndim != 2 or x.data.shape[1] != model.config.obs_dim:
        raise ValueError(f"expected (n, {model.config.obs_dim}) input, got {x.data.shape}")
    if model.config.encoder == "linear":
        mu = matmul(x, p["enc_W"]) + p["enc_b"]
        logvar = matmul(x, p["enc_Wv"]) + p["enc_bv"]
    else:
        h = smooth_leaky_relu(matmul(x, p["enc_W1"]) + p["enc_b1"], MLP_SLOPE)
        mu = matmul(h, p["enc_Wm"]) + p["enc_bm"]
        logvar = matmul(h, p["enc_Wv"]) + p["enc_bv"]
    return mu, logvar


def vae_decode(model: VaeModel, z: Tensor, params=None) -> Tensor:
    p = params if params is not None else model.store
    if model.config.decoder == "linear":
        return matmul(z, p["dec_W"]) + p["dec_b"]
    h = smooth_leaky_relu(matmul(z, p["dec_W1"]) + p["dec_b1"], MLP_SLOPE)
    return matmul(h, p["dec_W2"]) + p["dec_b2"]


def vae_encode_np(model: VaeModel, x: np.ndarray) -> tuple:
    """Posterior means and sigmas as plain arrays (metric encoder hook)."""
    mu, logvar = vae_encode(model, np.asarray(x, dtype=float))
    return mu.data, np.exp(0.5 * logvar.data)


def _recon_loglik(x_const: Tensor, xhat: Tensor, sigma_x: float) -> Tensor:
    d = x_const.data.shape[1]
    diff = x_const - xhat
    return (-0.5 * d * (LOG_2PI + 2.0 * np.log(sigma_x))
            - tsum(diff * diff, axis=1) / (2.0 * sigma_x**2))


def _kl_marginal(mu: Tensor, logvar: Tensor) -> Tensor:
    per_dim = -0.5 * logvar + 0.5 * (mu * mu + exp(logvar) - 1.0)
    return tsum(per_dim, axis=1)


def _folded_mean_node(delta: Tensor, sigma: Tensor) -> Tensor:
    ratio = delta / sigma
    gauss = sigma * float(np.sqrt(2.0 / np.pi)) * exp(-0.5 * pow_const(ratio, 2.0))
    return gauss - delta * (1.0 - 2.0 * normal_cdf(ratio))


def _kl_transition_laplace(mu_prev: Tensor, mu_t: Tensor, logvar_t: Tensor,
                           lam: float) -> Tensor:
    sigma_t = exp(0.5 * logvar_t)
    cross = -float(np.log(lam / 2.0)) + lam * _folded_mean_node(mu_t - mu_prev, sigma_t)
    neg_entropy = -0.5 * (LOG_2PI + 1.0) - 0.5 * logvar_t
    return tsum(cross + neg_entropy, axis=1)


def _kl_transition_gauss(mu_prev: Tensor, logvar_prev: Tensor, mu_t: Tensor,
                         logvar_t: Tensor) -> Tensor:
    diff = mu_t - mu_prev
    per_dim = (0.5 * (logvar_prev - logvar_t)
               + (exp(logvar_t) + diff * diff) / (2.0 * exp(logvar_prev))
               - 0.5)
    return tsum(per_dim, axis=1)


def _vae_terms(model, batch, gamma, lam, rng, bidirectional, transition, params):
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if transition == "laplace" and lam <= 0:
        raise ValueError(f"lam must be > 0, got {lam}")
    if batch.dim != model.config.obs_dim:
        raise ValueError(f"batch dim {batch.dim} != model obs dim {model.config.obs_dim}")
    p = params if params is not None else model.store
    xp = Tensor(np.asarray(batch.prev, dtype=float))
    xn = Tensor(np.asarray(batch.next, dtype=float))
    mu_p, lv_p = vae_encode(model, xp, p)
    mu_n, lv_n = vae_encode(model, xn, p)
    eps_p = rng.standard_normal(mu_p.data.shape)
    eps_n = rng.standard_normal(mu_n.data.shape)
    z_p = mu_p + exp(0.5 * lv_p) * eps_p
    z_n = mu_n + exp(0.5 * lv_n) * eps_n

    sx = model.config.sigma_x
    recon = tmean(_recon_loglik(xp, vae_decode(model, z_p, p), sx)
                  + _recon_loglik(xn, vae_decode(model, z_n, p), sx))

    if transition == "laplace":
        klt_fwd = _kl_transition_laplace(mu_p, mu_n, lv_n, lam)
        klt_bwd = _kl_transition_laplace(mu_n, mu_p, lv_p, lam)
    else:
        klt_fwd = _kl_transition_gauss(mu_p, lv_p, mu_n, lv_n)
        klt_bwd = _kl_transition_gauss(mu_n, lv_n, mu_p, lv_p)

    if bidirectional:
        klm = tmean(0.5 * (_kl_marginal(mu_p, lv_p) + _kl_marginal(mu_n, lv_n)))
        klt = tmean(0.5 * (klt_fwd + klt_bwd))
    else:
        klm = tmean(_kl_marginal(mu_p, lv_p))
        klt = tmean(klt_fwd)

    neg_recon = -recon
    loss = neg_recon + klm + gamma * klt
    terms = {
        "recon": float(neg_recon.data),
        "kl_marginal": float(klm.data),
        "kl_transition": float(klt.data),
    }
    return loss, terms


def slowvae_terms(model: VaeModel, batch: PairBatch, gamma: float, lam: float,
                  rng: np.random.Generator, bidirectional: bool = True,
                  params=None) -> tuple:
    """Loss node plus its decomposition; loss = recon + klm + gamma*klt
    holds exactly by construction."""
    return _vae_terms(model, batch, gamma, lam, rng, bidirectional, "laplace", params)


def slowvae_loss(model: VaeModel, batch: PairBatch, gamma: float, lam: float,
                 rng: np.random.Generator, bidirectional: bool = True,
                 params=None) -> Tensor:
    """One-sample pair objective: Gaussian reconstruction of both slices,
    standard-normal marginal KL, and gamma-weighted Laplace transition
    KL conditioned at the previous posterior mean; optionally
    symmetrized over time order."""
    return slowvae_terms(model, batch, gamma, lam, rng, bidirectional, params)[0]


def pmvae_terms(model: VaeModel, batch: PairBatch, gamma: float,
                rng: np.random.Generator, bidirectional: bool = True,
                params=None) -> tuple:
    return _vae_terms(model, batch, gamma, None, rng, bidirectional, "gauss", params)


def pmvae_loss(model: VaeModel, batch: PairBatch, gamma: float,
               rng: np.random.Generator, bidirectional: bool = True,
               params=None) -> Tensor:
    """Posterior-matching ablation: the transition term is the closed
    Gaussian-Gaussian KL against the previous posterior."""
    return pmvae_terms(model, batch, gamma, rng, bidirectional, params)[0]


def train_slowvae(
    dataset: PairBatch,
    config: VaeConfig,
    rng: np.random.Generator,
    gamma: float = 10.0,
    lam: float = 6.0,
    steps: int = 10_000,
    batch_size: int = 256,
    lr: float = 1e-3,
    lr_decay: float = 1.0,
    bidirectional: bool = True,
    transition: str = "laplace",
) -> tuple:
    """Adam on the pair ELBO; transition='gauss' trains the ablation."""
    model = make_vae(config, rng)
    log = TrainLog()
    start = time.perf_counter()
    n = dataset.count
    for t in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        sub = PairBatch(dataset.prev[idx], dataset.next[idx])
        model.store.zero_grad()
        if transition == "laplace":
            loss, terms = slowvae_terms(model, sub, gamma, lam, rng, bidirectional)
        else:
            loss, terms = pmvae_terms(model, sub, gamma, rng, bidirectional)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"vae training diverged at step {t}")
        backward(loss)
        try:
            adam_step(model.store, lr=lr * (lr_decay**t))
        except GradcoreError as e:
            raise RuntimeError(f"vae training diverged at step {t}: {e}") from e
        log.add(t, loss.data, terms["recon"], terms["kl_marginal"], terms["kl_transition"])
    log.wall_clock = time.perf_counter() - start
    return model, log


# ---------------------------------------------------------------------------
# pcl


@dataclass
class PclConfig:
    dim: int
    encoder: str = "coupling"
    n_blocks: int = 4
    hidden: int = 64

    def __post_init__(self):
        FlowConfig(self.encoder, self.dim, self.n_blocks, self.hidden)


@dataclass
class PclModel:
    config: PclConfig
    encoder: FlowModel
    store: ParamStore


_DISC_NAMES = ("disc_w", "disc_k", "disc_qa", "disc_qb", "disc_qc",
               "disc_la", "disc_lb", "disc_c")


def make_pcl(config: PclConfig, rng: np.random.Generator) -> PclModel:
    encoder = make_flow(FlowConfig(config.encoder, config.dim, config.n_blocks,
                                   config.hidden), rng)
    store = encoder.store
    d = config.dim
    for name in _DISC_NAMES:
        init = np.ones(d) if name == "disc_k" else np.zeros(d)
        store.add(name, init)
    return PclModel(config, encoder, store)


def pcl_logits(model: PclModel, x_prev, x_next, params=None) -> Tensor:
    """Pair score r(x, x') = sum_i of a per-dimension feature combining
    an absolute regression residual with a full quadratic in the two
    encoded coordinates."""
    p = params if params is not None else model.store
    a = flow_forward(model.encoder, x_prev, p)
    b = flow_forward(model.encoder, x_next, p)
    feat = (p["disc_w"] * absval(b - p["disc_k"] * a)
            + p["disc_qa"] * (a * a) + p["disc_qb"] * (a * b) + p["disc_qc"] * (b * b)
            + p["disc_la"] * a + p["disc_lb"] * b + p["disc_c"])
    return tsum(feat, axis=1)


def pcl_loss(model: PclModel, batch: PairBatch, rng: np.random.Generator,
             params=None) -> Tensor:
    """Logistic contrast of true pairs against within-batch permuted ones."""
    if batch.count < 2:
        raise ValueError("need at least 2 pairs to build permuted negatives")
    perm = rng.permutation(batch.count)
    r_pos = pcl_logits(model, batch.prev, batch.next, params)
    r_neg = pcl_logits(model, batch.prev, batch.next[perm], params)
    return tmean(softplus(-r_pos)) + tmean(softplus(r_neg))


def pcl_accuracy(model: PclModel, batch: PairBatch, rng: np.random.Generator) -> float:
    """Fraction of true pairs scored positive and permuted pairs negative."""
    perm = rng.permutation(batch.count)
    r_pos = pcl_logits(model, batch.prev, batch.next).data
    r_neg = pcl_logits(model, batch.prev, batch.next[perm]).data
    return float(0.5 * ((r_pos > 0).mean() + (r_neg <= 0).mean()))


def pcl_train(
    dataset: PairBatch,
    config: PclConfig,
    rng: np.random.Generator,
    steps: int = 10_000,
    batch_size: int = 256,
    lr: float = 1e-3,
    lr_decay: float = 1.0,
) -> tuple:
    if dataset.count < 2000:
        raise ValueError(f"contrastive training needs >= 2000 pairs, got {dataset.count}")
    model = make_pcl(config, rng)
    log = TrainLog()
    start = time.perf_counter()
    n = dataset.count
    for t in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        sub = PairBatch(dataset.prev[idx], dataset.next[idx])
        model.store.zero_grad()
        loss = pcl_loss(model, sub, rng)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"pcl training diverged at step {t}")
        backward(loss)
        try:
            adam_step(model.store, lr=lr * (lr_decay**t))
        except GradcoreError as e:
            raise RuntimeError(f"pcl training diverged at step {t}: {e}") from e
        log.add(t, loss.data)
    log.wall_clock = time.perf_counter() - start
    return model, log


# ---------------------------------------------------------------------------
# checkpoints


_CONFIG_TYPES = {"flow": FlowConfig, "vae": VaeConfig, "pcl": PclConfig}


def save_model(model, path_base: str, seed: int = 0, step: int = 0) -> None:
    """Named-tensor .npz plus a JSON manifest at path_base.{npz,json}."""
    if isinstance(model, FlowModel):
        kind = "flow"
    elif isinstance(model, VaeModel):
        kind = "vae"
    elif isinstance(model, PclModel):
        kind = "pcl"
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    arrays = {name: t.data for name, t in model.store.items()}
    np.savez(f"{path_base}.npz", **arrays)
    manifest = {"kind": kind, "config": asdict(model.config), "seed": seed, "step": step}
    with open(f"{path_base}.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_model(path_base: str):
    with open(f"{path_base}.json") as fh:
        manifest = json.load(fh)
    kind = manifest["kind"]
    if kind not in _CONFIG_TYPES:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    config = _CONFIG_TYPES[kind](**manifest["config"])
    rng = np.random.default_rng(0)
    if kind == "flow":
        model = make_flow(config, rng)
    elif kind == "vae":
        model = make_vae(config, rng)
    else:
        model = make_pcl(config, rng)
    with np.load(f"{path_base}.npz") as archive:
        model.store.load_state_dict({k: archive[k] for k in archive.files})
    return model
