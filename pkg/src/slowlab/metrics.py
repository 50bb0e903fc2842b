"""Disentanglement scoring between ground-truth factors and encodings.

All metrics consume plain numpy arrays: latents are encoder means on
evaluation samples, factors are ground-truth values (continuous or
integer-coded).  Correlation-based scoring (MCC) and the MI-based
family (MIG, Modularity) are complemented by the classifier metrics
(SAP, BetaVAE, FactorVAE); classifier fits run on the local autodiff
tape with an isolated parameter store per call.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .gradcore import ParamStore, Tensor, adam_step, backward, exp, log, matmul, tsum

__all__ = [
    "MetricInput",
    "MccReport",
    "spearman",
    "mcc",
    "discrete_mi",
    "discrete_entropy",
    "mi_matrix",
    "mig",
    "modularity",
    "modularity_from_mi",
    "sap",
    "factorvae_score",
    "betavae_score",
    "metric_report",
]

FACTOR_KINDS = ("continuous", "categorical", "circular")
MIN_SAMPLES = 1000


@dataclass
class MetricInput:
    """Evaluation bundle: latents N x D', factors N x D, one kind per factor."""

    latents: np.ndarray
    factors: np.ndarray
    factor_kinds: tuple = ()

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=float)
        self.factors = np.asarray(self.factors)
        if self.latents.ndim != 2 or self.factors.ndim != 2:
            raise ValueError("latents and factors must be 2-D")
        if self.latents.shape[0] != self.factors.shape[0]:
            raise ValueError("latents and factors disagree on sample count")
        if self.latents.shape[0] < MIN_SAMPLES:
            raise ValueError(f"need at least {MIN_SAMPLES} samples for stable estimates")
        if self.latents.shape[1] < self.factors.shape[1]:
            raise ValueError("need at least as many latents as factors")
        if not np.all(np.isfinite(self.latents)):
            raise ValueError("latents must be finite")
        if not np.all(np.isfinite(np.asarray(self.factors, dtype=float))):
            raise ValueError("factors must be finite")
        kinds = tuple(self.factor_kinds) if self.factor_kinds else ("continuous",) * self.factors.shape[1]
        if len(kinds) != self.factors.shape[1]:
            raise ValueError("factor_kinds length must match factor count")
        for k in kinds:
            if k not in FACTOR_KINDS:
                raise ValueError(f"unknown factor kind {k!r}")
        self.factor_kinds = kinds

    @property
    def n_samples(self) -> int:
        return self.latents.shape[0]

    @property
    def n_latents(self) -> int:
        return self.latents.shape[1]

    @property
    def n_factors(self) -> int:
        return self.factors.shape[1]


@dataclass
class MccReport:
    corr: np.ndarray
    assignment: dict
    matched: np.ndarray
    score: float


# ---------------------------------------------------------------------------
# correlation


def spearman(x, y) -> float:
    """Pearson correlation of fractional ranks; ties get average ranks."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length vectors of size >= 2")
    return float(np.corrcoef(rankdata(x), rankdata(y))[0, 1])


def _abs_corr_matrix(lat: np.ndarray, fac: np.ndarray, correlation: str) -> np.ndarray:
    if correlation == "spearman":
        lat = np.apply_along_axis(rankdata, 0, lat)
        fac = np.apply_along_axis(rankdata, 0, fac)
    elif correlation != "pearson":
        raise ValueError(f"correlation must be 'spearman' or 'pearson', got {correlation!r}")
    dl, df = lat.shape[1], fac.shape[1]
    with np.errstate(invalid="ignore", divide="ignore"):
        full = np.corrcoef(lat.T, fac.T)
    c = np.abs(full[:dl, dl:])
    if np.any(~np.isfinite(c)):
        warnings.warn("constant column in correlation matrix; entries set to 0")
        c = np.nan_to_num(c, nan=0.0)
    return c


def _best_relabeling(column: np.ndarray, latents: np.ndarray, correlation: str) -> np.ndarray:
    values = np.unique(column)
    if values.size > 8:
        raise ValueError("category relabeling is brute force; needs <= 8 distinct values")
    best, best_col = -1.0, column
    for perm in permutations(range(values.size)):
        relabeled = np.empty_like(column, dtype=float)
        for old, new in zip(values, perm):
            relabeled[column == old] = new
        c = _abs_corr_matrix(latents, relabeled[:, None], correlation).max()
        if c > best:
            best, best_col = c, relabeled
    return best_col


def mcc(
    metric_input: MetricInput,
    correlation: str = "spearman",
    relabel_categories: bool = False,
    noise_seed: int = 0,
) -> MccReport:
    """Mean correlation coefficient with optimal factor-latent matching.

    Ground-truth factors gain standard-Gaussian noise columns up to the
    latent dimension, the absolute correlation matrix is matched by
    linear-sum assignment, and the score averages only the true-factor
    matches (scaled to [0, 100]).
    """
    lat = metric_input.latents
    fac = np.asarray(metric_input.factors, dtype=float)
    n, d_lat = lat.shape
    d_fac = fac.shape[1]
    if "categorical" in metric_input.factor_kinds:
        warnings.warn("MCC treats categorical factors as ordered codes; "
                      "scores are label-permutation dependent")
        if relabel_categories:
            fac = fac.copy()
            for j, kind in enumerate(metric_input.factor_kinds):
                if kind == "categorical":
                    fac[:, j] = _best_relabeling(fac[:, j], lat, correlation)
    pad = np.random.default_rng(noise_seed).standard_normal((n, d_lat - d_fac))
    padded = np.hstack([fac, pad]) if pad.shape[1] else fac
    c = _abs_corr_matrix(lat, padded, correlation)
    rows, cols = linear_sum_assignment(-c)
    latent_for = {int(col): int(row) for row, col in zip(rows, cols)}
    assignment = {j: latent_for[j] for j in range(d_fac)}
    matched = np.array([c[assignment[j], j] for j in range(d_fac)])
    return MccReport(
        corr=c[:, :d_fac],
        assignment=assignment,
        matched=matched,
        score=float(100.0 * matched.mean()),
    )


# ---------------------------------------------------------------------------
# mutual information family


def _equal_width_codes(x: np.ndarray, bins: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros(x.size, dtype=np.int64)
    codes = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(codes, bins - 1)


def _quantile_codes(x: np.ndarray, bins: int) -> np.ndarray:
    edges = np.quantile(np.asarray(x, dtype=float), np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, x, side="right").astype(np.int64)


def _as_codes(v: np.ndarray, bins: int) -> np.ndarray:
    v = np.asarray(v)
    if np.issubdtype(v.dtype, np.integer):
        _, codes = np.unique(v, return_inverse=True)
        return codes.astype(np.int64)
    return _equal_width_codes(v, bins)


def _mi_from_codes(a: np.ndarray, b: np.ndarray) -> float:
    ka, kb = int(a.max()) + 1, int(b.max()) + 1
    joint = np.bincount(a * kb + b, minlength=ka * kb).astype(float).reshape(ka, kb)
    joint /= joint.sum()
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    outer = np.outer(pa, pb)
    return float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))


def discrete_mi(a, b, bins: int = 20) -> float:
    """Plug-in mutual information in nats.

    Float inputs are cut into `bins` equal-width cells between their min
    and max; integer-coded inputs are used as-is.
    """
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size != b.size or a.size == 0:
        raise ValueError("need two equal-length nonempty vectors")
    return _mi_from_codes(_as_codes(a, bins), _as_codes(b, bins))


def discrete_entropy(v, bins: int = 20) -> float:
    """Plug-in entropy in nats under the same coding rule as discrete_mi."""
    codes = _as_codes(np.asarray(v).ravel(), bins)
    p = np.bincount(codes).astype(float)
    p = p[p > 0] / p.sum()
    return float(-np.sum(p * np.log(p)))


def _factor_codes(metric_input: MetricInput, j: int, bins: int) -> np.ndarray:
    col = np.asarray(metric_input.factors)[:, j]
    kind = metric_input.factor_kinds[j]
    if kind != "continuous" and np.issubdtype(col.dtype, np.integer):
        _, codes = np.unique(col, return_inverse=True)
        return codes.astype(np.int64)
    return _quantile_codes(col, bins)


def mi_matrix(metric_input: MetricInput, bins: int = 20) -> np.ndarray:
    """Pairwise plug-in MI, latents (rows, equal-width bins) by factors
    (columns; categorical codes as-is, continuous quantile-binned)."""
    lat_codes = [_equal_width_codes(metric_input.latents[:, i], bins)
                 for i in range(metric_input.n_latents)]
    fac_codes = [_factor_codes(metric_input, j, bins) for j in range(metric_input.n_factors)]
    out = np.empty((metric_input.n_latents, metric_input.n_factors))
    for i, lc in enumerate(lat_codes):
        for j, fc in enumerate(fac_codes):
            out[i, j] = _mi_from_codes(lc, fc)
    return out


def mig(metric_input: MetricInput, bins: int = 20) -> float:
    """Mean over factors of (top MI - runner-up MI) / factor entropy."""
    m = mi_matrix(metric_input, bins)
    gaps = []
    for j in range(metric_input.n_factors):
        h = discrete_entropy(_factor_codes(metric_input, j, bins))
        if h <= 0:
            raise ValueError(f"factor {j} is constant; entropy normalization undefined")
        col = np.sort(m[:, j])[::-1]
        gaps.append((col[0] - col[1]) / h)
    return float(np.mean(gaps))


def modularity_from_mi(m: np.ndarray) -> float:
    """Squared-MI deviation score over a latents-by-factors MI matrix.

    Rows whose MI is identically zero contribute zero; each other row
    contributes 1 minus its off-maximum squared-MI mass normalized by
    max^2 * (D - 1).  Single-factor inputs have no off-maximum mass.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("need a nonempty 2-D MI matrix")
    d_lat, d_fac = m.shape
    sq = m * m
    total = 0.0
    for i in range(d_lat):
        top = sq[i].max()
        if top == 0.0:
            continue
        if d_fac == 1:
            total += 1.0
        else:
            total += 1.0 - (sq[i].sum() - top) / (top * (d_fac - 1))
    return float(total / d_lat)


def modularity(metric_input: MetricInput, bins: int = 20) -> float:
    return modularity_from_mi(mi_matrix(metric_input, bins))


# ---------------------------------------------------------------------------
# classifier metrics


def _softmax_xent_fit(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    steps: int,
    lr: float = 0.1,
    l2: float = 1.0,
):
    """Multinomial logistic fit on the autodiff tape; returns a predictor.

    Loss is mean cross entropy plus l2/2 * ||W||^2 / n, the per-sample
    form of an L2 penalty with unit strength.
    """
    x = np.asarray(features, dtype=float)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    x = (x - mu) / sd
    n, f = x.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), labels] = 1.0

    store = ParamStore()
    store.add("w", np.zeros((f, n_classes)))
    store.add("b", np.zeros((1, n_classes)))
    xt = Tensor(x)
    hot = Tensor(onehot)
    for _ in range(steps):
        store.zero_grad()
        logits = matmul(xt, store["w"]) + store["b"]
        shift = Tensor(logits.data.max(axis=1, keepdims=True))
        lse = log(tsum(exp(logits - shift), axis=1, keepdims=True)) + shift
        ce = (tsum(lse) - tsum(logits * hot)) / n
        loss = ce + (l2 * 0.5 / n) * tsum(store["w"] * store["w"])
        backward(loss)
        adam_step(store, lr=lr)

    w = store["w"].data.copy()
    b = store["b"].data.copy()

    def predict(xq: np.ndarray) -> np.ndarray:
        xq = (np.asarray(xq, dtype=float) - mu) / sd
        return np.argmax(xq @ w + b, axis=1)

    return predict


def _holdout_split(n: int):
    cut = n // 2
    return slice(0, cut), slice(cut, n)


def _sap_score_matrix(metric_input: MetricInput, steps: int, max_train: int) -> np.ndarray:
    lat = metric_input.latents
    fac = np.asarray(metric_input.factors)
    n = min(metric_input.n_samples, 2 * max_train)
    tr, te = _holdout_split(n)
    s = np.empty((metric_input.n_latents, metric_input.n_factors))
    for j in range(metric_input.n_factors):
        col = fac[:n, j]
        categorical = (
            metric_input.factor_kinds[j] != "continuous"
            and np.issubdtype(col.dtype, np.integer)
        )
        if categorical:
            _, codes = np.unique(col, return_inverse=True)
            k = int(codes.max()) + 1
        for i in range(metric_input.n_latents):
            z = lat[:n, i]
            if categorical:
                predict = _softmax_xent_fit(z[tr, None], codes[tr], k, steps)
                s[i, j] = float(np.mean(predict(z[te, None]) == codes[te]))
            else:
                y = col.astype(float)
                zc = z[tr] - z[tr].mean()
                yc = y[tr] - y[tr].mean()
                denom = float(zc @ zc)
                slope = float(zc @ yc) / denom if denom > 0 else 0.0
                pred = y[tr].mean() + slope * (z[te] - z[tr].mean())
                resid = y[te] - pred
                var = float(np.var(y[te]))
                r2 = 1.0 - float(np.mean(resid**2)) / var if var > 0 else 0.0
                s[i, j] = min(max(r2, 0.0), 1.0)
    return s


def sap(metric_input: MetricInput, steps: int = 500, max_train: int = 1000) -> float:
    """Mean over factors of the gap between the two most predictive
    single-latent classifiers (held-out accuracy for categorical
    factors, held-out R^2 for continuous ones)."""
    s = _sap_score_matrix(metric_input, steps, max_train)
    gaps = []
    for j in range(metric_input.n_factors):
        col = np.sort(s[:, j])[::-1]
        gaps.append(col[0] - col[1])
    return float(np.mean(gaps))


def factorvae_score(
    fixed_factor_sampler,
    encoder,
    variance_threshold: float = 0.05,
    big_batch: int = 10000,
    small_batch: int = 64,
    votes: int = 800,
    rng: np.random.Generator = None,
) -> float:
    """Majority-vote accuracy of the lowest-variance-ratio latent.

    Latents whose variance on an unconstrained big batch falls below
    the threshold are pruned.  Each vote fixes one factor, encodes a
    small batch, and the surviving latent with the smallest ratio of
    small-batch to big-batch variance votes for that factor.  The vote
    table is built from `votes` training votes and scored on `votes`
    held-out ones.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    probe = np.asarray(fixed_factor_sampler(None, big_batch))
    d_fac = probe.shape[1]
    z = np.asarray(encoder(probe), dtype=float)
    global_var = z.var(axis=0)
    active = np.flatnonzero(global_var >= variance_threshold)
    if active.size == 0:
        raise ValueError("all latents pruned by the variance threshold")

    def one_vote():
        k = int(rng.integers(d_fac))
        batch = fixed_factor_sampler(k, small_batch)
        zb = np.asarray(encoder(batch), dtype=float)
        ratio = zb.var(axis=0)[active] / global_var[active]
        return int(active[np.argmin(ratio)]), k

    table = np.zeros((z.shape[1], d_fac))
    for _ in range(votes):
        latent, k = one_vote()
        table[latent, k] += 1
    vote_for = np.argmax(table, axis=1)
    hits = 0
    for _ in range(votes):
        latent, k = one_vote()
        hits += int(vote_for[latent] == k)
    return hits / votes


def betavae_score(
    fixed_factor_sampler,
    encoder,
    batches: int = 500,
    rng: np.random.Generator = None,
    pairs_per_point: int = 64,
    steps: int = 2000,
) -> float:
    """Held-out accuracy of a logistic classifier on mean |z1 - z2|
    differences over pairs sharing one fixed factor."""
    rng = rng if rng is not None else np.random.default_rng(0)
    probe = np.asarray(fixed_factor_sampler(None, 2))
    d_fac = probe.shape[1]

    points = []
    labels = np.empty(2 * batches, dtype=np.int64)
    for t in range(2 * batches):
        k = int(rng.integers(d_fac))
        both = fixed_factor_sampler(k, 2 * pairs_per_point)
        z = np.asarray(encoder(both), dtype=float)
        diff = np.abs(z[:pairs_per_point] - z[pairs_per_point:])
        points.append(diff.mean(axis=0))
        labels[t] = k
    x = np.stack(points)
    tr, te = _holdout_split(2 * batches)
    predict = _softmax_xent_fit(x[tr], labels[tr], d_fac, steps)
    return float(np.mean(predict(x[te]) == labels[te]))


# ---------------------------------------------------------------------------
# reporting


def metric_report(
    metric_name: str,
    score: float,
    config: dict = None,
    seed: int = None,
    n_samples: int = None,
    matrices: dict = None,
) -> dict:
    """JSON-ready summary; matrices become nested lists."""
    out = {
        "metric_name": metric_name,
        "score": float(score),
        "config": config or {},
        "seed": seed,
        "n_samples": n_samples,
    }
    if matrices:
        out["matrices"] = {k: np.asarray(v).tolist() for k, v in matrices.items()}
    json.dumps(out)
    return out
