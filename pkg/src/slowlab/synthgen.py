"""Ground-truth temporal sources, invertible mixing, factor-pair samplers.

Sources come in two flavors: unit-Gaussian marginals with additive
generalized-Laplace transitions, and an AR(0.7) chain driven by Laplace
innovations.  Mixing stacks compose random orthogonal maps with a smooth
leaky-ReLU; factor-grid samplers produce index pairs whose transition
law is either distance-weighted (lap) or a uniformly chosen number of
uniformly redrawn factors (uni).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .dists import GenLaplaceParams, genlap_sample

__all__ = [
    "AR_COEFF",
    "SourceChainConfig",
    "MixingStack",
    "FactorGrid",
    "PairBatch",
    "sample_pairs",
    "sample_ar_sources",
    "smooth_leaky_relu",
    "make_mixing_stack",
    "linear_stack",
    "mix",
    "expanding_decoder",
    "lap_transition_sample",
    "lap_conditional_matrix",
    "uni_transition_sample",
    "shuffle_per_factor",
    "sample_factor_batch",
    "pair_batch_to_csv",
    "pair_batch_from_csv",
    "pair_batch_to_bin",
    "pair_batch_from_bin",
]

AR_COEFF = 0.7

_BIN_MAGIC = b"TSPB"
_BIN_VERSION = 1


@dataclass(frozen=True)
class SourceChainConfig:
    dim: int
    alpha: float = 1.0
    lam: float = 1.0
    mode: str = "pair"
    count: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.alpha <= 0 or self.lam <= 0:
            raise ValueError("alpha and lam must be > 0")
        if self.mode not in ("pair", "ar"):
            raise ValueError(f"mode must be 'pair' or 'ar', got {self.mode!r}")


@dataclass
class PairBatch:
    """Aligned (prev, next) slices, count x dim, latent or observed."""

    prev: np.ndarray
    next: np.ndarray

    def __post_init__(self):
        self.prev = np.asarray(self.prev)
        self.next = np.asarray(self.next)
        if self.prev.shape != self.next.shape:
            raise ValueError(f"shape mismatch: {self.prev.shape} vs {self.next.shape}")
        if self.prev.ndim != 2:
            raise ValueError(f"expected 2-D slices, got shape {self.prev.shape}")
        if not (np.all(np.isfinite(self.prev)) and np.all(np.isfinite(self.next))):
            raise ValueError("pair batch entries must be finite")

    @property
    def count(self) -> int:
        return self.prev.shape[0]

    @property
    def dim(self) -> int:
        return self.prev.shape[1]


@dataclass(frozen=True)
class FactorGrid:
    sizes: tuple
    circular: tuple = ()

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes or any(s < 1 for s in sizes):
            raise ValueError(f"all factor sizes must be >= 1, got {sizes}")
        circular = tuple(bool(c) for c in self.circular) if self.circular else (False,) * len(sizes)
        if len(circular) != len(sizes):
            raise ValueError("circular flags must match sizes in length")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "circular", circular)

    @property
    def n_factors(self) -> int:
        return len(self.sizes)


# ---------------------------------------------------------------------------
# temporal sources

def sample_pairs(config: SourceChainConfig, rng: np.random.Generator) -> PairBatch:
    """z_prev ~ N(0, I); z_next = z_prev + eps, eps i.i.d. generalized Laplace."""
    if config.mode != "pair":
        raise ValueError(f"sample_pairs needs mode='pair', got {config.mode!r}")
    n, d = config.count, config.dim
    z_prev = rng.standard_normal((n, d))
    eps = genlap_sample(GenLaplaceParams(config.alpha, config.lam), n * d, rng).reshape(n, d)
    return PairBatch(z_prev, z_prev + eps)


def sample_ar_sources(
    dim: int,
    length: int,
    innovation: GenLaplaceParams = GenLaplaceParams(1.0, 1.0, 0.0),
    rng: np.random.Generator = None,
    burn_in: int = 100,
) -> np.ndarray:
    """AR chain s(t) = 0.7 s(t-1) + eps(t), shape (length, dim).

    The initial state approximates the stationary law through `burn_in`
    discarded steps.
    """
    if length < 2:
        raise ValueError(f"length must be >= 2, got {length}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    total = burn_in + length
    eps = genlap_sample(innovation, total * dim, rng).reshape(total, dim)
    s = signal.lfilter([1.0], [1.0, -AR_COEFF], eps, axis=0)
    return s[burn_in:]


# ---------------------------------------------------------------------------
# mixing

def smooth_leaky_relu(x, a: float):
    """a*x + (1-a)*log(1+e^x), elementwise; strictly increasing."""
    if not (0.0 < a <= 1.0):
        raise ValueError(f"slope must be in (0, 1], got {a}")
    x = np.asarray(x, dtype=float)
    return a * x + (1.0 - a) * np.logaddexp(0.0, x)


def _smooth_leaky_relu_inv(y: np.ndarray, a: float) -> np.ndarray:
    # The map is convex and increasing with derivative in (a, 1], so
    # Newton from a right-side start converges monotonically.
    y = np.asarray(y, dtype=float)
    x = np.where(y >= 0, y, y / a)
    for _ in range(100):
        fx = a * x + (1.0 - a) * np.logaddexp(0.0, x) - y
        dfx = a + (1.0 - a) / (1.0 + np.exp(-x))
        step = fx / dfx
        x = x - step
        if np.max(np.abs(step)) < 1e-13:
            break
    return x


def _haar_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


@dataclass
class MixingStack:
    """Ordered (weight, optional slope) layers; final layer may expand."""

    layers: list
    output_dim: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("stack needs at least one layer")
        for pos, (w, a) in enumerate(self.layers):
            w = np.asarray(w)
            if w.ndim != 2:
                raise ValueError("layer weights must be matrices")
            if w.shape[0] == w.shape[1]:
                if abs(np.linalg.det(w)) <= 1e-8:
                    raise ValueError("square mixing layer is numerically singular")
            else:
                # Only the output layer may change dimension.
                if pos != len(self.layers) - 1:
                    raise ValueError("non-square weights allowed only in the final layer")
                if np.linalg.svd(w, compute_uv=False).min() <= 1e-8:
                    raise ValueError("expanding layer is rank deficient")
            if a is not None and not (0.0 < a <= 1.0):
                raise ValueError(f"slope must be in (0, 1], got {a}")
        if self.output_dim == 0:
            self.output_dim = int(np.asarray(self.layers[-1][0]).shape[0])

    @property
    def input_dim(self) -> int:
        return int(np.asarray(self.layers[0][0]).shape[1])

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        for w, a in self.layers:
            x = x @ np.asarray(w).T
            if a is not None:
                x = smooth_leaky_relu(x, a)
        return x

    def invert(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        for w, a in reversed(self.layers):
            if a is not None:
                y = _smooth_leaky_relu_inv(y, a)
            w = np.asarray(w)
            if w.shape[0] == w.shape[1]:
                y = np.linalg.solve(w, y.T).T
            else:
                y = np.linalg.lstsq(w, y.T, rcond=None)[0].T
        return y


def make_mixing_stack(dim: int, layers: int, slope: float, rng: np.random.Generator) -> MixingStack:
    """layers blocks of (random orthogonal, smooth leaky-ReLU) plus a
    final pure-linear orthogonal layer."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if layers < 1:
        raise ValueError(f"layers must be >= 1, got {layers}")
    blocks = [(_haar_orthogonal(dim, rng), float(slope)) for _ in range(layers)]
    blocks.append((_haar_orthogonal(dim, rng), None))
    return MixingStack(blocks)


def linear_stack(matrix: np.ndarray) -> MixingStack:
    """Single pure-linear layer, e.g. diag(1, kappa) for collapse studies."""
    return MixingStack([(np.asarray(matrix, dtype=float), None)])


def mix(batch: PairBatch, stack: MixingStack) -> PairBatch:
    """Apply the stack to both time slices identically."""
    return PairBatch(stack.apply(batch.prev), stack.apply(batch.next))


def expanding_decoder(
    dim_in: int,
    dim_out: int,
    rng: np.random.Generator,
    layers: int = 1,
    slope: float = 0.2,
) -> MixingStack:
    """Injective map to dim_out >= dim_in with a rectangular final layer.

    The rectangular final matrix has i.i.d. Gaussian entries at 1/sqrt(dim_in)
    scale: each output coordinate keeps roughly unit variance while the
    total evidence about the input grows with dim_out.  The square case
    degenerates to a plain orthogonal final layer.
    """
    if dim_out < dim_in:
        raise ValueError(f"dim_out {dim_out} < dim_in {dim_in}")
    blocks = [(_haar_orthogonal(dim_in, rng), float(slope)) for _ in range(layers)]
    if dim_out == dim_in:
        blocks.append((_haar_orthogonal(dim_in, rng), None))
    else:
        while True:
            final = rng.standard_normal((dim_out, dim_in)) / np.sqrt(dim_in)
            if np.linalg.svd(final, compute_uv=False).min() > 1e-3:
                break
        blocks.append((final, None))
    return MixingStack(blocks, output_dim=dim_out)


# ---------------------------------------------------------------------------
# factor-grid transition samplers

def lap_conditional_matrix(size: int, lam: float, circular: bool = False) -> np.ndarray:
    """Exact next-index law per first index, rows summing to one.

    Index distance is normalized by (size - 1) so the factor's range
    maps to [0, 1] and lam carries the same meaning across factors;
    out-of-range moves are excluded by row renormalization.  Circular
    factors measure distance through the shorter arc.
    """
    if lam <= 0:
        raise ValueError(f"lam must be > 0, got {lam}")
    if size == 1:
        return np.ones((1, 1))
    idx = np.arange(size)
    d = np.abs(idx[:, None] - idx[None, :]).astype(float)
    if circular:
        d = np.minimum(d, size - d)
    w = np.exp(-lam * d / (size - 1))
    return w / w.sum(axis=1, keepdims=True)


def _draw_lap(grid: FactorGrid, lam: float, count: int, rng: np.random.Generator,
              cums: list) -> tuple[np.ndarray, np.ndarray]:
    D = grid.n_factors
    prev = np.empty((count, D), dtype=np.int64)
    nxt = np.empty((count, D), dtype=np.int64)
    for k, size in enumerate(grid.sizes):
        i = rng.integers(0, size, size=count)
        u = rng.random(count)
        j = (u[:, None] > cums[k][i]).sum(axis=1)
        prev[:, k] = i
        nxt[:, k] = np.minimum(j, size - 1)
    return prev, nxt


def lap_transition_sample(
    grid: FactorGrid,
    lam: float,
    reject_static: bool,
    count: int,
    rng: np.random.Generator,
) -> PairBatch:
    """Distance-weighted transition pairs on a discrete factor grid.

    First index uniform per factor; the second follows the renormalized
    exp(-lam * normalized distance) law of lap_conditional_matrix.  With
    reject_static, pairs changing nothing at all are redrawn wholesale.
    """
    if lam <= 0:
        raise ValueError(f"lam must be > 0, got {lam}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    cums = []
    for size, circ in zip(grid.sizes, grid.circular):
        c = np.cumsum(lap_conditional_matrix(size, lam, circ), axis=1)
        c[:, -1] = 1.0
        cums.append(c)
    prev, nxt = _draw_lap(grid, lam, count, rng, cums)
    if reject_static:
        for _ in range(1000):
            static = np.all(prev == nxt, axis=1)
            n_bad = int(static.sum())
            if n_bad == 0:
                break
            prev[static], nxt[static] = _draw_lap(grid, lam, n_bad, rng, cums)
        else:
            raise RuntimeError("static-pair rejection did not terminate; lam too large")
    return PairBatch(prev, nxt)


def uni_transition_sample(grid: FactorGrid, count: int, rng: np.random.Generator) -> PairBatch:
    """k ~ Uniform{1..D-1} factors change; each changed factor is redrawn
    uniformly over the values different from its first value."""
    D = grid.n_factors
    if D < 2:
        raise ValueError("need at least 2 factors")
    sizes = np.array(grid.sizes)
    eligible = np.flatnonzero(sizes >= 2)
    if eligible.size < D - 1:
        raise ValueError("grid has too many single-value factors to change D-1 of them")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")

    prev = np.empty((count, D), dtype=np.int64)
    for k, size in enumerate(sizes):
        prev[:, k] = rng.integers(0, size, size=count)
    nxt = prev.copy()

    k_changed = rng.integers(1, D, size=count)
    # Random per-row ranking of the eligible factors; the first k get changed.
    ranks = rng.random((count, eligible.size)).argsort(axis=1).argsort(axis=1)
    change = ranks < k_changed[:, None]
    for col, k in enumerate(eligible):
        rows = np.flatnonzero(change[:, col])
        if rows.size == 0:
            continue
        size = sizes[k]
        shift = rng.integers(1, size, size=rows.size)
        nxt[rows, k] = (prev[rows, k] + shift) % size
    return PairBatch(prev, nxt)


def shuffle_per_factor(batch: PairBatch, rng: np.random.Generator) -> PairBatch:
    """Independently permute each factor's (prev, next) pairing across rows.

    Per-factor transition marginals are preserved exactly as multisets;
    cross-factor dependence between transitions is destroyed.
    """
    prev = batch.prev.copy()
    nxt = batch.next.copy()
    for k in range(batch.dim):
        p = rng.permutation(batch.count)
        prev[:, k] = batch.prev[p, k]
        nxt[:, k] = batch.next[p, k]
    return PairBatch(prev, nxt)


def sample_factor_batch(
    grid: FactorGrid,
    n: int,
    rng: np.random.Generator,
    fixed_index: int = None,
) -> np.ndarray:
    """Uniform factor draws, optionally holding one factor at a shared
    random value across the batch (the fixed-factor protocol used by the
    voting metrics)."""
    out = np.empty((n, grid.n_factors), dtype=np.int64)
    for k, size in enumerate(grid.sizes):
        out[:, k] = rng.integers(0, size, size=n)
    if fixed_index is not None:
        out[:, fixed_index] = rng.integers(0, grid.sizes[fixed_index])
    return out


# ---------------------------------------------------------------------------
# serialization

def pair_batch_to_csv(batch: PairBatch, path) -> None:
    d = batch.dim
    header = ",".join([f"prev_{k}" for k in range(d)] + [f"next_{k}" for k in range(d)])
    stacked = np.hstack([batch.prev, batch.next])
    if np.issubdtype(stacked.dtype, np.integer):
        fmt = "%d"
    else:
        fmt = "%.17g"
    np.savetxt(path, stacked, delimiter=",", header=header, comments="", fmt=fmt)


def pair_batch_from_csv(path) -> PairBatch:
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    d = raw.shape[1] // 2
    if raw.shape[1] != 2 * d or d == 0:
        raise ValueError(f"malformed pair CSV with {raw.shape[1]} columns")
    prev, nxt = raw[:, :d], raw[:, d:]
    if np.all(prev == np.round(prev)) and np.all(nxt == np.round(nxt)):
        return PairBatch(prev.astype(np.int64), nxt.astype(np.int64))
    return PairBatch(prev, nxt)


def pair_batch_to_bin(batch: PairBatch, path) -> None:
    """Magic 'TSPB', u32 version, u32 count, u32 dim, then the prev and
    next blocks as row-major little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<III", _BIN_VERSION, batch.count, batch.dim))
        fh.write(np.ascontiguousarray(batch.prev, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(batch.next, dtype="<f8").tobytes())


def pair_batch_from_bin(path) -> PairBatch:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _BIN_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        version, count, dim = struct.unpack("<III", fh.read(12))
        if version != _BIN_VERSION:
            raise ValueError(f"unsupported version {version}")
        body = fh.read(2 * count * dim * 8)
        if len(body) != 2 * count * dim * 8:
            raise ValueError("truncated pair file")
        flat = np.frombuffer(body, dtype="<f8")
    prev = flat[: count * dim].reshape(count, dim).astype(np.float64)
    nxt = flat[count * dim :].reshape(count, dim).astype(np.float64)
    return PairBatch(prev, nxt)
