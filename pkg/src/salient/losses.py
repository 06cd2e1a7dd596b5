"""The three training loss terms and their weighted combination.

    total = equivalence + lambda_mmd * mmd_sq + lambda_d * decoder_loss

Equivalence sums squared feature distances between clone 1 and every other
clone. The distribution term is the squared maximum mean discrepancy between
pooled clone-1 features and draws from a unit-variance, independent-component
Laplacian, under the inverse multiquadratic kernel k(a,b) = C / (C + |a-b|^2)
with C = 2 * dim * scale^2. The estimator mixes an off-diagonal average for
the within-sample sums with a full-pair average for the cross term, so small
negative values are possible. The decoder term sums squared reconstruction
errors of every clone against the shared clean target frame.

Each term exists twice: as a plain numpy function (the public, checkable
surface) and as a tape graph builder used for training. Tests pin the two
routes against each other and against hand-computed values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimMismatch, InvalidRange, QTooSmall, ShapeMismatch, TooFewSamples


@dataclass(frozen=True)
class LossWeights:
    lambda_mmd: float = 1.0
    lambda_d: float = 18.0
    kernel_scale: float = 1.0

    def __post_init__(self):
        if self.lambda_mmd < 0 or self.lambda_d < 0 or self.kernel_scale < 0:
            raise InvalidRange("loss weights must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    d_e: float
    d_mmd: float
    d_d: float
    d_global: float


def global_loss(d_e: float, d_mmd: float, d_d: float, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Combine the three terms; d_global is computed exactly as
    d_e + lambda_mmd * d_mmd + lambda_d * d_d in float64."""
    return LossBreakdown(
        d_e=float(d_e),
        d_mmd=float(d_mmd),
        d_d=float(d_d),
        d_global=float(d_e) + weights.lambda_mmd * float(d_mmd) + weights.lambda_d * float(d_d),
    )


# ---------------------------------------------------------------------------
# numpy reference implementations (public surface)
# ---------------------------------------------------------------------------

def equivalence_loss(features: np.ndarray) -> float:
    """Sum over items, frames and clones q >= 2 of |z^(1) - z^(q)|^2.

    features: (m, Q, T, L) with clone 1 at index 0.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 4:
        raise ShapeMismatch(f"expected (m, Q, T, L), got {f.shape}")
    if f.shape[1] < 2:
        raise QTooSmall(f"need at least 2 clones, got {f.shape[1]}")
    diff = f[:, 1:] - f[:, :1]
    return float(np.sum(diff * diff))


def decoder_loss(decoded: np.ndarray, targets: np.ndarray) -> float:
    """Sum over items, frames and all clones of |decoded - target|^2.

    decoded: (m, Q, T, N); targets: (m, T, N), shared across clones.
    """
    d = np.asarray(decoded, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if d.ndim != 4 or t.ndim != 3 or d.shape[0] != t.shape[0] or d.shape[2:] != t.shape[1:]:
        raise ShapeMismatch(f"decoded {d.shape} incompatible with targets {t.shape}")
    res = d - t[:, None]
    return float(np.sum(res * res))


def imq_constant(dim: int, scale: float) -> float:
    return 2.0 * dim * scale * scale


def imq_kernel(a, b, scale: float = 1.0, dim: int = None) -> float:
    """Inverse multiquadratic kernel C / (C + |a-b|^2), C = 2*dim*scale^2."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if dim is None:
        dim = a.shape[-1]
    if a.shape != b.shape or a.ndim != 1 or a.shape[0] != dim:
        raise DimMismatch(f"kernel inputs must both be ({dim},), got {a.shape} and {b.shape}")
    if not scale > 0:
        raise InvalidRange(f"kernel scale must be positive, got {scale}")
    c = imq_constant(dim, scale)
    d2 = float(np.sum((a - b) ** 2))
    return c / (c + d2)


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # direct form: no cancellation, exact zeros on identical rows
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=-1)


def mmd_sq(z: np.ndarray, y: np.ndarray, weights: LossWeights = LossWeights()) -> float:
    """Squared-MMD estimate between samples z and the prior draws y:

        1/(m(m-1)) * sum_{i != j} [k(z_i,z_j) + k(y_i,y_j)]
        - 2/m^2    * sum_{i,j}    k(z_i,y_j)

    The cross sum runs over all pairs including i = j, so the result can dip
    slightly below zero for same-distribution samples.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.ndim != 2 or y.ndim != 2 or z.shape[1] != y.shape[1]:
        raise DimMismatch(f"sample dims differ: {z.shape} vs {y.shape}")
    if z.shape[0] != y.shape[0] or z.shape[0] < 2:
        raise TooFewSamples(f"need equal sample counts >= 2, got {z.shape[0]} and {y.shape[0]}")
    n = z.shape[0]
    c = imq_constant(z.shape[1], weights.kernel_scale)
    kzz = c / (c + _pairwise_sq_dists(z, z))
    kyy = c / (c + _pairwise_sq_dists(y, y))
    kzy = c / (c + _pairwise_sq_dists(z, y))
    off = ~np.eye(n, dtype=bool)
    within = (np.sum(kzz[off]) + np.sum(kyy[off])) / (n * (n - 1))
    cross = 2.0 * np.sum(kzy) / (n * n)
    return float(within - cross)


def laplace_prior_sample(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """count x dim draws from the unit-variance independent Laplacian.

    Inverse CDF with scale b = 1/sqrt(2) (variance 2*b^2 = 1):
    x = -b * sign(u) * ln(1 - 2|u|), u uniform on (-1/2, 1/2).
    """
    u = rng.random((count, dim))
    u = np.where(u == 0.0, 0.5, u) - 0.5  # keep u strictly inside (-1/2, 1/2)
    b = 1.0 / np.sqrt(2.0)
    return -b * np.sign(u) * np.log1p(-2.0 * np.abs(u))


# ---------------------------------------------------------------------------
# tape graph builders (training path)
# ---------------------------------------------------------------------------

def equivalence_loss_graph(z_by_t: list, clones: int, items: int) -> Tensor:
    """z_by_t: per-frame tensors (Q*m, L) in clone-major row order (clone q
    occupies rows [q*m, (q+1)*m))."""
    if clones < 2:
        raise QTooSmall(f"need at least 2 clones, got {clones}")
    total = None
    for z_t in z_by_t:
        ref = ad.slice_(z_t, 0, 0, items)
        for q in range(1, clones):
            term = ad.sub(ad.slice_(z_t, 0, q * items, (q + 1) * items), ref).sqnorm()
            total = term if total is None else ad.add(total, term)
    return total


def decoder_loss_graph(dec_by_t: list, targets_by_t: list, clones: int, items: int) -> Tensor:
    """dec_by_t: per-frame tensors (Q*m, N), clone-major; targets_by_t:
    per-frame constants (m, N)."""
    total = None
    for dec_t, tgt_t in zip(dec_by_t, targets_by_t):
        for q in range(clones):
            term = ad.sub(ad.slice_(dec_t, 0, q * items, (q + 1) * items), tgt_t).sqnorm()
            total = term if total is None else ad.add(total, term)
    return total


def _kernel_matrix_graph(a: Tensor, b: Tensor, a_sq: Tensor, b_sq: Tensor, ones_row: Tensor, c: float) -> Tensor:
    # |a_i - b_j|^2 expanded as |a_i|^2 + |b_j|^2 - 2 a_i.b_j
    d2 = ad.sub(
        ad.add(ad.matmul(a_sq, ones_row), ad.matmul(b_sq, ones_row).T),
        ad.scale(ad.matmul(a, b.T), 2.0),
    )
    return ad.scale(ad.recip(ad.add_scalar(d2, c)), c)


def mmd_sq_graph(z: Tensor, y: Tensor, weights: LossWeights) -> Tensor:
    """Differentiable twin of mmd_sq; z and y are (n, dim) tensors on one tape."""
    n, dim = z.shape
    if y.shape != (n, dim):
        raise DimMismatch(f"sample blocks differ: {z.shape} vs {y.shape}")
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples, got {n}")
    tape = z.tape
    c = imq_constant(dim, weights.kernel_scale)
    ones_col = tape.constant(np.ones((dim, 1)))
    ones_row = tape.constant(np.ones((1, n)))
    off_mask = tape.constant(1.0 - np.eye(n))

    z_sq = ad.matmul(z.square(), ones_col)  # (n, 1) row norms
    y_sq = ad.matmul(y.square(), ones_col)
    kzz = _kernel_matrix_graph(z, z, z_sq, z_sq, ones_row, c)
    kyy = _kernel_matrix_graph(y, y, y_sq, y_sq, ones_row, c)
    kzy = _kernel_matrix_graph(z, y, z_sq, y_sq, ones_row, c)

    within = ad.scale(
        ad.add(ad.mul(kzz, off_mask).sum(), ad.mul(kyy, off_mask).sum()),
        1.0 / (n * (n - 1)),
    )
    cross = ad.scale(kzy.sum(), 2.0 / (n * n))
    return ad.sub(within, cross)
