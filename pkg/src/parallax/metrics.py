"""Fréchet distance between feature Gaussians, accuracy, and a fixed feature extractor."""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass

import numpy as np

from parallax.errors import NumericError, UsageError

log = logging.getLogger(__name__)


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased (1/(n-1)) covariance of ``features`` [n, d]."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise UsageError(f"features must be [n, d], got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise UsageError(f"need at least 2 samples for a covariance, got {n}")
    mu = x.mean(axis=0)
    xc = x - mu
    s = xc.T @ xc / (n - 1)
    return GaussianStats(mu, (s + s.T) / 2, n)


def jacobi_eigh(a, tol: float = 1e-10, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||A||_F)``.  Returns ``(eigenvalues, Q)`` with ``A = Q diag(w) Q^T``.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise UsageError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    q = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), q
    threshold = tol * max(1.0, float(np.linalg.norm(a)))
    # entries this small cannot keep the off-diagonal norm above threshold; rotating them
    # only risks overflow in theta
    negligible = 1e-3 * threshold / n
    upper = np.triu_indices(n, 1)
    for _ in range(max_sweeps):
        # direct sum: total minus diagonal cancels catastrophically near convergence
        off = math.sqrt(2.0 * float(np.sum(a[upper] ** 2)))
        if off < threshold:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if abs(apr) < negligible:
                    continue
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, r) Givens rotation
                ap = a[:, p].copy()
                ar = a[:, r]
                a[:, p] = c * ap - s * ar
                a[:, r] = s * ap + c * ar
                ap = a[p, :].copy()
                ar = a[r, :]
                a[p, :] = c * ap - s * ar
                a[r, :] = s * ap + c * ar
                a[p, r] = a[r, p] = 0.0
                qp = q[:, p].copy()
                qr = q[:, r]
                q[:, p] = c * qp - s * qr
                q[:, r] = s * qp + c * qr
    else:
        raise NumericError("Jacobi eigensolver did not converge")
    return a.diagonal().copy(), q


def _psd_sqrt(sigma: np.ndarray) -> np.ndarray:
    w, q = jacobi_eigh(sigma)
    _check_psd(w, sigma)
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T


def _check_psd(w: np.ndarray, sigma: np.ndarray) -> None:
    scale = max(float(np.trace(sigma)), 1.0)
    if w.min(initial=0.0) < -1e-6 * scale:
        raise NumericError(f"matrix is not positive semi-definite (eigenvalue {w.min():.3e})")


def psd_sqrt_trace(sigma1, sigma2) -> float:
    """Tr((S1 S2)^(1/2)) computed as sum(sqrt(eig(S1^(1/2) S2 S1^(1/2))))."""
    s1 = np.asarray(sigma1, dtype=np.float64)
    s2 = np.asarray(sigma2, dtype=np.float64)
    if s1.shape != s2.shape:
        raise UsageError(f"covariance shapes differ: {s1.shape} vs {s2.shape}")
    root = _psd_sqrt(s1)
    m = root @ s2 @ root
    m = (m + m.T) / 2
    w, _ = jacobi_eigh(m)
    _check_psd(w, m)
    return float(np.sum(np.sqrt(np.clip(w, 0.0, None))))


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a) + Tr(S_b) - 2 Tr((S_a S_b)^(1/2)), clamped at 0."""
    if a.dim != b.dim:
        raise UsageError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * psd_sqrt_trace(a.sigma, b.sigma))
    if value < 0:
        if value < -1e-6:
            log.warning("Fréchet distance %.3e < 0 from rounding; clamped to 0", value)
        value = 0.0
    return value


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise UsageError(f"labels shape {labels.shape} does not match {n} rows")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise UsageError(f"labels must lie in [0, {c})")
    if n == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# ----------------------------------------------------------------------
# fixed random-weight feature extractor (stand-in for a pretrained network)
# ----------------------------------------------------------------------
FEATURE_DIM = 64
_EXTRACTOR_WIDTHS = (3, 16, 32, FEATURE_DIM)


@functools.lru_cache(maxsize=8)
def _extractor_weights(seed: int):
    rng = np.random.default_rng(seed)
    layers = []
    for c_in, c_out in zip(_EXTRACTOR_WIDTHS, _EXTRACTOR_WIDTHS[1:]):
        std = math.sqrt(2.0 / (c_in * 9))
        w = rng.normal(0.0, std, (c_out, c_in, 3, 3)).astype(np.float32)
        w.setflags(write=False)
        layers.append(w)
    return tuple(layers)


def default_feature_extractor(images, seed: int = 0) -> np.ndarray:
    """64-d features: three 3x3 stride-2 convs with leaky-ReLU, then global average pooling.

    Weights are drawn once per ``seed`` and never trained; biases are zero.
    """
    from parallax import tensor as T

    x = np.asarray(images, dtype=np.float32)
    if x.ndim != 4 or x.shape[1] != 3 or min(x.shape[2:]) < 16:
        raise UsageError(f"expected images [B,3,H,W] with H,W >= 16, got {x.shape}")
    h = T.Tensor(x)
    with T.no_grad():
        for w in _extractor_weights(seed):
            h = T.activation(T.conv2d(h, T.Tensor(w), None, stride=2, pad=1), "leaky_relu", 0.2)
    return h.data.mean(axis=(2, 3))
