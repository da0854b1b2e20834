"""Small dense linear algebra and ensemble statistics.

Ensembles are stored as ``(M, N_x)`` float arrays, one member per row.  A 1-D
array of length M is accepted wherever an ensemble is expected and is read as
M scalar members.
"""
from __future__ import annotations

import numpy as np

SYMMETRY_RTOL = 1e-10
PINV_RCUTOFF = 1e-12
PSD_RTOL = 1e-10


class NotPSDError(ValueError):
    """Matrix is asymmetric or has a clearly negative eigenvalue."""


def as_ensemble(e) -> np.ndarray:
    arr = np.asarray(e, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"ensemble must be 1-D or 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("ensemble contains non-finite entries")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def ensemble_mean(e) -> np.ndarray:
    x = as_ensemble(e)
    if x.shape[0] == 0:
        raise ValueError("empty ensemble")
    return x.mean(axis=0)


def ensemble_covariance(e) -> np.ndarray:
    """Empirical covariance with divisor M-1."""
    x = as_ensemble(e)
    m = x.shape[0]
    if m < 2:
        raise ValueError(f"covariance needs at least 2 members, got {m}")
    d = x - x.mean(axis=0)
    p = d.T @ d / (m - 1)
    return 0.5 * (p + p.T)


def cross_covariance(e, images) -> np.ndarray:
    """Empirical cross-covariance between members and their images, divisor M-1."""
    x = as_ensemble(e)
    hx = as_ensemble(images)
    m = x.shape[0]
    if hx.shape[0] != m:
        raise ValueError(f"ensemble has {m} members but {hx.shape[0]} images")
    if m < 2:
        raise ValueError(f"covariance needs at least 2 members, got {m}")
    dx = x - x.mean(axis=0)
    dh = hx - hx.mean(axis=0)
    p = dx.T @ dh / (m - 1)
    if hx is x or np.array_equal(hx, x):
        p = 0.5 * (p + p.T)
    return p


def _symmetric(m) -> np.ndarray:
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise NotPSDError(f"matrix must be square, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_RTOL * scale:
        raise NotPSDError("matrix is not symmetric")
    return 0.5 * (a + a.T)


def sym_eig(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix (after symmetrisation)."""
    return np.linalg.eigh(_symmetric(m))


def psd_sqrt(m) -> np.ndarray:
    """Symmetric PSD square root; slightly negative eigenvalues are clamped."""
    w, v = sym_eig(m)
    top = max(float(w.max(initial=0.0)), 1.0)
    if w.size and w.min() < -PSD_RTOL * top:
        raise NotPSDError(f"eigenvalue {w.min():.3e} below tolerance")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def psd_pseudo_inverse(m) -> np.ndarray:
    """Moore-Penrose inverse; eigenvalues below 1e-12 of the largest count as zero."""
    w, v = sym_eig(m)
    top = float(np.max(np.abs(w), initial=0.0))
    if top == 0.0:
        return np.zeros_like(v)
    # subnormal eigenvalues have no finite reciprocal
    keep = (w > PINV_RCUTOFF * top) & (w >= np.finfo(w.dtype).tiny)
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (v * inv) @ v.T


def image_basis(m) -> np.ndarray:
    """Columns ``U_r diag(sqrt(lambda_r))`` spanning the image of a PSD matrix.

    With ``L`` the result, ``L @ L.T == m`` and a displacement ``L @ w`` has
    ``(L w)^T m^+ (L w) == |w|^2``.
    """
    w, v = sym_eig(m)
    top = float(np.max(np.abs(w), initial=0.0))
    if top == 0.0:
        return np.zeros((v.shape[0], 0))
    keep = w > PINV_RCUTOFF * top
    return v[:, keep] * np.sqrt(w[keep])


def sample_gaussian(rng: np.random.Generator, mean, cov, n: int) -> np.ndarray:
    """Draw ``n`` samples ``mean + cov^{1/2} xi`` as an ``(n, N)`` ensemble."""
    mu = np.atleast_1d(np.asarray(mean, dtype=float))
    root = psd_sqrt(np.atleast_2d(cov))
    if root.shape[0] != mu.shape[0]:
        raise ValueError("mean and covariance dimensions differ")
    xi = rng.standard_normal((int(n), mu.shape[0]))
    return mu + xi @ root.T
