"""Training objective: masked silhouette, photometric L1, and SSIM terms.

All losses take float images in [0, 1] and return (value, gradient w.r.t.
the rendered input) so the training loop can assemble exact upstream
gradients for the rasterizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .surfel import InvalidParameterError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class LossWeights:
    lambda_mask: float = 0.3
    lambda_l1: float = 0.8
    lambda_ssim: float = 0.1

    def validate(self):
        if self.lambda_mask < 0 or self.lambda_l1 < 0 or self.lambda_ssim < 0:
            raise InvalidParameterError("loss weights must be non-negative")


def mask_loss(alpha_map: np.ndarray, mask: np.ndarray):
    """Root-mean-square difference between accumulated opacity and the
    binary mask; the normalization makes the weight resolution-independent."""
    alpha_map = np.asarray(alpha_map, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if alpha_map.shape != mask.shape:
        raise InvalidParameterError(
            f"alpha map shape {alpha_map.shape} != mask shape {mask.shape}")
    diff = alpha_map - mask
    value = float(np.sqrt((diff * diff).mean()))
    grad = diff / (diff.size * max(value, 1e-12))
    return value, grad


def l1_loss(rendered: np.ndarray, truth: np.ndarray):
    """Mean absolute error over pixels and channels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if rendered.shape != truth.shape:
        raise InvalidParameterError("image shapes differ")
    diff = rendered - truth
    value = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return value, grad


def _gauss_kernel():
    half = (SSIM_WINDOW - 1) / 2.0
    x = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return g / g.sum()


_G = _gauss_kernel()


def _filt(x: np.ndarray) -> np.ndarray:
    """Separable 11x11 Gaussian correlation, valid region only."""
    H, W = x.shape
    k = SSIM_WINDOW
    tmp = np.zeros((H, W - k + 1))
    for i in range(k):
        tmp += _G[i] * x[:, i:W - k + 1 + i]
    out = np.zeros((H - k + 1, W - k + 1))
    for i in range(k):
        out += _G[i] * tmp[i:H - k + 1 + i, :]
    return out


def _filt_adjoint(d: np.ndarray, H: int, W: int) -> np.ndarray:
    k = SSIM_WINDOW
    tmp = np.zeros((H, W - k + 1))
    for i in range(k):
        tmp[i:H - k + 1 + i, :] += _G[i] * d
    out = np.zeros((H, W))
    for i in range(k):
        out[:, i:W - k + 1 + i] += _G[i] * tmp
    return out


def _ssim_channel(x, y, c1, c2):
    mu_x, mu_y = _filt(x), _filt(y)
    t_xx, t_yy, t_xy = _filt(x * x), _filt(y * y), _filt(x * y)
    s_x = t_xx - mu_x * mu_x
    s_y = t_yy - mu_y * mu_y
    s_xy = t_xy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * s_xy + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = s_x + s_y + c2
    s = (a1 * a2) / (b1 * b2)
    return s, (mu_x, mu_y, a1, a2, b1, b2)


def ssim_loss(rendered: np.ndarray, truth: np.ndarray, data_range: float = 1.0):
    """1 - mean local SSIM (11x11 Gaussian window, sigma 1.5).

    Returns (loss, gradient w.r.t. rendered). Images must be at least
    11x11; channels are averaged.
    """
    x_img = np.asarray(rendered, dtype=np.float64)
    y_img = np.asarray(truth, dtype=np.float64)
    if x_img.shape != y_img.shape:
        raise InvalidParameterError("image shapes differ")
    if x_img.ndim == 2:
        x_img = x_img[:, :, None]
        y_img = y_img[:, :, None]
    H, W, C = x_img.shape
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise InvalidParameterError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    total = 0.0
    grad = np.zeros((H, W, C))
    n_win = (H - SSIM_WINDOW + 1) * (W - SSIM_WINDOW + 1)
    up = -1.0 / (n_win * C)          # d(loss)/d(s) per window
    for ch in range(C):
        x, y = x_img[:, :, ch], y_img[:, :, ch]
        s, (mu_x, mu_y, a1, a2, b1, b2) = _ssim_channel(x, y, c1, c2)
        total += s.mean()
        q1 = up * a2 / (b1 * b2)
        q2 = up * a1 / (b1 * b2)
        q3 = up * (-s / b1)
        q4 = up * (-s / b2)
        d_mu = 2.0 * mu_y * q1 + 2.0 * mu_x * q3 - 2.0 * mu_x * q4 - 2.0 * mu_y * q2
        d_txx = q4
        d_txy = 2.0 * q2
        grad[:, :, ch] = (_filt_adjoint(d_mu, H, W)
                          + _filt_adjoint(d_txx, H, W) * (2.0 * x)
                          + _filt_adjoint(d_txy, H, W) * y)
    value = float(1.0 - total / C)
    if rendered.ndim == 2:
        grad = grad[:, :, 0]
    return value, grad


def ssim_metric(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM index (1.0 for identical images)."""
    loss, _ = ssim_loss(a, b, data_range)
    return 1.0 - loss


def total_loss(parts: dict, weights: LossWeights, enable_mask: bool = True) -> float:
    """Weighted sum of the three terms; the mask term drops out entirely
    when its ablation flag is off."""
    weights.validate()
    v = weights.lambda_l1 * parts["l1"] + weights.lambda_ssim * parts["ssim"]
    if enable_mask:
        v += weights.lambda_mask * parts["mask"]
    return float(v)


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio on [0, 1] images, capped for identical pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(((a - b) ** 2).mean())
    if mse <= 0.0:
        return cap
    return min(cap, -10.0 * np.log10(mse))
