"""2D Gaussian surfel primitives.

A surfel is a planar Gaussian embedded in 3D: a center, an orthonormal
tangent frame encoded as a unit quaternion, two tangent scales (stored in
log space so they stay positive), a pre-sigmoid opacity, and an RGB color.
The surfel plane is parameterized as

    P(u, v) = center + s_u * t_u * u + s_v * t_v * v

with density exp(-(u^2 + v^2) / 2) in local (u, v) coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidParameterError(ValueError):
    """Raised when an operation receives out-of-contract inputs."""


def normalize_quat(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm. Works on (..., 4) arrays."""
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise InvalidParameterError("non-finite quaternion")
    n = np.sqrt((q * q).sum(axis=-1, keepdims=True))
    if np.any(n == 0.0):
        raise InvalidParameterError("zero-norm quaternion")
    return q / n


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w, x, y, z) to rotation matrix/matrices (..., 3, 3).

    The input is normalized internally so gradients and finite differences
    taken on raw (slightly off-unit) coefficients remain consistent.
    """
    q = normalize_quat(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - z * w)
    R[..., 0, 2] = 2.0 * (x * z + y * w)
    R[..., 1, 0] = 2.0 * (x * y + z * w)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - x * w)
    R[..., 2, 0] = 2.0 * (x * z - y * w)
    R[..., 2, 1] = 2.0 * (y * z + x * w)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def quat_to_rotation_backward(q_raw: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Backward of quat_to_rotation including the internal normalization.

    q_raw: (..., 4) raw coefficients, dR: (..., 3, 3) upstream gradient.
    Returns gradient w.r.t. the raw coefficients.
    """
    q_raw = np.asarray(q_raw, dtype=np.float64)
    n = np.sqrt((q_raw * q_raw).sum(axis=-1, keepdims=True))
    q = q_raw / n
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]

    # dR/d(q_hat), accumulated entry by entry.
    g = np.zeros_like(q)
    gw, gx, gy, gz = (np.zeros_like(w) for _ in range(4))

    def acc(dre, dw, dx, dy, dz):
        nonlocal gw, gx, gy, gz
        gw = gw + dre * dw
        gx = gx + dre * dx
        gy = gy + dre * dy
        gz = gz + dre * dz

    acc(dR[..., 0, 0], 0.0, 0.0, -4.0 * y, -4.0 * z)
    acc(dR[..., 0, 1], -2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w)
    acc(dR[..., 0, 2], 2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x)
    acc(dR[..., 1, 0], 2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w)
    acc(dR[..., 1, 1], 0.0, -4.0 * x, 0.0, -4.0 * z)
    acc(dR[..., 1, 2], -2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y)
    acc(dR[..., 2, 0], -2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x)
    acc(dR[..., 2, 1], 2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y)
    acc(dR[..., 2, 2], 0.0, -4.0 * x, -4.0 * y, 0.0)
    g[..., 0], g[..., 1], g[..., 2], g[..., 3] = gw, gx, gy, gz

    # Chain through q_hat = q_raw / |q_raw|.
    dot = (g * q).sum(axis=-1, keepdims=True)
    return (g - q * dot) / n


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) to unit quaternions (w, x, y, z).

    Shepperd's branch selection keeps the extraction well conditioned for
    every orientation; the sign is fixed so w >= 0.
    """
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    q = np.empty(batch + (4,), dtype=np.float64)
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    tr = m00 + m11 + m22
    cand = np.stack([tr, m00, m11, m22], axis=-1)
    case = np.argmax(cand, axis=-1)

    s0 = np.sqrt(np.maximum(tr + 1.0, 0.0)) * 2.0
    q0 = np.stack([0.25 * s0,
                   (R[..., 2, 1] - R[..., 1, 2]) / np.where(s0 == 0, 1, s0),
                   (R[..., 0, 2] - R[..., 2, 0]) / np.where(s0 == 0, 1, s0),
                   (R[..., 1, 0] - R[..., 0, 1]) / np.where(s0 == 0, 1, s0)], axis=-1)
    s1 = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 0.0)) * 2.0
    q1 = np.stack([(R[..., 2, 1] - R[..., 1, 2]) / np.where(s1 == 0, 1, s1),
                   0.25 * s1,
                   (R[..., 0, 1] + R[..., 1, 0]) / np.where(s1 == 0, 1, s1),
                   (R[..., 0, 2] + R[..., 2, 0]) / np.where(s1 == 0, 1, s1)], axis=-1)
    s2 = np.sqrt(np.maximum(1.0 - m00 + m11 - m22, 0.0)) * 2.0
    q2 = np.stack([(R[..., 0, 2] - R[..., 2, 0]) / np.where(s2 == 0, 1, s2),
                   (R[..., 0, 1] + R[..., 1, 0]) / np.where(s2 == 0, 1, s2),
                   0.25 * s2,
                   (R[..., 1, 2] + R[..., 2, 1]) / np.where(s2 == 0, 1, s2)], axis=-1)
    s3 = np.sqrt(np.maximum(1.0 - m00 - m11 + m22, 0.0)) * 2.0
    q3 = np.stack([(R[..., 1, 0] - R[..., 0, 1]) / np.where(s3 == 0, 1, s3),
                   (R[..., 0, 2] + R[..., 2, 0]) / np.where(s3 == 0, 1, s3),
                   (R[..., 1, 2] + R[..., 2, 1]) / np.where(s3 == 0, 1, s3),
                   0.25 * s3], axis=-1)
    for i, qi in enumerate([q0, q1, q2, q3]):
        sel = case == i
        q[sel] = qi[sel]
    q = normalize_quat(q)
    flip = q[..., 0] < 0
    q[flip] = -q[flip]
    return q


def build_frame(rot_q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tangent frame (t_u, t_v, t_w) from a unit quaternion.

    t_u, t_v span the surfel plane; the normal satisfies t_w = t_u x t_v
    exactly by construction (columns of a proper rotation).
    """
    R = quat_to_rotation(rot_q)
    return R[..., :, 0], R[..., :, 1], R[..., :, 2]


def gaussian_kernel(u, v):
    """exp(-(u^2 + v^2) / 2); peak value 1 at the origin."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.exp(-0.5 * (u * u + v * v))


@dataclass
class Surfel:
    """One canonical-space surfel primitive."""

    center_c: np.ndarray            # (3,)
    rot_q: np.ndarray               # (4,) unit quaternion, (w, x, y, z)
    log_scale: np.ndarray           # (2,) log of the tangent scales
    opacity_logit: float = 0.0
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def __post_init__(self):
        self.center_c = np.asarray(self.center_c, dtype=np.float64).reshape(3)
        self.rot_q = np.asarray(self.rot_q, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(2)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.opacity_logit = float(self.opacity_logit)

    def validate(self):
        if not (np.all(np.isfinite(self.center_c)) and np.all(np.isfinite(self.rot_q))
                and np.all(np.isfinite(self.log_scale)) and np.isfinite(self.opacity_logit)
                and np.all(np.isfinite(self.color))):
            raise InvalidParameterError("non-finite surfel parameter")
        if abs(np.linalg.norm(self.rot_q) - 1.0) > 1e-6:
            raise InvalidParameterError("quaternion norm outside tolerance")
        if np.any(np.exp(self.log_scale) <= 0.0):
            raise InvalidParameterError("degenerate scale")

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(np.float64(self.opacity_logit)))

    def frame(self):
        return build_frame(self.rot_q)


@dataclass
class SurfelGeometry:
    """Derived geometry: homogeneous plane transform and 3D covariance."""

    H: np.ndarray       # (4, 4)
    Sigma: np.ndarray   # (3, 3), rank <= 2


def surfel_geometry(surfel: Surfel) -> SurfelGeometry:
    """H maps homogeneous (u, v, 1, 1) to the world-space plane point;
    Sigma = R S S^T R^T with S = diag(s_u, s_v, 0)."""
    surfel.validate()
    t_u, t_v, t_w = surfel.frame()
    s_u, s_v = surfel.scales
    H = np.zeros((4, 4))
    H[:3, 0] = s_u * t_u
    H[:3, 1] = s_v * t_v
    H[:3, 3] = surfel.center_c
    H[3, 3] = 1.0
    R = np.stack([t_u, t_v, t_w], axis=1)
    S = np.diag([s_u, s_v, 0.0])
    Sigma = R @ S @ S.T @ R.T
    return SurfelGeometry(H=H, Sigma=Sigma)


def surfel_point(surfel: Surfel, u: float, v: float) -> np.ndarray:
    """World point of local plane coordinates (u, v)."""
    t_u, t_v, _ = surfel.frame()
    s_u, s_v = surfel.scales
    return surfel.center_c + s_u * t_u * u + s_v * t_v * v


def surfel_covariance(surfel: Surfel) -> np.ndarray:
    return surfel_geometry(surfel).Sigma


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class SurfelCloud:
    """Struct-of-arrays storage for the optimizable surfel parameters."""

    centers: np.ndarray         # (N, 3)
    rotations: np.ndarray       # (N, 4) quaternions, kept near unit norm
    log_scales: np.ndarray      # (N, 2)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N, 3)

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)

    def __len__(self):
        return self.centers.shape[0]

    def renormalize(self):
        """Project rotations back to unit quaternions (after optimizer steps)."""
        self.rotations = normalize_quat(self.rotations)

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.centers[i], self.rotations[i], self.log_scales[i],
                      float(self.opacity_logits[i]), self.colors[i])

    def copy(self) -> "SurfelCloud":
        return SurfelCloud(self.centers.copy(), self.rotations.copy(),
                           self.log_scales.copy(), self.opacity_logits.copy(),
                           self.colors.copy())

    def select(self, index) -> "SurfelCloud":
        return SurfelCloud(self.centers[index], self.rotations[index],
                           self.log_scales[index], self.opacity_logits[index],
                           self.colors[index])

    @staticmethod
    def concatenate(parts: list["SurfelCloud"]) -> "SurfelCloud":
        return SurfelCloud(
            np.concatenate([p.centers for p in parts], axis=0),
            np.concatenate([p.rotations for p in parts], axis=0),
            np.concatenate([p.log_scales for p in parts], axis=0),
            np.concatenate([p.opacity_logits for p in parts], axis=0),
            np.concatenate([p.colors for p in parts], axis=0),
        )
