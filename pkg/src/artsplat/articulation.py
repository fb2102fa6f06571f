"""Skeleton-driven deformation of canonical surfels.

Pipeline per frame:

  theta   = wrap(theta_T + pose correction MLP(theta_T))
  M_k     = forward kinematics world transforms at theta
  A_k     = M_k(theta) . M_k(0)^-1           (skinning transforms)
  W       = softmax_k( log(W_nearest + 1e-8) + weight MLP(encode(center)) )
  R, T    = sum_k W_k A_k                    (blended rotation + translation)
  posed   = (R c + T,  R [t_u, t_v, t_w],  scales unchanged)

The blended rotation is deliberately not re-orthonormalized: that is what
linear blend skinning computes. Every forward step here has a matching
closed-form backward so gradients reach the MLPs, the pose vector, and the
surfel parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .surfel import InvalidParameterError, quat_to_rotation


# ---------------------------------------------------------------------------
# skeleton and kinematics


@dataclass
class Joint:
    name: str
    parent: int                    # -1 for the root
    rest_rotation: np.ndarray      # (4,) quaternion, local
    rest_translation: np.ndarray   # (3,) offset from parent, local

    def __post_init__(self):
        self.rest_rotation = np.asarray(self.rest_rotation, dtype=np.float64).reshape(4)
        self.rest_translation = np.asarray(self.rest_translation, dtype=np.float64).reshape(3)


@dataclass
class Skeleton:
    joints: list[Joint]
    rest_positions: np.ndarray     # (K, 3) joint centers at zero pose

    def __post_init__(self):
        self.rest_positions = np.asarray(self.rest_positions, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.joints)

    def validate(self):
        K = len(self.joints)
        if K < 1:
            raise InvalidParameterError("skeleton needs at least one joint")
        roots = [j for j in self.joints if j.parent < 0]
        if len(roots) != 1:
            raise InvalidParameterError("skeleton must have exactly one root")
        for k, j in enumerate(self.joints):
            if j.parent >= k:
                raise InvalidParameterError(
                    f"joint {k} has parent {j.parent}; parents must precede children")
        if self.rest_positions.shape != (K, 3):
            raise InvalidParameterError("rest_positions shape mismatch")
        fk = forward_kinematics(self, np.zeros((K, 3)))
        err = np.abs(fk.world[:, :3, 3] - self.rest_positions).max()
        if err > 1e-9:
            raise InvalidParameterError(
                f"rest_positions inconsistent with zero-pose kinematics (max err {err:.3e})")

    def rest_world(self) -> np.ndarray:
        """(K, 4, 4) world transforms at zero pose."""
        return forward_kinematics(self, np.zeros((len(self), 3)), _skip_rest=True).world


@dataclass
class JointTransforms:
    """World transforms M_k at the given pose, plus the skinning transforms
    A_k = M_k . rest_k^-1 that carry canonical-space points."""

    world: np.ndarray   # (K, 4, 4)
    skin: np.ndarray    # (K, 4, 4)


def rodrigues(v: np.ndarray) -> np.ndarray:
    """Axis-angle vector(s) (..., 3) to rotation matrices (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.sqrt((v * v).sum(axis=-1))
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    # series-safe sin(t)/t and (1-cos t)/t^2
    small = theta < 1e-10
    t2 = theta * theta
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - t2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, t2))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 0] = 1.0 + b * (-(y * y + z * z))
    out[..., 0, 1] = -a * z + b * x * y
    out[..., 0, 2] = a * y + b * x * z
    out[..., 1, 0] = a * z + b * x * y
    out[..., 1, 1] = 1.0 + b * (-(x * x + z * z))
    out[..., 1, 2] = -a * x + b * y * z
    out[..., 2, 0] = -a * y + b * x * z
    out[..., 2, 1] = a * x + b * y * z
    out[..., 2, 2] = 1.0 + b * (-(x * x + y * y))
    return out


def rodrigues_backward(v: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient of rodrigues w.r.t. the axis-angle vector.

    Uses d(R)/d(v_i) = (v_i [v]x + [v x (I - R) e_i]x) / |v|^2 . R, with the
    exact limit [e_i]x at v -> 0.
    """
    v = np.asarray(v, dtype=np.float64)
    R = rodrigues(v)
    theta2 = (v * v).sum(axis=-1)
    grad = np.zeros_like(v)
    eye = np.eye(3)

    def hat(w):
        H = np.zeros(w.shape[:-1] + (3, 3), dtype=np.float64)
        H[..., 0, 1], H[..., 0, 2] = -w[..., 2], w[..., 1]
        H[..., 1, 0], H[..., 1, 2] = w[..., 2], -w[..., 0]
        H[..., 2, 0], H[..., 2, 1] = -w[..., 1], w[..., 0]
        return H

    ImR = eye - R
    for i in range(3):
        e = eye[:, i]
        w = np.cross(v, ImR @ e)
        num = v[..., i, None, None] * hat(v) + hat(w)
        with np.errstate(invalid="ignore", divide="ignore"):
            dRdvi = np.where(theta2[..., None, None] < 1e-20,
                             hat(np.broadcast_to(e, v.shape)),
                             (num / np.where(theta2 == 0.0, 1.0, theta2)[..., None, None]) @ R)
        grad[..., i] = (dR * dRdvi).sum(axis=(-2, -1))
    return grad


def _local_transforms(skel: Skeleton, theta: np.ndarray) -> np.ndarray:
    """Per-joint local 4x4: Trans(rest offset) . Rot(rest) . Rot(theta_k)."""
    K = len(skel)
    rest_R = quat_to_rotation(np.stack([j.rest_rotation for j in skel.joints]))
    pose_R = rodrigues(theta)
    L = np.zeros((K, 4, 4))
    L[:, :3, :3] = rest_R @ pose_R
    L[:, :3, 3] = np.stack([j.rest_translation for j in skel.joints])
    L[:, 3, 3] = 1.0
    return L


def forward_kinematics(skel: Skeleton, theta: np.ndarray, *, _skip_rest: bool = False) -> JointTransforms:
    """Compose joint transforms root-to-leaf.

    theta: (K, 3) axis-angle per joint. Returns world transforms (zero pose
    reproduces the rest pose) and the skinning transforms relative to rest.
    """
    theta = np.asarray(theta, dtype=np.float64)
    K = len(skel)
    if theta.shape != (K, 3):
        raise InvalidParameterError(f"pose shape {theta.shape} != ({K}, 3)")
    L = _local_transforms(skel, theta)
    world = np.empty_like(L)
    for k, j in enumerate(skel.joints):
        world[k] = L[k] if j.parent < 0 else world[j.parent] @ L[k]
    if _skip_rest:
        return JointTransforms(world=world, skin=np.broadcast_to(np.eye(4), world.shape).copy())
    rest = skel.rest_world()
    rest_inv = np.linalg.inv(rest)
    return JointTransforms(world=world, skin=world @ rest_inv)


def forward_kinematics_backward(skel: Skeleton, theta: np.ndarray,
                                d_skin: np.ndarray) -> np.ndarray:
    """Gradient of the skinning transforms w.r.t. theta.

    d_skin: (K, 4, 4) upstream gradient on JointTransforms.skin.
    Walks the tree leaf-to-root accumulating parent contributions.
    """
    theta = np.asarray(theta, dtype=np.float64)
    K = len(skel)
    L = _local_transforms(skel, theta)
    world = np.empty_like(L)
    for k, j in enumerate(skel.joints):
        world[k] = L[k] if j.parent < 0 else world[j.parent] @ L[k]
    rest_inv = np.linalg.inv(skel.rest_world())

    d_world = d_skin @ np.transpose(rest_inv, (0, 2, 1))
    g_world = d_world.copy()
    d_theta = np.zeros((K, 3))
    rest_R = quat_to_rotation(np.stack([j.rest_rotation for j in skel.joints]))
    for k in reversed(range(K)):
        j = skel.joints[k]
        parent_world = np.eye(4) if j.parent < 0 else world[j.parent]
        dL = parent_world.T @ g_world[k]
        if j.parent >= 0:
            g_world[j.parent] += g_world[k] @ L[k].T
        # L[:3,:3] = rest_R . Rot(theta): peel off the constant rest rotation
        d_pose_R = rest_R[k].T @ dL[:3, :3]
        d_theta[k] = rodrigues_backward(theta[k], d_pose_R)
    return d_theta


# ---------------------------------------------------------------------------
# positional encoding


def encode_position(p: np.ndarray, levels: int) -> np.ndarray:
    """Sinusoidal features: per level l, [sin(2^l pi p), cos(2^l pi p)]
    componentwise, sin block before cos block, levels concatenated.
    Output has 6 * levels entries per input point."""
    if levels < 1:
        raise InvalidParameterError("levels must be >= 1")
    p = np.asarray(p, dtype=np.float64)
    parts = []
    for lv in range(levels):
        ang = (2.0 ** lv) * np.pi * p
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    return np.concatenate(parts, axis=-1)


def encode_position_backward(p: np.ndarray, levels: int, d_enc: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    grad = np.zeros_like(p)
    for lv in range(levels):
        f = (2.0 ** lv) * np.pi
        ang = f * p
        ds = d_enc[..., 6 * lv:6 * lv + 3]
        dc = d_enc[..., 6 * lv + 3:6 * lv + 6]
        grad += f * (ds * np.cos(ang) - dc * np.sin(ang))
    return grad


# ---------------------------------------------------------------------------
# small dense networks (tanh hidden layers, zero-initialized output layer)


@dataclass
class MLP:
    """Plain fully connected net; float64 weights, tanh activations."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @staticmethod
    def create(sizes: list[int], rng: np.random.Generator) -> "MLP":
        """Hidden layers get scaled-normal init; the output layer starts at
        zero so the network is exactly the zero map at step 0."""
        ws, bs = [], []
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            last = i == len(sizes) - 2
            if last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out))
            ws.append(w)
            bs.append(np.zeros(fan_out))
        return MLP(ws, bs)

    @property
    def n_layers(self):
        return len(self.weights)

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """x: (..., d_in) -> (..., d_out). Tanh on all but the last layer."""
        x = np.asarray(x, dtype=np.float64)
        cache = [x]
        h = x
        for i in range(self.n_layers):
            h = h @ self.weights[i] + self.biases[i]
            if i < self.n_layers - 1:
                h = np.tanh(h)
            cache.append(h)
        return (h, cache) if want_cache else h

    def backward(self, cache, d_out: np.ndarray):
        """Returns (d_weights, d_biases, d_input)."""
        dW = [None] * self.n_layers
        db = [None] * self.n_layers
        g = np.asarray(d_out, dtype=np.float64)
        for i in reversed(range(self.n_layers)):
            h_in = cache[i]
            if i < self.n_layers - 1:
                g = g * (1.0 - cache[i + 1] ** 2)   # tanh'
            flat_in = h_in.reshape(-1, h_in.shape[-1])
            flat_g = g.reshape(-1, g.shape[-1])
            dW[i] = flat_in.T @ flat_g
            db[i] = flat_g.sum(axis=0)
            g = g @ self.weights[i].T
        return dW, db, g

    def param_list(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}.w{i}", w))
            out.append((f"{prefix}.b{i}", b))
        return out

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])


# ---------------------------------------------------------------------------
# skin field: nearest-joint weights plus learned corrections


WEIGHT_FLOOR = 1e-8   # keeps log() of hard-zero nearest weights finite


@dataclass
class SkinField:
    nearest_weights: np.ndarray   # (N, K), rows sum to 1
    lbs_mlp: MLP                  # encoded center -> K weight logits
    pose_mlp: MLP                 # flattened theta_T -> delta theta
    encode_levels: int = 4

    def validate(self):
        w = self.nearest_weights
        if np.any(w < 0.0):
            raise InvalidParameterError("negative nearest weight")
        if np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
            raise InvalidParameterError("nearest weight rows must sum to 1")


def corrected_skin_weights(nearest: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """softmax_k( log(nearest_k + 1e-8) + logits_k ), rowwise.

    With zero logits this reproduces the nearest weights up to the 1e-8
    floor; the output is strictly positive and sums to 1 exactly.
    """
    z = np.log(nearest + WEIGHT_FLOOR) + logits
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def corrected_skin_weights_backward(weights: np.ndarray, d_weights: np.ndarray) -> np.ndarray:
    """Softmax backward; returns gradient on the logits."""
    dot = (d_weights * weights).sum(axis=-1, keepdims=True)
    return weights * (d_weights - dot)


def blend_joint_transforms(weights: np.ndarray, transforms: JointTransforms):
    """Per-surfel blended rotation and translation: sum_k W_k A_k.

    weights: (N, K). Returns R (N, 3, 3) and T (N, 3). No re-orthonormalization.
    """
    A = transforms.skin
    R = np.einsum("nk,kij->nij", weights, A[:, :3, :3])
    T = weights @ A[:, :3, 3]
    return R, T


def blend_joint_transforms_backward(weights, transforms, dR, dT):
    """Returns (d_weights, d_skin) for the blend above."""
    A = transforms.skin
    d_weights = (np.einsum("nij,kij->nk", dR, A[:, :3, :3])
                 + dT @ A[:, :3, 3].T)
    d_skin = np.zeros_like(A)
    d_skin[:, :3, :3] = np.einsum("nk,nij->kij", weights, dR)
    d_skin[:, :3, 3] = weights.T @ dT
    return d_weights, d_skin


def deform_points(R: np.ndarray, T: np.ndarray, p: np.ndarray) -> np.ndarray:
    """p -> R p + T, rowwise."""
    return np.einsum("nij,nj->ni", R, p) + T


def deform_covariance(R: np.ndarray, Sigma: np.ndarray) -> np.ndarray:
    """Sigma -> R Sigma R^T, rowwise."""
    return np.einsum("nij,njk,nlk->nil", R, Sigma, R)


# ---------------------------------------------------------------------------
# pose parameters and calibration


def wrap_axis_angle(theta: np.ndarray) -> np.ndarray:
    """Wrap axis-angle magnitudes into [-pi, pi).

    Identity for |theta| < pi, so gradients pass through unchanged in the
    operating range; larger magnitudes are folded (non-differentiable at
    the fold, which training never reaches).
    """
    theta = np.asarray(theta, dtype=np.float64)
    m = np.sqrt((theta * theta).sum(axis=-1, keepdims=True))
    wrapped = np.mod(m + np.pi, 2.0 * np.pi) - np.pi
    scale = np.where(m < np.pi, 1.0, wrapped / np.where(m == 0.0, 1.0, m))
    return theta * scale


@dataclass
class PoseParams:
    """Per-frame pose: dataset-provided theta_T plus shape metadata."""

    theta_T: np.ndarray            # (K, 3) axis-angle per joint
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.theta_T = np.asarray(self.theta_T, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if not np.all(np.isfinite(self.theta_T)):
            raise InvalidParameterError("non-finite pose")
        self.theta_T = wrap_axis_angle(self.theta_T)


def calibrate_pose(pose_mlp: MLP, theta_T: np.ndarray, want_cache: bool = False):
    """theta = wrap(theta_T + MLP(theta_T)).

    The correction MLP sees the flattened pose vector; with its
    zero-initialized output layer the correction is exactly zero at step 0.
    """
    theta_T = np.asarray(theta_T, dtype=np.float64)
    flat = theta_T.reshape(-1)
    delta, cache = pose_mlp.forward(flat, want_cache=True)
    theta = wrap_axis_angle(theta_T + delta.reshape(theta_T.shape))
    if want_cache:
        return theta, delta.reshape(theta_T.shape), cache
    return theta


def calibrate_pose_backward(pose_mlp: MLP, cache, d_theta: np.ndarray):
    """Returns (dW, db, d_theta_T); wrap is treated as identity."""
    dW, db, d_in = pose_mlp.backward(cache, np.asarray(d_theta).reshape(-1))
    return dW, db, d_in.reshape(d_theta.shape) + d_theta


# ---------------------------------------------------------------------------
# nearest-weight assignment


def nearest_vertex_weights(points: np.ndarray, rig_positions: np.ndarray,
                           rig_weights: np.ndarray) -> np.ndarray:
    """Copy each point's skinning weights from its nearest rig vertex
    (Euclidean in canonical space, ties to the lowest vertex index)."""
    points = np.asarray(points, dtype=np.float64)
    # |a-b|^2 expansion avoids the (N, V, 3) intermediate
    d2 = ((points ** 2).sum(axis=1)[:, None]
          + (rig_positions ** 2).sum(axis=1)[None, :]
          - 2.0 * points @ rig_positions.T)
    idx = np.argmin(d2, axis=1)   # argmin takes the first minimum: lowest index
    return rig_weights[idx].copy()
