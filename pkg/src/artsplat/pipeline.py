"""End-to-end differentiable chain: canonical surfels -> pose -> image.

`pose_surfels` runs calibration, kinematics, weight correction, and the
blended rigid transform; `render_frame` adds rasterization and keeps every
intermediate needed by `render_frame_backward`, which returns gradients for
each optimizable tensor (surfel parameters and both MLPs) plus the frame's
pose vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import articulation as art
from . import rasterizer as ras
from .articulation import MLP, SkinField, Skeleton
from .surfel import SurfelCloud, quat_to_rotation, quat_to_rotation_backward


@dataclass
class PoseCache:
    theta: np.ndarray
    pose_cache: object            # MLP cache, None when calibration is off
    fk: art.JointTransforms
    enc: np.ndarray | None
    lbs_cache: object             # MLP cache, None when weight correction is off
    weights: np.ndarray
    R_blend: np.ndarray
    T_blend: np.ndarray
    tu: np.ndarray
    tv: np.ndarray
    tu_posed: np.ndarray
    tv_posed: np.ndarray
    scales: np.ndarray
    posed: ras.PosedSurfels


def pose_surfels(cloud: SurfelCloud, skin: SkinField, skeleton: Skeleton,
                 theta_T: np.ndarray, *, enable_pose_calib: bool = True,
                 enable_lbs_opt: bool = True) -> PoseCache:
    """Carry canonical surfels into pose space."""
    if enable_pose_calib:
        theta, _, pose_cache = art.calibrate_pose(skin.pose_mlp, theta_T, want_cache=True)
    else:
        theta, pose_cache = art.wrap_axis_angle(theta_T), None
    fk = art.forward_kinematics(skeleton, theta)

    if enable_lbs_opt:
        enc = art.encode_position(cloud.centers, skin.encode_levels)
        logits, lbs_cache = skin.lbs_mlp.forward(enc, want_cache=True)
        weights = art.corrected_skin_weights(skin.nearest_weights, logits)
    else:
        enc, lbs_cache = None, None
        weights = skin.nearest_weights

    R_blend, T_blend = art.blend_joint_transforms(weights, fk)
    Rq = quat_to_rotation(cloud.rotations)
    tu, tv = Rq[:, :, 0].copy(), Rq[:, :, 1].copy()
    tu_posed = np.einsum("nij,nj->ni", R_blend, tu)
    tv_posed = np.einsum("nij,nj->ni", R_blend, tv)
    centers_posed = art.deform_points(R_blend, T_blend, cloud.centers)
    scales = np.exp(cloud.log_scales)
    axis_u = scales[:, 0:1] * tu_posed
    axis_v = scales[:, 1:2] * tv_posed
    posed = ras.make_posed(centers_posed, axis_u, axis_v,
                           cloud.opacity_logits, cloud.colors)
    return PoseCache(theta, pose_cache, fk, enc, lbs_cache, weights,
                     R_blend, T_blend, tu, tv, tu_posed, tv_posed, scales, posed)


@dataclass
class FrameCache:
    pose: PoseCache
    render: ras.RenderResult


def render_frame(cloud: SurfelCloud, skin: SkinField, skeleton: Skeleton,
                 theta_T: np.ndarray, camera: ras.Camera, *,
                 enable_pose_calib: bool = True, enable_lbs_opt: bool = True,
                 kernel_cutoff: bool = True, early_stop: bool = True,
                 threads: int = 1, want_cache: bool = False) -> tuple[ras.RenderResult, FrameCache | None]:
    pose = pose_surfels(cloud, skin, skeleton, theta_T,
                        enable_pose_calib=enable_pose_calib,
                        enable_lbs_opt=enable_lbs_opt)
    result = ras.render(camera, pose.posed, kernel_cutoff=kernel_cutoff,
                        early_stop=early_stop, threads=threads,
                        want_cache=want_cache)
    return result, (FrameCache(pose, result) if want_cache else None)


@dataclass
class FrameGrads:
    """Gradients of the frame loss, keyed to match the trainable tensors."""

    params: dict                  # name -> gradient array
    theta_T: np.ndarray           # gradient on the frame's raw pose vector
    posed_centers: np.ndarray     # pose-space center gradients (densify signal)
    visible: np.ndarray           # surfels that contributed any fragment


def render_frame_backward(cloud: SurfelCloud, skin: SkinField, skeleton: Skeleton,
                          camera: ras.Camera, frame: FrameCache,
                          d_image: np.ndarray, d_alpha: np.ndarray, *,
                          enable_pose_calib: bool = True,
                          enable_lbs_opt: bool = True,
                          threads: int = 1) -> FrameGrads:
    pose = frame.pose
    pg = ras.render_backward(camera, pose.posed, frame.render.cache,
                             d_image, d_alpha, threads=threads)

    N = len(cloud)
    visible = np.zeros(N, dtype=bool)
    for tc in frame.render.cache:
        hit = tc.w > 0.0
        if hit.any():
            visible[np.unique(tc.sid_global[hit])] = True

    # opacity: alpha = min(sigmoid(logit), clamp); use the stored (clamped)
    # value in the sigmoid derivative so the clamp region decays to ~0
    a = pose.posed.alphas
    d_logits = pg.alphas * a * (1.0 - a)

    # scaled axes -> scales and posed tangents
    dsu = (pose.tu_posed * pg.axis_u).sum(axis=1)
    dsv = (pose.tv_posed * pg.axis_v).sum(axis=1)
    d_log_scales = np.stack([dsu * pose.scales[:, 0], dsv * pose.scales[:, 1]], axis=1)
    d_tu_posed = pose.scales[:, 0:1] * pg.axis_u
    d_tv_posed = pose.scales[:, 1:2] * pg.axis_v

    # blended rigid transform
    dR_blend = (np.einsum("ni,nj->nij", pg.centers, cloud.centers)
                + np.einsum("ni,nj->nij", d_tu_posed, pose.tu)
                + np.einsum("ni,nj->nij", d_tv_posed, pose.tv))
    dT_blend = pg.centers
    d_centers = np.einsum("nji,nj->ni", pose.R_blend, pg.centers)
    d_tu = np.einsum("nji,nj->ni", pose.R_blend, d_tu_posed)
    d_tv = np.einsum("nji,nj->ni", pose.R_blend, d_tv_posed)

    # canonical tangent frame -> quaternion
    dRq = np.zeros((N, 3, 3))
    dRq[:, :, 0] = d_tu
    dRq[:, :, 1] = d_tv
    d_rotations = quat_to_rotation_backward(cloud.rotations, dRq)

    d_weights, d_skin = art.blend_joint_transforms_backward(
        pose.weights, pose.fk, dR_blend, dT_blend)

    params = {
        "centers": d_centers,
        "rotations": d_rotations,
        "log_scales": d_log_scales,
        "opacity_logits": d_logits,
        "colors": pg.colors,
    }

    if enable_lbs_opt:
        d_logits_w = art.corrected_skin_weights_backward(pose.weights, d_weights)
        dW, db, d_enc = skin.lbs_mlp.backward(pose.lbs_cache, d_logits_w)
        params["centers"] = params["centers"] + art.encode_position_backward(
            cloud.centers, skin.encode_levels, d_enc)
        for i in range(skin.lbs_mlp.n_layers):
            params[f"lbs_mlp.w{i}"] = dW[i]
            params[f"lbs_mlp.b{i}"] = db[i]

    d_theta = art.forward_kinematics_backward(skeleton, pose.theta, d_skin)
    if enable_pose_calib:
        dWp, dbp, d_theta_T = art.calibrate_pose_backward(skin.pose_mlp, pose.pose_cache, d_theta)
        for i in range(skin.pose_mlp.n_layers):
            params[f"pose_mlp.w{i}"] = dWp[i]
            params[f"pose_mlp.b{i}"] = dbp[i]
    else:
        d_theta_T = d_theta

    return FrameGrads(params=params, theta_T=d_theta_T,
                      posed_centers=pg.centers, visible=visible)
