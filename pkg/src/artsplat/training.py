"""Optimization loop: losses, adaptive updates, density control, checks.

The trainable tensors are the surfel arrays plus the two correction MLPs;
dataset poses (theta_T) stay fixed. Updates use bias-corrected first/second
moment estimates with per-group learning rates. Every `densify_interval`
iterations the surfel set is adapted: high-gradient surfels are cloned
(small) or split (large, scales / 1.6), surfels whose opacity stayed below
the prune threshold for the whole window are dropped, and moment buffers
are realigned row-for-row with the surviving parameters.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import articulation as art
from . import losses as L
from . import pipeline
from .articulation import MLP, Skeleton, SkinField
from .rasterizer import Camera
from .surfel import SurfelCloud, logit, normalize_quat, sigmoid


class TrainingError(RuntimeError):
    """Non-recoverable numerical failure during optimization."""


@dataclass
class AblationConfig:
    enable_lbs_opt: bool = True
    enable_pose_calib: bool = True
    enable_mask_loss: bool = True


@dataclass
class RunConfig:
    """Every knob of a training run; all fields have working defaults."""

    scene: str | None = None
    out_dir: str | None = None
    iters: int = 1200
    lambda_mask: float = 0.3
    lambda_l1: float = 0.8
    lambda_ssim: float = 0.1
    ablation: AblationConfig = field(default_factory=AblationConfig)
    lr_centers: float = 1.6e-4
    center_lr_decay: float = 0.01          # final/initial lr ratio over the run
    lr_rotations: float = 1e-3
    lr_mlp: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    densify_interval: int = 400
    tau_grad: float = 2e-4                 # screen-space positional gradient mean
    tau_size: float = 0.01                 # fraction of scene extent
    tau_alpha: float = 0.005               # prune below this window-max opacity
    opacity_reset: bool = True
    opacity_reset_value: float = 0.01
    split_shrink: float = 1.6
    encode_levels: int = 4
    lbs_hidden: tuple = (64, 64)
    pose_hidden: tuple = (32,)
    seed: int = 0
    threads: int = 1
    deterministic: bool = False

    def loss_weights(self) -> L.LossWeights:
        return L.LossWeights(self.lambda_mask, self.lambda_l1, self.lambda_ssim)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablation"] = dataclasses.asdict(self.ablation)
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        ab = d.pop("ablation", {})
        cfg = RunConfig(**{k: v for k, v in d.items()
                           if k in {f.name for f in dataclasses.fields(RunConfig)}})
        cfg.ablation = AblationConfig(**ab) if isinstance(ab, dict) else ab
        if isinstance(cfg.lbs_hidden, list):
            cfg.lbs_hidden = tuple(cfg.lbs_hidden)
        if isinstance(cfg.pose_hidden, list):
            cfg.pose_hidden = tuple(cfg.pose_hidden)
        return cfg


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    steps: dict

    @staticmethod
    def create(params: dict) -> "AdamState":
        return AdamState({k: np.zeros_like(p) for k, p in params.items()},
                         {k: np.zeros_like(p) for k, p in params.items()},
                         {k: 0 for k in params})

    def ensure(self, params: dict):
        """Align slots with the current parameter set (MLPs may toggle)."""
        for k, p in params.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
                self.steps[k] = 0


def adam_update(adam: AdamState, params: dict, grads: dict, lrs: dict,
                beta1: float, beta2: float, eps: float):
    """In-place bias-corrected moment update on each tensor."""
    for name, p in params.items():
        g = grads[name]
        lr = lrs[name]
        adam.steps[name] += 1
        t = adam.steps[name]
        m = adam.m[name]
        v = adam.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# train state


@dataclass
class TrainState:
    cloud: SurfelCloud
    skin: SkinField
    skeleton: Skeleton
    theta_bank: np.ndarray        # (F, K, 3) dataset poses for every frame record
    beta: np.ndarray
    rig_positions: np.ndarray
    rig_weights: np.ndarray
    config: RunConfig
    adam: AdamState = None
    iteration: int = 0
    densify_grad: np.ndarray = None    # accumulated screen-space |dL/d center|
    densify_count: np.ndarray = None
    densify_maxop: np.ndarray = None   # window max of sigmoid(opacity)

    def __post_init__(self):
        n = len(self.cloud)
        if self.adam is None:
            self.adam = AdamState.create(self.parameters())
        if self.densify_grad is None:
            self.densify_grad = np.zeros(n)
            self.densify_count = np.zeros(n)
            self.densify_maxop = np.zeros(n)

    def parameters(self) -> dict:
        params = {
            "centers": self.cloud.centers,
            "rotations": self.cloud.rotations,
            "log_scales": self.cloud.log_scales,
            "opacity_logits": self.cloud.opacity_logits,
            "colors": self.cloud.colors,
        }
        ab = self.config.ablation
        if ab.enable_lbs_opt:
            params.update(dict(self.skin.lbs_mlp.param_list("lbs_mlp")))
        if ab.enable_pose_calib:
            params.update(dict(self.skin.pose_mlp.param_list("pose_mlp")))
        return params

    def learning_rates(self) -> dict:
        cfg = self.config
        frac = self.iteration / max(cfg.iters, 1)
        lr_centers = cfg.lr_centers * (cfg.center_lr_decay ** frac)
        out = {}
        for name in self.parameters():
            if name == "centers":
                out[name] = lr_centers
            elif name == "rotations":
                out[name] = cfg.lr_rotations
            elif name == "log_scales":
                out[name] = cfg.lr_log_scales
            elif name == "opacity_logits":
                out[name] = cfg.lr_opacity
            elif name == "colors":
                out[name] = cfg.lr_colors
            else:
                out[name] = cfg.lr_mlp
        return out

    def scene_extent(self) -> float:
        lo = self.rig_positions.min(axis=0)
        hi = self.rig_positions.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def audit(self):
        """Moment rows must line up with live parameters after realignment."""
        params = self.parameters()
        for k, p in params.items():
            if self.adam.m[k].shape != p.shape or self.adam.v[k].shape != p.shape:
                raise TrainingError(f"optimizer moment misaligned for {k}")
        n = len(self.cloud)
        for arr in (self.densify_grad, self.densify_count, self.densify_maxop):
            if arr.shape != (n,):
                raise TrainingError("densify statistics misaligned")
        if self.skin.nearest_weights.shape[0] != n:
            raise TrainingError("nearest weights misaligned")


# ---------------------------------------------------------------------------
# one optimization step


def compute_frame_loss(state: TrainState, frame_idx: int, camera: Camera,
                       gt_image: np.ndarray, gt_mask: np.ndarray, *,
                       want_grads: bool, kernel_cutoff: bool = True,
                       early_stop: bool = True):
    """Forward losses for one frame; optionally the full backward pass."""
    cfg = state.config
    ab = cfg.ablation
    result, cache = pipeline.render_frame(
        state.cloud, state.skin, state.skeleton, state.theta_bank[frame_idx],
        camera, enable_pose_calib=ab.enable_pose_calib,
        enable_lbs_opt=ab.enable_lbs_opt, kernel_cutoff=kernel_cutoff,
        early_stop=early_stop, threads=cfg.threads, want_cache=want_grads)

    parts = {}
    l1_val, l1_grad = L.l1_loss(result.image, gt_image)
    ssim_val, ssim_grad = L.ssim_loss(result.image, gt_image)
    parts["l1"] = l1_val
    parts["ssim"] = ssim_val
    if ab.enable_mask_loss:
        mask_val, mask_grad = L.mask_loss(result.alpha, gt_mask)
        parts["mask"] = mask_val
    total = L.total_loss(parts, cfg.loss_weights(), enable_mask=ab.enable_mask_loss)
    if not want_grads:
        return total, parts, result, None

    d_image = cfg.lambda_l1 * l1_grad + cfg.lambda_ssim * ssim_grad
    d_alpha = (cfg.lambda_mask * mask_grad if ab.enable_mask_loss
               else np.zeros_like(result.alpha))
    grads = pipeline.render_frame_backward(
        state.cloud, state.skin, state.skeleton, camera, cache,
        d_image, d_alpha, enable_pose_calib=ab.enable_pose_calib,
        enable_lbs_opt=ab.enable_lbs_opt, threads=cfg.threads)
    return total, parts, result, (grads, cache)


def step(state: TrainState, frame_idx: int, camera: Camera,
         gt_image: np.ndarray, gt_mask: np.ndarray) -> dict:
    """One render / backward / update cycle; returns scalar metrics."""
    cfg = state.config
    total, parts, result, backward = compute_frame_loss(
        state, frame_idx, camera, gt_image, gt_mask, want_grads=True)
    if not np.isfinite(total):
        raise TrainingError(
            f"non-finite loss at iteration {state.iteration + 1}, frame {frame_idx}")
    grads, cache = backward

    params = state.parameters()
    state.adam.ensure(params)
    lrs = state.learning_rates()
    adam_update(state.adam, params, grads.params, lrs,
                cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    state.cloud.renormalize()

    # densification statistics: screen-scaled positional gradient of visible
    # surfels plus the running window max of opacity
    posed_centers = cache.pose.posed.centers
    _, z = camera.project(posed_centers)
    g_cam = grads.posed_centers @ camera.rotation.T
    with np.errstate(divide="ignore", invalid="ignore"):
        gx = 0.5 * camera.width * z / camera.fx * g_cam[:, 0]
        gy = 0.5 * camera.height * z / camera.fy * g_cam[:, 1]
    gs = np.where(np.isfinite(z) & (z > 0), np.hypot(gx, gy), 0.0)
    vis = grads.visible
    state.densify_grad[vis] += gs[vis]
    state.densify_count[vis] += 1
    state.densify_maxop = np.maximum(state.densify_maxop, cache.pose.posed.alphas)

    state.iteration += 1
    metrics = {"iteration": state.iteration, "frame": frame_idx,
               "total": total, "l1": parts["l1"], "ssim": parts["ssim"],
               "count": len(state.cloud)}
    if "mask" in parts:
        metrics["mask"] = parts["mask"]
    return metrics


# ---------------------------------------------------------------------------
# density control


def _realign_rows(adam: AdamState, surfel_keys, keep, n_new: int):
    """Keep surviving moment rows, zero rows for freshly created surfels."""
    for k in surfel_keys:
        for slot in (adam.m, adam.v):
            old = slot[k]
            fresh = np.zeros((n_new,) + old.shape[1:], dtype=old.dtype)
            slot[k] = np.concatenate([old[keep], fresh], axis=0)


SURFEL_PARAM_KEYS = ("centers", "rotations", "log_scales", "opacity_logits", "colors")


def density_control(state: TrainState) -> dict:
    """Clone / split / prune on the densify window statistics."""
    cfg = state.config
    n = len(state.cloud)
    means = np.where(state.densify_count > 0,
                     state.densify_grad / np.maximum(state.densify_count, 1), 0.0)
    extent = state.scene_extent()
    max_scale = np.exp(state.cloud.log_scales).max(axis=1)

    prune = state.densify_maxop < cfg.tau_alpha
    grow = (means > cfg.tau_grad) & ~prune
    clone = grow & (max_scale < cfg.tau_size * extent)
    split = grow & ~clone
    keep = ~prune & ~split

    rng = np.random.default_rng([cfg.seed, state.iteration, 7])
    parts = [state.cloud.select(keep)]
    n_clone = int(clone.sum())
    n_split = int(split.sum())
    if n_clone:
        parts.append(state.cloud.select(clone))
    if n_split:
        parent = state.cloud.select(split)
        from .surfel import quat_to_rotation
        R = quat_to_rotation(parent.rotations)
        scales = np.exp(parent.log_scales)
        children = []
        for _ in range(2):
            eps = rng.normal(0.0, 1.0, (n_split, 2))
            offs = (scales[:, 0] * eps[:, 0])[:, None] * R[:, :, 0] \
                 + (scales[:, 1] * eps[:, 1])[:, None] * R[:, :, 1]
            child = parent.copy()
            child.centers = parent.centers + offs
            child.log_scales = parent.log_scales - np.log(cfg.split_shrink)
            children.append(child)
        parts.append(SurfelCloud.concatenate(children))
    new_cloud = SurfelCloud.concatenate(parts) if len(parts) > 1 else parts[0].copy()

    n_fresh = len(new_cloud) - int(keep.sum())
    _realign_rows(state.adam, SURFEL_PARAM_KEYS, keep, n_fresh)

    kept_weights = state.skin.nearest_weights[keep]
    if n_fresh:
        fresh_pos = new_cloud.centers[int(keep.sum()):]
        fresh_w = art.nearest_vertex_weights(fresh_pos, state.rig_positions,
                                             state.rig_weights)
        state.skin.nearest_weights = np.concatenate([kept_weights, fresh_w], axis=0)
    else:
        state.skin.nearest_weights = kept_weights
    state.cloud = new_cloud

    did_reset = False
    if cfg.opacity_reset and state.iteration + cfg.densify_interval <= cfg.iters:
        cap = float(logit(np.float64(cfg.opacity_reset_value)))
        state.cloud.opacity_logits = np.minimum(state.cloud.opacity_logits, cap)
        did_reset = True

    m = len(state.cloud)
    state.densify_grad = np.zeros(m)
    state.densify_count = np.zeros(m)
    state.densify_maxop = sigmoid(state.cloud.opacity_logits).copy()
    state.audit()
    return {"cloned": n_clone, "split": n_split, "pruned": int(prune.sum()),
            "count": m, "opacity_reset": did_reset}


# ---------------------------------------------------------------------------
# full loop


def init_state(scene, config: RunConfig) -> TrainState:
    """Build the trainable state from a loaded scene."""
    from . import scene_io
    cloud, skin = scene_io.init_surfels(scene, seed=config.seed,
                                        encode_levels=config.encode_levels,
                                        lbs_hidden=config.lbs_hidden,
                                        pose_hidden=config.pose_hidden)
    theta_bank = np.stack([f.theta for f in scene.frames])
    return TrainState(cloud=cloud, skin=skin, skeleton=scene.skeleton,
                      theta_bank=theta_bank, beta=scene.beta,
                      rig_positions=scene.rig_positions,
                      rig_weights=scene.rig_weights, config=config)


def train(scene, config: RunConfig, state: TrainState | None = None,
          log_fn=None) -> TrainState:
    """Run (or resume) the optimization to the configured iteration budget.

    Frames from the training camera are visited round-robin; density
    control fires on the fixed interval. `log_fn` receives one metrics dict
    per iteration and one per density event.
    """
    from . import scene_io
    if state is None:
        state = init_state(scene, config)
    train_idx = [i for i, f in enumerate(scene.frames)
                 if f.camera_id == scene.train_camera]
    if not train_idx:
        raise TrainingError("scene has no frames for the training camera")
    camera = scene.cameras[scene.train_camera]
    data = [(scene_io.load_image(scene.resolve(scene.frames[i].image_path)),
             scene_io.load_mask(scene.resolve(scene.frames[i].mask_path)))
            for i in train_idx]

    while state.iteration < config.iters:
        k = state.iteration % len(train_idx)
        frame_idx = train_idx[k]
        gt_image, gt_mask = data[k]
        metrics = step(state, frame_idx, camera, gt_image, gt_mask)
        if log_fn is not None:
            log_fn(metrics)
        if state.iteration % config.densify_interval == 0:
            info = density_control(state)
            if log_fn is not None:
                log_fn({"iteration": state.iteration, "density_control": info})
    return state


# ---------------------------------------------------------------------------
# gradient verification


GRADIENT_CLASSES = ("center", "rot_q", "log_scale", "opacity", "color",
                    "lbs_mlp", "pose_mlp", "theta")

_CLASS_TO_PARAMS = {
    "center": ("centers",),
    "rot_q": ("rotations",),
    "log_scale": ("log_scales",),
    "opacity": ("opacity_logits",),
    "color": ("colors",),
}


@dataclass
class GradientReport:
    max_rel: dict
    passed: bool
    rel_tol: float
    abs_tol: float

    def lines(self):
        out = []
        for name in GRADIENT_CLASSES:
            err = self.max_rel.get(name)
            status = "PASS" if err is not None and err < self.rel_tol else "FAIL"
            out.append(f"{status}  {name:<10} max rel err {err:.3e}"
                       if err is not None else f"SKIP  {name}")
        return out


def gradient_check(state: TrainState, frame_idx: int, camera: Camera,
                   gt_image: np.ndarray, gt_mask: np.ndarray,
                   samples: int = 6, rel_tol: float = 1e-3,
                   abs_tol: float = 1e-5, seed: int = 0,
                   _corrupt: str | None = None) -> GradientReport:
    """Central finite differences against the analytic backward pass.

    Runs with the kernel cutoff and early termination disabled so the loss
    is smooth in every checked parameter. `_corrupt` shifts one class's
    analytic gradient by +1 (fault-injection hook for tests).
    """
    rng = np.random.default_rng(seed)

    def loss_only() -> float:
        total, _, _, _ = compute_frame_loss(
            state, frame_idx, camera, gt_image, gt_mask,
            want_grads=False, kernel_cutoff=False, early_stop=False)
        return total

    _, _, _, backward = compute_frame_loss(
        state, frame_idx, camera, gt_image, gt_mask,
        want_grads=True, kernel_cutoff=False, early_stop=False)
    grads, _ = backward

    ab = state.config.ablation
    class_tensors = {}
    for cls, names in _CLASS_TO_PARAMS.items():
        class_tensors[cls] = [(n, getattr(state.cloud, n), grads.params[n]) for n in names]
    if ab.enable_lbs_opt:
        class_tensors["lbs_mlp"] = [
            (name, tensor, grads.params[name])
            for name, tensor in state.skin.lbs_mlp.param_list("lbs_mlp")]
    if ab.enable_pose_calib:
        class_tensors["pose_mlp"] = [
            (name, tensor, grads.params[name])
            for name, tensor in state.skin.pose_mlp.param_list("pose_mlp")]
    class_tensors["theta"] = [("theta", state.theta_bank[frame_idx], grads.theta_T)]

    max_rel = {}
    for cls, tensors in class_tensors.items():
        worst = 0.0
        for _ in range(samples):
            name, tensor, g = tensors[rng.integers(len(tensors))]
            flat = tensor.reshape(-1)
            i = int(rng.integers(flat.size))
            analytic = g.reshape(-1)[i]
            if _corrupt == cls:
                analytic = analytic + 1.0
            h = 1e-4 * (1.0 + abs(flat[i]))
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_only()
            flat[i] = orig - h
            lm = loss_only()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            err = abs(analytic - numeric)
            if err > abs_tol:
                rel = err / max(abs(analytic), abs(numeric), abs_tol)
                worst = max(worst, rel)
        max_rel[cls] = worst
    passed = all(v < rel_tol for v in max_rel.values())
    return GradientReport(max_rel=max_rel, passed=passed,
                          rel_tol=rel_tol, abs_tol=abs_tol)
