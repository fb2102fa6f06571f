"""Perspective rasterization of posed surfels.

Every pixel ray is intersected with each candidate surfel plane by solving
the 3x3 system  [a_u  a_v  -d] (u, v, t)^T = origin - center,  where a_u,
a_v are the scaled tangent axes. Fragments are sorted by intersection depth
(ties broken by surfel id) and composited front to back:

    C = sum_i c_i w_i T_i,   w_i = alpha_i G_i,   T_i = prod_{j<i} (1 - w_j)

The fast path bins surfels into 16x16 pixel tiles and skips fragments with
G below exp(-4.5); `render_oracle` evaluates every surfel at every pixel
with no culling, cutoff, or early termination and is the semantic ground
truth. With the fast path's cutoffs disabled the two are bitwise equal:
both run the same per-fragment arithmetic in the same per-pixel order.

`render_backward` replays the compositing in reverse and propagates exact
gradients to the posed surfel arrays (centers, scaled axes, opacities,
colors).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .surfel import InvalidParameterError, sigmoid

TILE_SIZE = 16
KERNEL_CUTOFF_R2 = 9.0            # G >= exp(-4.5)  <=>  u^2 + v^2 <= 9
PARALLEL_EPS = 1e-9
EARLY_STOP_T = 1e-4
ALPHA_CLAMP = 1.0 - 1e-7          # keeps 1 - alpha*G bounded away from 0


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray      # (3, 3) world-to-camera
    translation: np.ndarray   # (3,)
    near_clip: float = 0.01
    cam_id: str = "cam"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def validate(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("resolution must be at least 1x1")
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-7:
            raise InvalidParameterError("camera rotation is not orthonormal")
        if self.near_clip <= 0:
            raise InvalidParameterError("near_clip must be positive")

    def origin(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def ray_grid(self):
        """World-space ray directions through every pixel center, scaled so
        the ray parameter equals camera-space depth. Returns (dirs (H*W, 3),
        1/|dirs| (H*W,))."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
        dirs = cam @ self.rotation   # == R^T applied to each row
        inv_norm = 1.0 / np.sqrt((dirs * dirs).sum(axis=1))
        return dirs, inv_norm

    def project(self, points: np.ndarray):
        """World points (N, 3) -> pixel coordinates (N, 2) and camera depth (N,)."""
        cam = points @ self.rotation.T + self.translation
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = self.fx * cam[:, 0] / z + self.cx
            py = self.fy * cam[:, 1] / z + self.cy
        return np.stack([px, py], axis=1), z


@dataclass
class PosedSurfels:
    """Pose-space surfels ready for rasterization. axis_u/axis_v are the
    tangent directions pre-multiplied by their scales; under LBS they are
    not necessarily orthonormal."""

    centers: np.ndarray    # (N, 3)
    axis_u: np.ndarray     # (N, 3)
    axis_v: np.ndarray     # (N, 3)
    alphas: np.ndarray     # (N,) in (0, 1), already clamped
    colors: np.ndarray     # (N, 3)
    normal_raw: np.ndarray = field(init=False)
    normal_unit: np.ndarray = field(init=False)
    degenerate: np.ndarray = field(init=False)   # surfels with a vanished axis

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        self.axis_u = np.ascontiguousarray(self.axis_u, dtype=np.float64)
        self.axis_v = np.ascontiguousarray(self.axis_v, dtype=np.float64)
        self.alphas = np.ascontiguousarray(self.alphas, dtype=np.float64)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        self.normal_raw = _cross(self.axis_u, self.axis_v)
        nn = np.sqrt((self.normal_raw ** 2).sum(axis=1))
        self.degenerate = nn == 0.0
        safe = np.where(self.degenerate, 1.0, nn)
        self.normal_unit = self.normal_raw / safe[:, None]

    def __len__(self):
        return self.centers.shape[0]


def make_posed(centers, axis_u, axis_v, opacity_logits, colors) -> PosedSurfels:
    alphas = np.minimum(sigmoid(opacity_logits), ALPHA_CLAMP)
    return PosedSurfels(centers, axis_u, axis_v, alphas, colors)


def _cross(a, b):
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.float64)
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def eval_fragments(origin, dirs, dir_inv_norm, centers, axis_u, axis_v,
                   normal_raw, normal_unit, near_clip, kernel_cutoff):
    """Per-fragment plane intersection and kernel evaluation.

    All array arguments are broadcast-compatible fragment-aligned views.
    Returns (u, v, depth, G, det, valid); invalid fragments carry G = 0 and
    depth = +inf so they compose and sort as no-ops.
    """
    b = origin - centers
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        m1 = _cross(axis_v, -dirs)
        m2 = _cross(-dirs, axis_u)
        det = _dot(axis_u, m1)
        u = _dot(b, m1) / det
        v = _dot(b, m2) / det
        t = _dot(normal_raw, b) / det
        dn = np.abs(_dot(dirs, normal_unit)) * dir_inv_norm
        valid = (dn >= PARALLEL_EPS) & (t > near_clip) & np.isfinite(u) & np.isfinite(v)
        r2 = u * u + v * v
        if kernel_cutoff:
            valid = valid & (r2 <= KERNEL_CUTOFF_R2)
        G = np.where(valid, np.exp(-0.5 * r2), 0.0)
    depth = np.where(valid, t, np.inf)
    return u, v, depth, G, det, valid


def ray_splat_intersect(camera: Camera, pixel, H: np.ndarray):
    """Intersect the ray through pixel (row, col) with a posed surfel plane
    given by its homogeneous transform H. Returns (u, v, depth) or None
    when the ray is parallel to the plane, the hit is behind the near
    plane, or the surfel is degenerate."""
    row, col = pixel
    camera.validate()
    dirs, inv_norm = camera.ray_grid()
    i = int(row) * camera.width + int(col)
    H = np.asarray(H, dtype=np.float64)
    au, av, p = H[:3, 0], H[:3, 1], H[:3, 3]
    n_raw = np.cross(au, av)
    nn = np.linalg.norm(n_raw)
    if nn == 0.0:
        return None
    u, v, depth, G, det, valid = eval_fragments(
        camera.origin(), dirs[i], inv_norm[i], p, au, av,
        n_raw, n_raw / nn, camera.near_clip, kernel_cutoff=False)
    if not bool(valid):
        return None
    return float(u), float(v), float(depth)


# ---------------------------------------------------------------------------
# binning


@dataclass
class Binning:
    tiles_x: int
    tiles_y: int
    ids: list            # per tile (row-major), ascending surfel id arrays
    bbox: np.ndarray     # (N, 4) int: x0, x1, y0, y1 inclusive; -1s when culled


def cull_and_bin(camera: Camera, posed: PosedSurfels, kernel_cutoff: bool = True) -> Binning:
    """Conservative tile assignment from each surfel's 3-sigma bounding
    sphere. With the kernel cutoff disabled there is no spatial bound, so
    every surfel lands in every tile and per-fragment tests do the culling.
    """
    N = len(posed)
    tiles_x = (camera.width + TILE_SIZE - 1) // TILE_SIZE
    tiles_y = (camera.height + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = tiles_x * tiles_y
    bbox = np.full((N, 4), -1, dtype=np.int64)

    if not kernel_cutoff:
        ids = np.arange(N)
        bbox[:, 0], bbox[:, 1] = 0, camera.width - 1
        bbox[:, 2], bbox[:, 3] = 0, camera.height - 1
        return Binning(tiles_x, tiles_y, [ids.copy() for _ in range(n_tiles)], bbox)

    cam = posed.centers @ camera.rotation.T + camera.translation
    r3 = 3.0 * np.sqrt((posed.axis_u ** 2).sum(axis=1) + (posed.axis_v ** 2).sum(axis=1))
    z = cam[:, 2]
    culled = (z + r3 <= camera.near_clip) | posed.degenerate
    everywhere = ~culled & (z - r3 <= camera.near_clip)   # sphere reaches the near plane
    bounded = ~culled & ~everywhere

    x0 = np.zeros(N, dtype=np.int64)
    x1 = np.full(N, camera.width - 1, dtype=np.int64)
    y0 = np.zeros(N, dtype=np.int64)
    y1 = np.full(N, camera.height - 1, dtype=np.int64)
    if bounded.any():
        cx, cy, cz = cam[bounded, 0], cam[bounded, 1], cam[bounded, 2]
        r = r3[bounded]
        zlo, zhi = cz - r, cz + r

        def rng(c, f, pp):
            # extremes of coord/z over the interval box sit at its corners
            lo, hi = c - r, c + r
            corners = np.stack([lo / zlo, lo / zhi, hi / zlo, hi / zhi])
            return f * corners.min(axis=0) + pp, f * corners.max(axis=0) + pp

        umin, umax = rng(cx, camera.fx, camera.cx)
        vmin, vmax = rng(cy, camera.fy, camera.cy)
        x0[bounded] = np.floor(umin - 0.5).astype(np.int64)
        x1[bounded] = np.ceil(umax - 0.5).astype(np.int64)
        y0[bounded] = np.floor(vmin - 0.5).astype(np.int64)
        y1[bounded] = np.ceil(vmax - 0.5).astype(np.int64)
    x0 = np.clip(x0, 0, camera.width - 1)
    x1 = np.clip(x1, 0, camera.width - 1)
    y0 = np.clip(y0, 0, camera.height - 1)
    y1 = np.clip(y1, 0, camera.height - 1)
    offscreen = bounded & ((x1 < x0) | (y1 < y0))
    keep = ~culled & ~offscreen
    bbox[keep, 0], bbox[keep, 1] = x0[keep], x1[keep]
    bbox[keep, 2], bbox[keep, 3] = y0[keep], y1[keep]

    ids = [np.empty(0, dtype=np.int64) for _ in range(n_tiles)]
    if keep.any():
        sid = np.nonzero(keep)[0]
        tx0, tx1 = x0[sid] // TILE_SIZE, x1[sid] // TILE_SIZE
        ty0, ty1 = y0[sid] // TILE_SIZE, y1[sid] // TILE_SIZE
        counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
        rep = np.repeat(np.arange(sid.size), counts)
        within = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        w = (tx1 - tx0 + 1)[rep]
        tx = tx0[rep] + within % w
        ty = ty0[rep] + within // w
        tile_of = ty * tiles_x + tx
        order = np.lexsort((sid[rep], tile_of))
        tile_sorted = tile_of[order]
        sid_sorted = sid[rep][order]
        starts = np.searchsorted(tile_sorted, np.arange(n_tiles + 1))
        for t in range(n_tiles):
            ids[t] = sid_sorted[starts[t]:starts[t + 1]]
    return Binning(tiles_x, tiles_y, ids, bbox)


# ---------------------------------------------------------------------------
# reference per-pixel compositing


@dataclass
class PixelFragments:
    """Depth-ordered fragments hitting one pixel."""

    sids: np.ndarray
    depths: np.ndarray
    kernels: np.ndarray
    alphas: np.ndarray

    def validate(self, near_clip=0.0):
        if np.any(np.diff(self.depths) < 0):
            raise InvalidParameterError("fragments must be sorted by depth")
        if np.any(self.depths <= near_clip):
            raise InvalidParameterError("fragment depth behind near plane")


def composite_pixel(fragments: PixelFragments, colors: np.ndarray,
                    background=None, early_stop: float | None = None):
    """Front-to-back alpha compositing of one pixel. Returns (rgb, alpha)."""
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    n = len(fragments.sids)
    if n == 0:
        return bg.copy(), 0.0
    T = 1.0
    acc = np.zeros(3)
    for i in range(n):
        if early_stop is not None and T < early_stop:
            break
        w = fragments.alphas[i] * fragments.kernels[i]
        acc = acc + colors[int(fragments.sids[i])] * (w * T)
        T = T * (1.0 - w)
    return acc + bg * T, 1.0 - T


# ---------------------------------------------------------------------------
# fast path


@dataclass
class RenderResult:
    image: np.ndarray        # (H, W, 3)
    alpha: np.ndarray        # (H, W)
    info: dict
    cache: object = None


class _TileCache:
    __slots__ = ("tile", "width", "pix_local", "pix_global", "sid_local",
                 "sid_global", "u", "v", "G", "w", "det", "t_before",
                 "starts", "order_desc", "n_active", "t_final", "n_slots", "ids")


def _tile_job(camera, posed, binning, dirs, inv_norm, origin, tx, ty,
              kernel_cutoff, early_stop, want_cache):
    """Rasterize one tile; returns (slot colors, slot transmittance, cache,
    early-stop skip count) or None when the tile is empty."""
    tile_idx = ty * binning.tiles_x + tx
    ids = binning.ids[tile_idx]
    if ids.size == 0:
        return None
    tx0, ty0 = tx * TILE_SIZE, ty * TILE_SIZE
    tw = min(TILE_SIZE, camera.width - tx0)
    th = min(TILE_SIZE, camera.height - ty0)
    n_slots = tw * th

    # fragment construction: each surfel's bbox clipped to this tile
    bb = binning.bbox[ids]
    cx0 = np.maximum(bb[:, 0], tx0)
    cx1 = np.minimum(bb[:, 1], tx0 + tw - 1)
    cy0 = np.maximum(bb[:, 2], ty0)
    cy1 = np.minimum(bb[:, 3], ty0 + th - 1)
    fw = cx1 - cx0 + 1
    counts = fw * (cy1 - cy0 + 1)
    total = int(counts.sum())
    if total == 0:
        return None
    rep = np.repeat(np.arange(ids.size), counts)
    within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = cx0[rep] + within % fw[rep]
    py = cy0[rep] + within // fw[rep]
    pix_local = (py - ty0) * tw + (px - tx0)
    pix_global = py * camera.width + px
    sid_global = ids[rep]

    u, v, depth, G, det, valid = eval_fragments(
        origin, dirs[pix_global], inv_norm[pix_global],
        posed.centers[sid_global], posed.axis_u[sid_global],
        posed.axis_v[sid_global], posed.normal_raw[sid_global],
        posed.normal_unit[sid_global], camera.near_clip, kernel_cutoff)
    w = posed.alphas[sid_global] * G

    order = np.lexsort((sid_global, depth, pix_local))
    pix_local = pix_local[order]
    pix_global = pix_global[order]
    sid_local = rep[order]
    sid_global = sid_global[order]
    u, v, G, w, det = u[order], v[order], G[order], w[order], det[order]

    slot_counts = np.bincount(pix_local, minlength=n_slots)
    starts = np.concatenate(([0], np.cumsum(slot_counts)))[:-1]
    order_desc = np.argsort(-slot_counts, kind="stable")
    counts_desc = slot_counts[order_desc]
    maxc = int(counts_desc[0]) if n_slots else 0
    n_active = ((counts_desc[None, :] > np.arange(maxc)[:, None]).sum(axis=1)
                if maxc else np.zeros(0, dtype=np.int64))

    T = np.ones(n_slots)
    C = np.zeros((n_slots, 3))
    t_before = np.zeros(total)
    skipped = 0
    for r in range(maxc):
        sel = order_desc[:n_active[r]]
        fi = starts[sel] + r
        if early_stop:
            alive = T[sel] >= EARLY_STOP_T
            if not alive.all():
                skipped += int((~alive).sum())
                w[fi[~alive]] = 0.0
                sel = sel[alive]
                fi = fi[alive]
        w_r = w[fi]
        t_before[fi] = T[sel]
        contrib = T[sel] * w_r
        C[sel] += contrib[:, None] * posed.colors[sid_global[fi]]
        T[sel] = T[sel] * (1.0 - w_r)

    cache = None
    if want_cache:
        cache = _TileCache()
        cache.tile = (tx, ty, tx0, ty0, tw, th)
        cache.width = camera.width
        cache.pix_local, cache.pix_global = pix_local, pix_global
        cache.sid_local, cache.sid_global = sid_local, sid_global
        cache.u, cache.v, cache.G, cache.w, cache.det = u, v, G, w, det
        cache.t_before = t_before
        cache.starts = starts
        cache.order_desc, cache.n_active = order_desc, n_active
        cache.t_final = T
        cache.n_slots = n_slots
        cache.ids = ids
    return C, T, cache, skipped


def render(camera: Camera, posed: PosedSurfels, *, kernel_cutoff: bool = True,
           early_stop: bool = True, threads: int = 1,
           want_cache: bool = False) -> RenderResult:
    """Tile-binned forward rasterization.

    The image accumulates over a black background; `alpha` is the per-pixel
    accumulated opacity (1 - residual transmittance). Tiles are independent,
    so the thread count changes scheduling only, never bits.
    """
    camera.validate()
    H, W = camera.height, camera.width
    image = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    info = {"skipped_early_stop": 0,
            "degenerate_surfels": int(posed.degenerate.sum()) if len(posed) else 0,
            "fragments": 0}
    caches = []
    if len(posed) == 0:
        return RenderResult(image, alpha, info, caches if want_cache else None)

    dirs, inv_norm = camera.ray_grid()
    origin = camera.origin()
    binning = cull_and_bin(camera, posed, kernel_cutoff)
    jobs = [(tx, ty) for ty in range(binning.tiles_y) for tx in range(binning.tiles_x)]

    def run(job):
        tx, ty = job
        return _tile_job(camera, posed, binning, dirs, inv_norm, origin, tx, ty,
                         kernel_cutoff, early_stop, want_cache)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    for job, res in zip(jobs, results):
        if res is None:
            continue
        tx, ty = job
        C, T, cache, skipped = res
        tx0, ty0 = tx * TILE_SIZE, ty * TILE_SIZE
        tw = min(TILE_SIZE, W - tx0)
        th = min(TILE_SIZE, H - ty0)
        image[ty0:ty0 + th, tx0:tx0 + tw] = C.reshape(th, tw, 3)
        alpha[ty0:ty0 + th, tx0:tx0 + tw] = 1.0 - T.reshape(th, tw)
        info["skipped_early_stop"] += skipped
        if cache is not None:
            info["fragments"] += cache.w.size
            caches.append(cache)
    return RenderResult(image, alpha, info, caches if want_cache else None)


def render_oracle(camera: Camera, posed: PosedSurfels, *, chunk: int = 512) -> RenderResult:
    """Exhaustive reference: every surfel against every pixel, full-precision
    sort, no culling, no kernel cutoff, no early termination."""
    camera.validate()
    H, W = camera.height, camera.width
    N = len(posed)
    image = np.zeros((H * W, 3))
    alpha = np.zeros(H * W)
    if N == 0:
        return RenderResult(image.reshape(H, W, 3), alpha.reshape(H, W), {})
    dirs, inv_norm = camera.ray_grid()
    origin = camera.origin()
    for lo in range(0, H * W, chunk):
        hi = min(lo + chunk, H * W)
        P = hi - lo
        u, v, depth, G, det, valid = eval_fragments(
            origin,
            dirs[lo:hi, None, :], inv_norm[lo:hi, None],
            posed.centers[None, :, :], posed.axis_u[None, :, :],
            posed.axis_v[None, :, :], posed.normal_raw[None, :, :],
            posed.normal_unit[None, :, :], camera.near_clip, kernel_cutoff=False)
        w = posed.alphas[None, :] * G
        order = np.argsort(depth, axis=1, kind="stable")
        T = np.ones(P)
        C = np.zeros((P, 3))
        pr = np.arange(P)
        for r in range(N):
            idx = order[:, r]
            w_r = w[pr, idx]
            contrib = T * w_r
            C += contrib[:, None] * posed.colors[idx]
            T = T * (1.0 - w_r)
        image[lo:hi] = C
        alpha[lo:hi] = 1.0 - T
    return RenderResult(image.reshape(H, W, 3), alpha.reshape(H, W), {})


# ---------------------------------------------------------------------------
# backward


@dataclass
class PosedGrads:
    centers: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    alphas: np.ndarray
    colors: np.ndarray


def render_backward(camera: Camera, posed: PosedSurfels, cache,
                    d_image: np.ndarray, d_alpha: np.ndarray,
                    threads: int = 1) -> PosedGrads:
    """Exact reverse-mode gradients of `render` w.r.t. the posed arrays.

    `cache` is the fragment record from render(want_cache=True). Per-tile
    partial gradients are reduced in fixed tile order, so results are
    bit-identical for any thread count.
    """
    if not np.all(np.isfinite(d_image)):
        raise FloatingPointError("non-finite upstream gradient: image")
    if not np.all(np.isfinite(d_alpha)):
        raise FloatingPointError("non-finite upstream gradient: alpha")
    N = len(posed)
    grads = PosedGrads(np.zeros((N, 3)), np.zeros((N, 3)), np.zeros((N, 3)),
                       np.zeros(N), np.zeros((N, 3)))
    dC_flat = np.asarray(d_image, dtype=np.float64).reshape(-1, 3)
    dA_flat = np.asarray(d_alpha, dtype=np.float64).reshape(-1)
    dirs, _ = camera.ray_grid()

    def run(tc):
        return _tile_backward(posed, tc, dC_flat, dA_flat, dirs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(run, cache))
    else:
        partials = [run(tc) for tc in cache]

    for tc, part in zip(cache, partials):
        dp, dau, dav, dal, dcol = part
        ids = tc.ids
        grads.centers[ids] += dp
        grads.axis_u[ids] += dau
        grads.axis_v[ids] += dav
        grads.alphas[ids] += dal
        grads.colors[ids] += dcol
    return grads


def _tile_backward(posed, tc: _TileCache, dC_flat, dA_flat, dirs):
    S = tc.ids.size
    dp = np.zeros((S, 3))
    dau = np.zeros((S, 3))
    dav = np.zeros((S, 3))
    dal = np.zeros(S)
    dcol = np.zeros((S, 3))

    tx, ty, tx0, ty0, tw, th = tc.tile
    slot = np.arange(tc.n_slots)
    slot_pix = (ty0 + slot // tw) * tc.width + (tx0 + slot % tw)
    gC = dC_flat[slot_pix]          # (n_slots, 3)
    gA = dA_flat[slot_pix]          # (n_slots,)
    t_final = tc.t_final
    suffix = np.zeros((tc.n_slots, 3))
    du = np.zeros(tc.w.size)
    dv = np.zeros(tc.w.size)

    maxc = tc.n_active.size
    for r in reversed(range(maxc)):
        sel = tc.order_desc[:tc.n_active[r]]
        fi = tc.starts[sel] + r
        w_r = tc.w[fi]
        m = w_r > 0.0
        if not m.any():
            continue
        sel, fi, w_r = sel[m], fi[m], w_r[m]
        tb = tc.t_before[fi]
        sidg = tc.sid_global[fi]
        c_r = posed.colors[sidg]
        gC_sel = gC[sel]
        gdotc = (gC_sel * c_r).sum(axis=1)
        gdotS = (gC_sel * suffix[sel]).sum(axis=1)
        dw = gdotc * tb - (gdotS - gA[sel] * t_final[sel]) / (1.0 - w_r)
        np.add.at(dcol, tc.sid_local[fi], gC_sel * (w_r * tb)[:, None])
        np.add.at(dal, tc.sid_local[fi], dw * tc.G[fi])
        dG = dw * posed.alphas[sidg]
        du[fi] = dG * (-tc.u[fi]) * tc.G[fi]
        dv[fi] = dG * (-tc.v[fi]) * tc.G[fi]
        suffix[sel] += c_r * (w_r * tb)[:, None]

    live = tc.w > 0.0
    if live.any():
        fi = np.nonzero(live)[0]
        sidg = tc.sid_global[fi]
        au = posed.axis_u[sidg]
        av = posed.axis_v[sidg]
        c = -dirs[tc.pix_global[fi]]
        m1 = _cross(av, c)
        m2 = _cross(c, au)
        y = (m1 * du[fi, None] + m2 * dv[fi, None]) / tc.det[fi, None]
        sidl = tc.sid_local[fi]
        np.add.at(dp, sidl, -y)
        np.add.at(dau, sidl, -tc.u[fi, None] * y)
        np.add.at(dav, sidl, -tc.v[fi, None] * y)
    return dp, dau, dav, dal, dcol
