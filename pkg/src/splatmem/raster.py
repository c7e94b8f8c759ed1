"""Tile-based forward splatting and the feature-gradient backward pass.

Forward model, per Gaussian k with world mean mu, orientation q, scale s,
opacity sigma, color c, and identity feature f:

- world covariance   Sigma = R(q) diag(s^2) R(q)^T
- camera frame       x_cam = R_wc (mu - t_wc),   R_wc = pose.R^T
- projected mean     (fx x/z + cx, fy y/z + cy)
- projected 2x2 cov  Sigma' = J R_wc Sigma R_wc^T J^T + dilation I, with
  J the Jacobian of the pinhole projection at x_cam; the small isotropic
  dilation keeps splats at least pixel-sized so sampling cannot alias
  them away entirely.
- pixel opacity      alpha = sigma * exp(-0.5 d^T Sigma'^-1 d), d the
  offset from the projected mean to the pixel center.

Pixels composite front to back in camera depth order, ties broken by the
Gaussian's storage index so the order is total and reproducible:

    w_k = alpha_k * prod_{j<k} (1 - alpha_j)

rgb and identity features are plain w-weighted sums, the silhouette is
sum(w), and rendered depth is the w-weighted mean depth (the sum divided
by the silhouette), which makes it directly comparable against observed
depth maps. Contributions with alpha below 1/255 are dropped, and once
accumulated transmittance falls below 1e-4 later Gaussians are dropped
for that pixel; both bounds also bound the stored blend lists.

The rendered feature image is linear in the per-Gaussian features with
coefficients w, so the backward pass for features is exact: the render
retains the sparse (pixel, gaussian, weight) triplets, and the gradient
of any pixel loss pulls back through the transposed weight matrix. The
same triplets re-render features cheaply while geometry is frozen.

Work is grouped into 16x16 pixel tiles. Each Gaussian is binned into the
tiles its cutoff radius can touch, every (tile, Gaussian) pair is sorted
once by (tile, depth, index), and each tile composites its own list over
its own pixel block with dense array math.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .codebook import Codebook, decode
from .errors import DataError, NumericalError
from .scene import CameraIntrinsics, Pose, SegmentFrame
from .splat_map import GaussianMap

TILE = 16
ALPHA_CUTOFF = 1.0 / 255.0
TRANSMITTANCE_FLOOR = 1e-4
COV_DILATION = 0.3
# The affine projection linearizes badly as z -> 0: a Gaussian lying almost
# in the camera plane gets a footprint wide enough to smear across the whole
# image. The conventional 0.2 m near plane culls those.
Z_NEAR = 0.2
SILHOUETTE_EPS = 1e-12


@dataclass
class BlendRecords:
    """Sparse per-pixel blend weights retained by a forward render."""

    pixel_indices: np.ndarray     # (nnz,) linear pixel index, row-major
    gaussian_indices: np.ndarray  # (nnz,)
    weights: np.ndarray           # (nnz,)
    num_pixels: int
    num_gaussians: int

    def __post_init__(self) -> None:
        self._pix_by_gauss = None
        self._gauss_by_pix = None

    def _matrix_pix_by_gauss(self) -> sparse.csr_matrix:
        if self._pix_by_gauss is None:
            self._pix_by_gauss = sparse.csr_matrix(
                (self.weights, (self.pixel_indices, self.gaussian_indices)),
                shape=(self.num_pixels, self.num_gaussians))
        return self._pix_by_gauss

    def _matrix_gauss_by_pix(self) -> sparse.csr_matrix:
        if self._gauss_by_pix is None:
            self._gauss_by_pix = sparse.csr_matrix(
                (self.weights, (self.gaussian_indices, self.pixel_indices)),
                shape=(self.num_gaussians, self.num_pixels))
        return self._gauss_by_pix

    def feature_render(self, features: np.ndarray,
                       shape: tuple[int, int]) -> np.ndarray:
        """Re-render a feature image from frozen weights: W @ features."""
        if features.shape[0] != self.num_gaussians:
            raise DataError("feature array does not match the recorded map")
        out = self._matrix_pix_by_gauss() @ features
        return out.reshape(shape + (features.shape[1],))

    def feature_gradient(self, grad_output: np.ndarray) -> np.ndarray:
        """Pull a per-pixel gradient back to per-Gaussian features: W^T g."""
        flat = grad_output.reshape(self.num_pixels, -1)
        return self._matrix_gauss_by_pix() @ flat


@dataclass
class RenderOutput:
    rgb: np.ndarray         # (H, W, 3)
    depth: np.ndarray       # (H, W), w-weighted mean, 0 where nothing hit
    silhouette: np.ndarray  # (H, W), sum of blend weights
    feature: np.ndarray     # (H, W, D)
    records: BlendRecords | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


def quaternion_rotations(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for an (n, 4) array of (w, x, y, z) quaternions."""
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norms <= 0):
        raise DataError("zero-norm quaternion")
    w, x, y, z = (q / norms).T
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def project_points(points: np.ndarray, pose: Pose,
                   intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """World points to pixel coordinates and camera depth."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = (pts - pose.translation) @ pose.rotation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    return np.stack([u, v], axis=1), z


def _check_finite(gmap: GaussianMap) -> None:
    for name, arr in [("position", gmap.positions),
                      ("quaternion", gmap.quaternions),
                      ("scale", gmap.scales),
                      ("opacity", gmap.opacities),
                      ("color", gmap.colors),
                      ("feature", gmap.features)]:
        bad = ~np.isfinite(arr.reshape(len(gmap), -1)).all(axis=1)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise NumericalError(f"non-finite {name} at Gaussian {idx}")


def _project_gaussians(gmap: GaussianMap, pose: Pose,
                       intrinsics: CameraIntrinsics):
    """Project all Gaussians; returns screen means, depths, conics, radii.

    The returned radius is the distance beyond which alpha must fall below
    the 1/255 cutoff, so binning by it cannot lose any contribution.
    """
    r_wc = pose.rotation.T
    cam = (gmap.positions - pose.translation) @ pose.rotation
    z = cam[:, 2]
    keep = z > Z_NEAR

    fx, fy = intrinsics.fx, intrinsics.fy
    mean2d = np.full((len(gmap), 2), np.nan)
    mean2d[keep, 0] = fx * cam[keep, 0] / z[keep] + intrinsics.cx
    mean2d[keep, 1] = fy * cam[keep, 1] / z[keep] + intrinsics.cy

    rot = quaternion_rotations(gmap.quaternions)
    scaled = rot * gmap.scales[:, None, :]          # R diag(s)
    cov_world = scaled @ scaled.transpose(0, 2, 1)  # R diag(s^2) R^T
    cov_cam = r_wc @ cov_world @ r_wc.T

    zk = z[keep]
    xk, yk = cam[keep, 0], cam[keep, 1]
    jac = np.zeros((keep.sum(), 2, 3))
    jac[:, 0, 0] = fx / zk
    jac[:, 0, 2] = -fx * xk / zk**2
    jac[:, 1, 1] = fy / zk
    jac[:, 1, 2] = -fy * yk / zk**2
    cov2 = jac @ cov_cam[keep] @ jac.transpose(0, 2, 1)
    cov2[:, 0, 0] += COV_DILATION
    cov2[:, 1, 1] += COV_DILATION

    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    det = a * c - b * b
    ok = det > 0
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    conic = np.zeros((len(gmap), 3))
    conic_k = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)
    conic[keep] = conic_k

    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    op = gmap.opacities[keep]
    log_ratio = np.log(np.maximum(op, 1e-300) / ALPHA_CUTOFF)
    radius_k = np.sqrt(np.maximum(2.0 * lam_max * log_ratio, 0.0))
    radius = np.zeros(len(gmap))
    radius[keep] = np.where(ok & (op > ALPHA_CUTOFF), radius_k, 0.0)

    visible = keep.copy()
    visible[keep] &= ok & (op > ALPHA_CUTOFF)
    return mean2d, z, conic, radius, visible


_CHUNK = 128  # compositing block; once transmittance dies the rest is skipped


def render(gmap: GaussianMap, pose: Pose, intrinsics: CameraIntrinsics,
           retain_records: bool = False, with_rgb: bool = True) -> RenderOutput:
    """Splat the map into rgb, depth, silhouette, and feature images.

    `with_rgb=False` skips the color accumulation (the images stay zero);
    the identity pipeline uses it since only features, depth, and
    silhouette feed the downstream stages.
    """
    h, w = intrinsics.height, intrinsics.width
    d_id = gmap.d_id
    out = RenderOutput(rgb=np.zeros((h, w, 3)),
                       depth=np.zeros((h, w)),
                       silhouette=np.zeros((h, w)),
                       feature=np.zeros((h, w, d_id)))
    if retain_records:
        out.records = BlendRecords(np.empty(0, np.int64), np.empty(0, np.int64),
                                   np.empty(0, np.float64), h * w, len(gmap))
    if len(gmap) == 0:
        return out
    _check_finite(gmap)

    mean2d, z, conic, radius, visible = _project_gaussians(gmap, pose, intrinsics)

    lo = np.floor(mean2d - radius[:, None])
    hi = np.ceil(mean2d + radius[:, None])
    visible &= ((hi[:, 0] >= 0) & (lo[:, 0] <= w - 1) &
                (hi[:, 1] >= 0) & (lo[:, 1] <= h - 1))
    idx = np.flatnonzero(visible)
    if idx.size == 0:
        return out

    ntx = (w + TILE - 1) // TILE
    nty = (h + TILE - 1) // TILE
    tx0 = np.clip(np.floor(lo[idx, 0] / TILE), 0, ntx - 1).astype(np.int64)
    tx1 = np.clip(np.floor(hi[idx, 0] / TILE), 0, ntx - 1).astype(np.int64)
    ty0 = np.clip(np.floor(lo[idx, 1] / TILE), 0, nty - 1).astype(np.int64)
    ty1 = np.clip(np.floor(hi[idx, 1] / TILE), 0, nty - 1).astype(np.int64)

    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    pair_g = np.repeat(idx, counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    off = np.arange(int(counts.sum()), dtype=np.int64) - np.repeat(starts, counts)
    rep_nx = np.repeat(nx, counts)
    pair_tx = np.repeat(tx0, counts) + off % rep_nx
    pair_ty = np.repeat(ty0, counts) + off // rep_nx
    pair_tile = pair_ty * ntx + pair_tx

    order = np.lexsort((pair_g, z[pair_g], pair_tile))
    pair_g = pair_g[order]
    pair_tile = pair_tile[order]

    bounds = np.flatnonzero(np.diff(pair_tile)) + 1
    tile_starts = np.concatenate([[0], bounds])
    tile_ends = np.concatenate([bounds, [pair_tile.size]])

    rec_pix: list[np.ndarray] = []
    rec_gauss: list[np.ndarray] = []
    rec_w: list[np.ndarray] = []
    log_cutoff = np.log(ALPHA_CUTOFF)
    depth_sum = np.zeros((h, w))

    for s, e in zip(tile_starts, tile_ends):
        tile = int(pair_tile[s])
        ty, tx = divmod(tile, ntx)
        x0, y0 = tx * TILE, ty * TILE
        tw = min(TILE, w - x0)
        th = min(TILE, h - y0)
        npix = th * tw
        xs = np.arange(x0, x0 + tw, dtype=np.float64)
        ys = np.arange(y0, y0 + th, dtype=np.float64)

        sil = np.zeros(npix)
        dep = np.zeros(npix)
        rgb_acc = np.zeros((npix, 3)) if with_rgb else None
        feat_acc = np.zeros((npix, d_id))
        t_run = np.ones(npix)

        for cs in range(s, e, _CHUNK):
            gs = pair_g[cs:min(cs + _CHUNK, e)]
            dx = xs[None, :] - mean2d[gs, 0][:, None]       # (g, tw)
            dy = ys[None, :] - mean2d[gs, 1][:, None]       # (g, th)
            qx = (0.5 * conic[gs, 0])[:, None] * dx * dx
            qy = (0.5 * conic[gs, 2])[:, None] * dy * dy
            bx = conic[gs, 1][:, None] * dx
            power = qx[:, None, :] + qy[:, :, None] + bx[:, None, :] * dy[:, :, None]
            power = power.reshape(gs.size, npix)
            np.negative(power, out=power)

            alpha = np.zeros_like(power)
            live = power >= log_cutoff
            if live.any():
                np.exp(np.minimum(power, 0.0), where=live, out=alpha)
                alpha *= gmap.opacities[gs][:, None]
                alpha[alpha < ALPHA_CUTOFF] = 0.0

            trans = np.cumprod(1.0 - alpha, axis=0)
            trans *= t_run
            tprev = np.vstack([t_run, trans[:-1]])
            wgt = alpha * tprev
            wgt[tprev < TRANSMITTANCE_FLOOR] = 0.0

            sil += wgt.sum(axis=0)
            dep += wgt.T @ z[gs]
            if with_rgb:
                rgb_acc += wgt.T @ gmap.colors[gs]
            feat_acc += wgt.T @ gmap.features[gs]

            if retain_records:
                rows, cols = np.nonzero(wgt)
                if rows.size:
                    py, px = divmod(cols, tw)
                    rec_pix.append((y0 + py) * w + (x0 + px))
                    rec_gauss.append(gs[rows])
                    rec_w.append(wgt[rows, cols])

            t_run = trans[-1]
            if t_run.max() < TRANSMITTANCE_FLOOR:
                break

        block = (slice(y0, y0 + th), slice(x0, x0 + tw))
        out.silhouette[block] = sil.reshape(th, tw)
        if with_rgb:
            out.rgb[block] = rgb_acc.reshape(th, tw, 3)
        out.feature[block] = feat_acc.reshape(th, tw, d_id)
        depth_sum[block] = dep.reshape(th, tw)

    covered = out.silhouette > SILHOUETTE_EPS
    out.depth[covered] = depth_sum[covered] / out.silhouette[covered]

    if retain_records:
        if rec_pix:
            out.records = BlendRecords(
                pixel_indices=np.concatenate(rec_pix),
                gaussian_indices=np.concatenate(rec_gauss),
                weights=np.concatenate(rec_w),
                num_pixels=h * w, num_gaussians=len(gmap))
        # else: keep the empty records created above
    return out


def backward_features(output: RenderOutput, grad_output: np.ndarray) -> np.ndarray:
    """Gradient of sum(feature_image * grad_output) w.r.t. map features.

    The rendered feature image is linear in the per-Gaussian features, so
    the gradient for Gaussian g is the weight-sum of grad_output over the
    pixels g contributed to. Requires a render with retain_records=True.
    """
    if output.records is None:
        raise DataError("backward_features needs a render with retained records")
    h, w = output.shape
    grad = np.asarray(grad_output, dtype=np.float64)
    if grad.shape[:2] != (h, w):
        raise DataError(f"grad_output shape {grad.shape} does not match "
                        f"render {h}x{w}")
    return output.records.feature_gradient(grad)


def render_id_map(output: RenderOutput, book: Codebook,
                  threshold: float = 0.5, frame_index: int = 1) -> SegmentFrame:
    """Decode the rendered feature image into a segment id map."""
    return decode(output.feature, book, threshold=threshold,
                  frame_index=frame_index)
