"""Independent reference implementations used only by the tests.

Every function here recomputes a quantity with the most direct method
available (per-pixel Python loops, exhaustive enumeration, central finite
differences) and deliberately shares no code with the library path it
checks. Keep these slow and obvious.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

ALPHA_CUTOFF = 1.0 / 255.0
TRANSMITTANCE_FLOOR = 1e-4
COV_DILATION = 0.3
Z_NEAR = 0.2


def _rotation_from_quaternion(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def reference_render(gmap, pose, intrinsics):
    """Scalar front-to-back compositor: per-pixel loops, no tiling.

    Returns (rgb, depth, silhouette, feature) images with the same
    blending rules the library documents: alpha below 1/255 dropped,
    contributions after transmittance falls below 1e-4 dropped, depth
    reported as the weight-normalized mean.
    """
    h, w = intrinsics.height, intrinsics.width
    fx, fy, cx, cy = intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy
    r_c2w = pose.rotation
    t = pose.translation

    splats = []
    for k in range(len(gmap)):
        cam = r_c2w.T @ (gmap.positions[k] - t)
        x, y, z = cam
        if z <= Z_NEAR:
            continue
        rq = _rotation_from_quaternion(gmap.quaternions[k])
        cov_w = rq @ np.diag(gmap.scales[k] ** 2) @ rq.T
        cov_c = r_c2w.T @ cov_w @ r_c2w
        jac = np.array([[fx / z, 0.0, -fx * x / z ** 2],
                        [0.0, fy / z, -fy * y / z ** 2]])
        cov2 = jac @ cov_c @ jac.T + COV_DILATION * np.eye(2)
        inv = np.linalg.inv(cov2)
        u = fx * x / z + cx
        v = fy * y / z + cy
        splats.append((z, k, u, v, inv, float(gmap.opacities[k])))

    d_id = gmap.d_id
    rgb = np.zeros((h, w, 3))
    feature = np.zeros((h, w, d_id))
    silhouette = np.zeros((h, w))
    depth = np.zeros((h, w))
    for vp in range(h):
        for up in range(w):
            hits = []
            for z, k, u, v, inv, op in splats:
                d = np.array([up - u, vp - v])
                power = -0.5 * float(d @ inv @ d)
                alpha = op * math.exp(min(power, 0.0))
                if alpha < ALPHA_CUTOFF:
                    continue
                hits.append((z, k, alpha))
            hits.sort()
            trans = 1.0
            dsum = 0.0
            for z, k, alpha in hits:
                if trans < TRANSMITTANCE_FLOOR:
                    break
                wk = alpha * trans
                rgb[vp, up] += wk * gmap.colors[k]
                feature[vp, up] += wk * gmap.features[k]
                silhouette[vp, up] += wk
                dsum += wk * z
                trans *= 1.0 - alpha
            if silhouette[vp, up] > 1e-12:
                depth[vp, up] = dsum / silhouette[vp, up]
    return rgb, depth, silhouette, feature


def finite_difference_feature_grad(render_fn, gmap, grad_output, eps=1e-4):
    """Central differences of sum(feature_image * grad_output) in each
    feature coordinate. `render_fn(gmap)` must return the feature image."""
    base = gmap.features.copy()
    grad = np.zeros_like(base)
    for k in range(base.shape[0]):
        for d in range(base.shape[1]):
            gmap.features = base.copy()
            gmap.features[k, d] += eps
            hi = float(np.sum(render_fn(gmap) * grad_output))
            gmap.features = base.copy()
            gmap.features[k, d] -= eps
            lo = float(np.sum(render_fn(gmap) * grad_output))
            grad[k, d] = (hi - lo) / (2 * eps)
    gmap.features = base
    return grad


def best_assignment(score: np.ndarray, maximize: bool = True):
    """Exhaustive one-to-one assignment over a small score matrix.

    Returns (pairs, total) where pairs is a list of (row, col). Every row
    of the smaller side is assigned; use only for tiny matrices.
    """
    score = np.asarray(score, dtype=float)
    rows, cols = score.shape
    transposed = rows > cols
    if transposed:
        score = score.T
        rows, cols = cols, rows
    best_total = -np.inf if maximize else np.inf
    best_pairs: list[tuple[int, int]] = []
    for perm in itertools.permutations(range(cols), rows):
        total = sum(score[r, c] for r, c in enumerate(perm))
        if (maximize and total > best_total) or \
           (not maximize and total < best_total):
            best_total = total
            best_pairs = list(enumerate(perm))
    if transposed:
        best_pairs = [(c, r) for r, c in best_pairs]
    return best_pairs, float(best_total)


def brute_force_association_quality(pred_maps, gt_maps):
    """Association quality over whole-video tracks, by raw dict counting.

    For every ground-truth track g:
        aq(g) = (1/|g|) * sum over pred tracks p with |p & g| > 0 of
                |p & g| * (|p & g| / |p | g|)
    and the result is the mean of aq(g) over ground-truth tracks.
    """
    gt_pixels: dict[int, set] = {}
    pred_pixels: dict[int, set] = {}
    for t, (pm, gm) in enumerate(zip(pred_maps, gt_maps)):
        for vp in range(gm.shape[0]):
            for up in range(gm.shape[1]):
                g = int(gm[vp, up])
                p = int(pm[vp, up])
                if g > 0:
                    gt_pixels.setdefault(g, set()).add((t, vp, up))
                if p > 0:
                    pred_pixels.setdefault(p, set()).add((t, vp, up))
    if not gt_pixels:
        return 0.0
    total = 0.0
    for g, gpix in gt_pixels.items():
        inner = 0.0
        for p, ppix in pred_pixels.items():
            tpa = len(gpix & ppix)
            if tpa == 0:
                continue
            iou = tpa / len(gpix | ppix)
            inner += tpa * iou
        total += inner / len(gpix)
    return total / len(gt_pixels)


def ray_cast_pixel(objects, room, eye, direction):
    """Scalar ray cast: nearest positive hit among objects, else the room
    exit, else no hit. `direction` need not be unit length; the returned
    t is in units of it. Objects are dicts with kind/center/... fields."""
    best_t = math.inf
    best_id = 0
    for obj in objects:
        if obj["kind"] == "sphere":
            oc = np.asarray(eye) - np.asarray(obj["center"])
            a = float(np.dot(direction, direction))
            b = 2.0 * float(np.dot(oc, direction))
            c = float(np.dot(oc, oc)) - obj["radius"] ** 2
            disc = b * b - 4 * a * c
            if disc < 0:
                continue
            sq = math.sqrt(disc)
            for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
                if 1e-9 < t < best_t:
                    best_t = t
                    best_id = obj["object_id"]
                    break
        else:  # axis-aligned box
            lo = np.asarray(obj["center"]) - np.asarray(obj["half_extents"])
            hi = np.asarray(obj["center"]) + np.asarray(obj["half_extents"])
            tmin, tmax = -math.inf, math.inf
            ok = True
            for ax in range(3):
                d = direction[ax]
                if abs(d) < 1e-15:
                    if not (lo[ax] <= eye[ax] <= hi[ax]):
                        ok = False
                        break
                    continue
                t1 = (lo[ax] - eye[ax]) / d
                t2 = (hi[ax] - eye[ax]) / d
                tmin = max(tmin, min(t1, t2))
                tmax = min(tmax, max(t1, t2))
            if not ok or tmax < tmin:
                continue
            t = tmin if tmin > 1e-9 else tmax
            if 1e-9 < t < best_t:
                best_t = t
                best_id = obj["object_id"]
    if room is not None:
        lo = np.asarray(room["center"]) - np.asarray(room["half_extents"])
        hi = np.asarray(room["center"]) + np.asarray(room["half_extents"])
        tmax = math.inf
        for ax in range(3):
            d = direction[ax]
            if abs(d) < 1e-15:
                continue
            t1 = (lo[ax] - eye[ax]) / d
            t2 = (hi[ax] - eye[ax]) / d
            tmax = min(tmax, max(t1, t2))
        if 1e-9 < tmax < best_t:
            best_t = tmax
            best_id = 0
    if math.isinf(best_t):
        return 0.0, 0
    return best_t, best_id
