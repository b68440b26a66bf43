"""Rotation, projection, silhouette and alignment utilities.

Everything here is a pure function over numpy arrays. Masks are plain
``(height, width)`` boolean arrays; the rasterizer is a numba kernel because
the rigid fitter calls it a few hundred times per frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.spatial import cKDTree

TWO_PI = 2.0 * np.pi


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise GeometryError("raster size must be at least 1x1")

    def scaled(self, downscale: int) -> "CameraIntrinsics":
        """Intrinsics for a raster ``downscale`` times smaller in each axis."""
        if downscale < 1:
            raise GeometryError("downscale must be a positive integer")
        if downscale == 1:
            return self
        w, h = self.width // downscale, self.height // downscale
        if w < 1 or h < 1:
            raise GeometryError("zero-size raster")
        return CameraIntrinsics(self.fx / downscale, self.fy / downscale,
                                self.cx / downscale, self.cy / downscale, w, h)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


# ---------------------------------------------------------------------------
# SO(3)

def skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def aa_to_matrix(aa) -> np.ndarray:
    """Rodrigues formula. Accepts any magnitude, not only the canonical range."""
    aa = np.asarray(aa, dtype=float)
    if aa.shape != (3,):
        raise GeometryError(f"axis-angle must have shape (3,), got {aa.shape}")
    if not np.all(np.isfinite(aa)):
        raise GeometryError("non-finite axis-angle")
    theta = float(np.sqrt(aa @ aa))
    if theta < 1e-12:
        return np.eye(3) + skew(aa)
    k = skew(aa / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def batch_aa_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Vectorized Rodrigues for an ``(n, 3)`` array."""
    aa = np.asarray(aa, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(aa, axis=1)
    small = theta < 1e-12
    safe = np.where(small, 1.0, theta)
    axis = aa / safe[:, None]
    k = np.zeros((len(aa), 3, 3))
    k[:, 0, 1], k[:, 0, 2] = -axis[:, 2], axis[:, 1]
    k[:, 1, 0], k[:, 1, 2] = axis[:, 2], -axis[:, 0]
    k[:, 2, 0], k[:, 2, 1] = -axis[:, 1], axis[:, 0]
    s = np.where(small, 0.0, np.sin(theta))[:, None, None]
    c = np.where(small, 0.0, 1.0 - np.cos(theta))[:, None, None]
    out = np.eye(3)[None] + s * k + c * (k @ k)
    if small.any():
        out[small] = np.array([np.eye(3) + skew(v) for v in aa[small]])
    return out


def _canonical_pi_axis(axis: np.ndarray) -> np.ndarray:
    # first nonzero component nonnegative
    for c in axis:
        if abs(c) > 1e-12:
            return axis if c > 0 else -axis
    return axis


def matrix_to_aa(R, tol: float = 1e-6) -> np.ndarray:
    """Inverse Rodrigues; the returned magnitude lies in ``[0, pi]``."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise GeometryError("expected a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise GeometryError("matrix is not a proper rotation")
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_t = 0.5 * np.linalg.norm(w)
    theta = np.arctan2(sin_t, cos_t)
    if theta < 1e-7:
        # first-order inverse is accurate to O(theta^3)
        return 0.5 * w
    if np.pi - theta > 1e-4:
        return theta / (2.0 * sin_t) * w
    # near pi: axis from the symmetric part, sign from the skew part
    B = (R + R.T) / 2.0 - cos_t * np.eye(3)
    i = int(np.argmax(np.diag(B)))
    axis = B[i] / np.sqrt(max(B[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    if sin_t > 1e-12 and axis @ w < 0:
        axis = -axis
    if sin_t <= 1e-12:
        axis = _canonical_pi_axis(axis)
    return theta * axis


def aa_nearest(aa, ref) -> np.ndarray:
    """Representative of the rotation ``aa`` whose vector is closest to ``ref``.

    The axis-angle vectors ``(phi + 2*pi*n) * u`` all encode the same rotation;
    picking the one nearest the previous value keeps trajectories continuous
    when the rotation angle crosses pi.
    """
    aa = np.asarray(aa, dtype=float)
    ref = np.asarray(ref, dtype=float)
    phi = float(np.linalg.norm(aa))
    if phi < 1e-12:
        rn = float(np.linalg.norm(ref))
        if rn < np.pi:
            return aa.copy()
        return (TWO_PI * np.round(rn / TWO_PI)) * (ref / rn)
    u = aa / phi
    n = np.round((u @ ref - phi) / TWO_PI)
    if n == 0:
        return aa.copy()
    return (phi + TWO_PI * n) * u


def canonical_aa(aa) -> np.ndarray:
    """Same rotation with magnitude folded into ``[0, pi]``."""
    return matrix_to_aa(aa_to_matrix(aa))


def geodesic_distance(a, b) -> float:
    """Angle of ``R_a^T R_b`` in radians."""
    R = aa_to_matrix(a).T @ aa_to_matrix(b)
    # arctan2 keeps small angles accurate where arccos of the trace does not
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(w), (np.trace(R) - 1.0) / 2.0))


def so3_geodesic_blend(a, b, w: float) -> np.ndarray:
    """Point a fraction ``w`` of the way along the geodesic from ``a`` to ``b``.

    The result is expressed in the axis-angle branch nearest ``a`` so that
    unwrapped (magnitude > pi) trajectories stay continuous. An exact
    half-turn between the endpoints takes the log branch whose first nonzero
    component is nonnegative.
    """
    if not 0.0 <= w <= 1.0:
        raise GeometryError("blend weight must lie in [0, 1]")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if w == 0.0:
        return a.copy()
    Ra = aa_to_matrix(a)
    delta = matrix_to_aa(Ra.T @ aa_to_matrix(b))
    if w == 1.0:
        out = matrix_to_aa(aa_to_matrix(b))
    else:
        out = matrix_to_aa(Ra @ aa_to_matrix(w * delta))
    return aa_nearest(out, a)


# ---------------------------------------------------------------------------
# projection and rasterization

def project_points(points, K: CameraIntrinsics) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    z = pts[:, 2]
    if np.any(z <= 1e-6):
        raise GeometryError("point at or behind the camera plane")
    return np.stack([K.fx * pts[:, 0] / z + K.cx, K.fy * pts[:, 1] / z + K.cy], axis=1)


@numba.njit(cache=True)
def _raster_kernel(uv, ok, faces, width, height, out):
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        if not (ok[i0] and ok[i1] and ok[i2]):
            continue
        x0, y0 = uv[i0, 0], uv[i0, 1]
        x1, y1 = uv[i1, 0], uv[i1, 1]
        x2, y2 = uv[i2, 0], uv[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        if area < 0.0:
            x1, y1, x2, y2 = x2, y2, x1, y1
        # pixel (i, j) has its center at (i + 0.5, j + 0.5)
        xmin = max(int(np.floor(min(x0, min(x1, x2)) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, max(x1, x2)) - 0.5)), width - 1)
        ymin = max(int(np.floor(min(y0, min(y1, y2)) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, max(y1, y2)) - 0.5)), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        # edge a->b includes ties when it is a top or left edge
        e0x, e0y = x1 - x0, y1 - y0
        e1x, e1y = x2 - x1, y2 - y1
        e2x, e2y = x0 - x2, y0 - y2
        tl0 = e0y < 0.0 or (e0y == 0.0 and e0x > 0.0)
        tl1 = e1y < 0.0 or (e1y == 0.0 and e1x > 0.0)
        tl2 = e2y < 0.0 or (e2y == 0.0 and e2x > 0.0)
        for j in range(ymin, ymax + 1):
            py = j + 0.5
            for i in range(xmin, xmax + 1):
                if out[j, i]:
                    continue
                px = i + 0.5
                w0 = e0x * (py - y0) - e0y * (px - x0)
                if w0 < 0.0 or (w0 == 0.0 and not tl0):
                    continue
                w1 = e1x * (py - y1) - e1y * (px - x1)
                if w1 < 0.0 or (w1 == 0.0 and not tl1):
                    continue
                w2 = e2x * (py - y2) - e2y * (px - x2)
                if w2 < 0.0 or (w2 == 0.0 and not tl2):
                    continue
                out[j, i] = True


def rasterize_silhouette(mesh, faces, K: CameraIntrinsics, downscale: int = 1) -> np.ndarray:
    """Binary silhouette of a camera-frame mesh, shape ``(height, width)``.

    Faces touching a vertex at or behind the camera plane are skipped.
    """
    Ks = K.scaled(downscale)
    out = np.zeros((Ks.height, Ks.width), dtype=np.bool_)
    verts = np.asarray(mesh, dtype=np.float64).reshape(-1, 3)
    faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(verts) == 0 or len(faces) == 0:
        return out
    z = verts[:, 2]
    ok = z > 1e-6
    zs = np.where(ok, z, 1.0)
    uv = np.empty((len(verts), 2))
    uv[:, 0] = Ks.fx * verts[:, 0] / zs + Ks.cx
    uv[:, 1] = Ks.fy * verts[:, 1] / zs + Ks.cy
    _raster_kernel(uv, ok, faces, Ks.width, Ks.height, out)
    return out


def downsample_mask(mask: np.ndarray, downscale: int) -> np.ndarray:
    """Reduce a mask to the raster of ``CameraIntrinsics.scaled(downscale)``.

    Samples where the low-resolution rasterizer samples, at each block centre,
    so a downsampled target and a mesh rendered at ``downscale`` agree in size.
    For even factors the centre is a pixel corner: the four pixels around it
    vote and ties alternate on a checkerboard. A fixed tie rule would move
    every edge half a pixel outward (or inward), which a silhouette fit
    absorbs as a depth error.
    """
    if downscale == 1:
        return np.asarray(mask, dtype=bool)
    h, w = mask.shape[0] // downscale, mask.shape[1] // downscale
    if h < 1 or w < 1:
        raise GeometryError("zero-size raster")
    m = np.asarray(mask[: h * downscale, : w * downscale], dtype=bool)
    c = downscale // 2
    if downscale % 2:
        return m[c::downscale, c::downscale].copy()
    votes = (m[c - 1::downscale, c - 1::downscale].astype(np.int8)
             + m[c - 1::downscale, c::downscale] + m[c::downscale, c - 1::downscale]
             + m[c::downscale, c::downscale])
    checker = (np.add.outer(np.arange(h), np.arange(w)) % 2) == 0
    return (votes > 2) | ((votes == 2) & checker)


# ---------------------------------------------------------------------------
# overlap scores

def _check_pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise GeometryError(f"mask dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    a, b = _check_pair(a, b)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (sa + sb)


def iou(a, b) -> float:
    a, b = _check_pair(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


# ---------------------------------------------------------------------------
# alignment

def procrustes_align(source, target):
    """Similarity ``(s, R, t)`` minimizing ``||s R source + t - target||_F``.

    Returns ``(scale, rotation, translation, residual)`` with ``det(R) = +1``.
    """
    X = np.asarray(source, dtype=float)
    Y = np.asarray(target, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise GeometryError("source and target must both be (N, 3)")
    if len(X) < 3:
        raise GeometryError("need at least 3 points")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
        raise GeometryError("rank-deficient covariance: points are collinear")
    U, S, Vt = np.linalg.svd(Yc.T @ Xc)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    scale = float((S * np.diag(D)).sum() / (Xc ** 2).sum())
    t = my - scale * R @ mx
    residual = float(np.linalg.norm(scale * X @ R.T + t - Y))
    return scale, R, t, residual


def _mutual_pairs(a: np.ndarray, b: np.ndarray, tree_b=None):
    tree_a = cKDTree(a)
    tree_b = cKDTree(b) if tree_b is None else tree_b
    _, ab = tree_b.query(a)
    _, ba = tree_a.query(b)
    ia = np.nonzero(ba[ab] == np.arange(len(a)))[0]
    return ia, ab[ia]


def nn_vertex_error(pred, gt, icp_rounds: int = 10) -> float:
    """Mean distance from each gt vertex to its nearest aligned pred vertex.

    Equal vertex counts are treated as a shared topology and aligned by index.
    Otherwise both clouds are normalized by centroid and RMS radius, mutual
    nearest neighbours give an initial correspondence, and a few rounds of
    re-pairing refine the similarity before the final nearest-neighbour pass.
    """
    P = np.asarray(pred, dtype=float).reshape(-1, 3)
    G = np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(P) == 0 or len(G) == 0:
        raise GeometryError("empty point cloud")
    tree_g = cKDTree(G)
    if len(P) == len(G):
        s, R, t, _ = procrustes_align(P, G)
    else:
        cp, cg = P.mean(axis=0), G.mean(axis=0)
        rp = np.sqrt(((P - cp) ** 2).sum(axis=1).mean())
        rg = np.sqrt(((G - cg) ** 2).sum(axis=1).mean())
        s, R, t = rg / rp, np.eye(3), cg - (rg / rp) * cp
        prev = None
        for _ in range(icp_rounds):
            ip, ig = _mutual_pairs(s * P @ R.T + t, G, tree_g)
            if len(ip) < 3:
                break
            key = (ip.tobytes(), ig.tobytes())
            if key == prev:
                break
            prev = key
            s, R, t, _ = procrustes_align(P[ip], G[ig])
    aligned = s * P @ R.T + t
    d, _ = cKDTree(aligned).query(G)
    return float(d.mean())
