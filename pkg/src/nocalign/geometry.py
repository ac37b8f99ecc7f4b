"""Camera models, 9-DoF poses, similarity fitting, and robust estimation.

The pose convention everywhere: a canonical-coordinate point x in [0, 1]^3
maps to camera space as ``R @ diag(s) @ (x - (0.5, 0.5, 0.5)) + t``.  The
cube-center offset keeps rotation and scale acting about the model's
center rather than its corner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CUBE_CENTER = np.array([0.5, 0.5, 0.5])

_ORTHO_TOL = 1e-6


class InvalidDepthError(ValueError):
    """Non-positive depth handed to the backprojection."""


class DegenerateConfigurationError(ValueError):
    """Point set too flat or too small to pin down a similarity."""


class AxisDegenerateError(DegenerateConfigurationError):
    """Zero source variance along one axis; that axis scale is unobservable."""

    def __init__(self, axis: int):
        self.axis = axis
        super().__init__(f"zero source variance along axis {axis}; per-axis scale unobservable")


class NoConsensusError(ValueError):
    """Robust fit ended with fewer than four inliers."""


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics; (u, v) are continuous pixel coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @classmethod
    def from_matrix(cls, k: np.ndarray, width: int, height: int) -> "CameraIntrinsics":
        k = np.asarray(k, dtype=np.float64)
        if k.shape != (3, 3):
            raise ValueError(f"intrinsics matrix must be 3x3, got {k.shape}")
        return cls(fx=float(k[0, 0]), fy=float(k[1, 1]), cx=float(k[0, 2]), cy=float(k[1, 2]),
                   width=width, height=height)

    @classmethod
    def from_fov(cls, vfov_deg: float, width: int, height: int) -> "CameraIntrinsics":
        f = (height / 2.0) / np.tan(np.deg2rad(vfov_deg) / 2.0)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


@dataclass
class CameraExtrinsics:
    """World-to-camera rigid transform: x_cam = R @ x_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(self.rotation)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation


def _check_rotation(r: np.ndarray, tol: float = _ORTHO_TOL):
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=tol):
        raise ValueError("rotation is not orthonormal")
    if not np.isclose(np.linalg.det(r), 1.0, atol=tol):
        raise ValueError(f"rotation determinant {np.linalg.det(r):.9f} != +1")


@dataclass
class Pose9:
    """Rotation, translation (meters), and per-axis scale."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        _check_rotation(self.rotation)
        if not np.all(self.scale > 0):
            raise ValueError(f"scales must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "Pose9":
        return cls(np.eye(3), np.zeros(3), np.ones(3))

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose9":
        return cls(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                   np.asarray(d["translation"], dtype=np.float64),
                   np.asarray(d["scale"], dtype=np.float64))


@dataclass
class CorrespondenceSet:
    """Canonical-coordinate sources paired with camera-space targets."""

    source: np.ndarray
    target: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float64).reshape(-1, 3)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1, 3)
        if len(self.source) != len(self.target):
            raise ValueError(f"{len(self.source)} sources vs {len(self.target)} targets")
        if self.weights is None:
            self.weights = np.ones(len(self.source))
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if len(self.weights) != len(self.source):
                raise ValueError("weight count mismatch")
            if np.any(self.weights < 0):
                raise ValueError("weights must be non-negative")

    def __len__(self) -> int:
        return len(self.source)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.source[idx], self.target[idx], self.weights[idx])


def backproject(u, v, depth, cam: CameraIntrinsics) -> np.ndarray:
    """Lift pixel coordinates with depth (meters) into camera space.

    Accepts scalars or equally-shaped arrays; output has a trailing axis of
    3.  Depth must be strictly positive.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0) or not np.all(np.isfinite(depth)):
        raise InvalidDepthError("depth must be finite and strictly positive")
    x = (u - cam.cx) * depth / cam.fx
    y = (v - cam.cy) * depth / cam.fy
    return np.stack(np.broadcast_arrays(x, y, depth), axis=-1)


def apply_pose(pose: Pose9, points: np.ndarray) -> np.ndarray:
    """Map canonical coordinates into camera space under the 9-DoF pose."""
    pts = np.asarray(points, dtype=np.float64)
    return (pts - CUBE_CENTER) * pose.scale @ pose.rotation.T + pose.translation


def _weighted_stats(corr: CorrespondenceSet):
    w = corr.weights
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateConfigurationError("all weights are zero")
    mu_x = (w[:, None] * corr.source).sum(axis=0) / wsum
    mu_y = (w[:, None] * corr.target).sum(axis=0) / wsum
    return w, wsum, corr.source - mu_x, corr.target - mu_y, mu_x, mu_y


def _procrustes_rotation(cov: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    s = np.diag([1.0, 1.0, d])
    return u @ s @ vt


def umeyama_isotropic(corr: CorrespondenceSet) -> tuple[np.ndarray, float, np.ndarray]:
    """Weighted least-squares similarity fit with a single scale.

    Returns (R, s, t) minimizing sum_i w_i || s R (x_i - c) + t - y_i ||^2
    with c the cube center.  Rotation is reflection-corrected via the SVD
    sign trick; collinear sources raise DegenerateConfigurationError.
    """
    if len(corr) < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {len(corr)}")
    w, wsum, xc, yc, mu_x, mu_y = _weighted_stats(corr)
    cov = (w[:, None] * yc).T @ xc / wsum
    if np.linalg.matrix_rank(cov, tol=1e-9) < 2:
        raise DegenerateConfigurationError("source points are collinear")
    u, d, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    smat = np.diag([1.0, 1.0, sign])
    rot = u @ smat @ vt
    var_x = (w * (xc**2).sum(axis=1)).sum() / wsum
    if var_x <= 0:
        raise DegenerateConfigurationError("zero source variance")
    scale = float(np.trace(np.diag(d) @ smat) / var_x)
    if scale <= 0:
        raise DegenerateConfigurationError(f"non-positive fitted scale {scale}")
    t = mu_y - scale * rot @ (mu_x - CUBE_CENTER)
    return rot, scale, t


def umeyama_anisotropic(corr: CorrespondenceSet,
                        init: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
                        tol: float = 1e-9, max_iters: int = 50) -> Pose9:
    """Per-axis-scale similarity fit by alternating minimization.

    Starts from the isotropic fit (or ``init`` as (R, s, t) with s of
    shape (3,)), then alternates: per-axis scales in closed form with R
    fixed, R by orthogonal Procrustes on the scaled points, t recomputed;
    stops when the largest parameter change drops below ``tol``.
    """
    if len(corr) < 4:
        raise DegenerateConfigurationError(f"need at least 4 correspondences, got {len(corr)}")
    w, wsum, xc, yc, mu_x, mu_y = _weighted_stats(corr)
    axis_var = (w[:, None] * xc**2).sum(axis=0)
    for k in range(3):
        if axis_var[k] <= 0:
            raise AxisDegenerateError(k)

    if init is None:
        rot, s0, _ = umeyama_isotropic(corr)
        scale = np.full(3, s0)
    else:
        rot = np.asarray(init[0], dtype=np.float64)
        scale = np.asarray(init[1], dtype=np.float64).reshape(3).copy()

    for _ in range(max_iters):
        prev_rot, prev_scale = rot, scale
        # scales: with R fixed, R^T y_hat ~ diag(s) x_hat decouples per axis
        proj = yc @ rot
        scale = (w[:, None] * xc * proj).sum(axis=0) / axis_var
        if np.any(scale <= 0):
            raise DegenerateConfigurationError(f"alternation produced non-positive scale {scale}")
        # rotation: Procrustes between scaled sources and targets
        cov = (w[:, None] * yc).T @ (xc * scale) / wsum
        rot = _procrustes_rotation(cov)
        change = max(np.abs(rot - prev_rot).max(), np.abs(scale - prev_scale).max())
        if change < tol:
            break
    t = mu_y - rot @ (scale * (mu_x - CUBE_CENTER))
    return Pose9(rot, t, scale)


@dataclass
class RansacConfig:
    inlier_threshold: float = 0.10
    max_iters: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError("inlier threshold must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


def _affine_init(corr: CorrespondenceSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decompose the least-squares affine fit A = R diag(s) as an init.

    On clean anisotropic data A is exactly R diag(s), so an alternation
    started here polishes the global optimum instead of wandering from
    the isotropic fit, whose basin can be far off on small point sets.
    """
    w, wsum, xc, yc, mu_x, mu_y = _weighted_stats(corr)
    cxx = (w[:, None] * xc).T @ xc / wsum
    if np.linalg.cond(cxx) > 1e8:
        raise np.linalg.LinAlgError("source covariance is ill-conditioned")
    a = ((w[:, None] * yc).T @ xc / wsum) @ np.linalg.inv(cxx)
    scale = np.linalg.norm(a, axis=0)
    if np.any(scale <= 0):
        raise np.linalg.LinAlgError("affine fit collapses an axis")
    if np.linalg.det(a) < 0:
        k = int(np.argmin(scale))
        a[:, k] = -a[:, k]
    rot = _procrustes_rotation(a / scale)
    return rot, scale, mu_y - a @ (mu_x - CUBE_CENTER)


def _consensus_refit(corr: CorrespondenceSet, idx: np.ndarray) -> Pose9:
    sub = corr.subset(idx)
    try:
        init = _affine_init(sub)
    except np.linalg.LinAlgError:
        init = None
    return umeyama_anisotropic(sub, init=init)


def ransac_pose(corr: CorrespondenceSet, cfg: RansacConfig = RansacConfig()) -> tuple[Pose9, np.ndarray]:
    """Robust 9-DoF fit: isotropic 3-point hypotheses, anisotropic refit.

    Hypotheses are scored by inlier count with residual sum then hypothesis
    index as tie-breakers, so a fixed seed gives a fixed answer.  The best
    hypothesis is refit on its consensus and the consensus recounted until
    stable; returns the refit pose and its supporting inlier index array.
    """
    n = len(corr)
    if n < 4:
        raise NoConsensusError(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed)
    best = None  # (count, residual_sum, hypothesis index, inlier mask)
    for it in range(cfg.max_iters):
        idx = rng.choice(n, size=3, replace=False)
        try:
            rot, s, t = umeyama_isotropic(corr.subset(idx))
        except DegenerateConfigurationError:
            continue
        pose = Pose9(rot, t, np.full(3, s))
        residual = np.linalg.norm(apply_pose(pose, corr.source) - corr.target, axis=1)
        inliers = residual <= cfg.inlier_threshold
        count = int(inliers.sum())
        if count < 4:
            continue
        rsum = float(residual[inliers].sum())
        key = (-count, rsum, it)
        if best is None or key < best[0]:
            best = (key, inliers)
    if best is None:
        raise NoConsensusError("no hypothesis reached 4 inliers")
    # isotropic hypotheses under-count the true consensus of an anisotropic
    # transform, so refit and recount until the inlier set is stable
    inliers = best[1]
    pose = _consensus_refit(corr, np.flatnonzero(inliers))
    for _ in range(10):
        residual = np.linalg.norm(apply_pose(pose, corr.source) - corr.target, axis=1)
        expanded = residual <= cfg.inlier_threshold
        if expanded.sum() < 4 or np.array_equal(expanded, inliers):
            break
        inliers = expanded
        pose = _consensus_refit(corr, np.flatnonzero(inliers))
    return pose, np.flatnonzero(inliers)


def rotation_about_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def so3_exp(vec: np.ndarray) -> np.ndarray:
    """Rodrigues map from an axis-angle vector to a rotation matrix."""
    vec = np.asarray(vec, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(vec)
    if angle < 1e-12:
        return np.eye(3)
    axis = vec / angle
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix back onto SO(3)."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=np.float64))
    out = u @ vt
    if np.linalg.det(out) < 0:
        out = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return out


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def geodesic_angle_deg(ra: np.ndarray, rb: np.ndarray) -> float:
    cos = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.rad2deg(np.arccos(np.clip(cos, -1.0, 1.0))))


SYMMETRY_CLASSES = ("asym", "2-fold", "4-fold", "all")


def rotation_error_deg(pred: np.ndarray, gt: np.ndarray, symmetry: str = "asym") -> float:
    """Geodesic rotation error minimized over the object's symmetry group.

    The symmetry axis is the canonical +y.  The continuous class ("all")
    uses the closed-form minimum over all rotations about that axis.
    """
    if symmetry not in SYMMETRY_CLASSES:
        raise ValueError(f"unknown symmetry class {symmetry!r}; expected one of {SYMMETRY_CLASSES}")
    if symmetry == "all":
        q = gt.T @ pred
        # trace(Q @ Ry(theta)) = (Q00 + Q22) cos + (Q20 - Q02) sin + Q11
        amp = np.hypot(q[0, 0] + q[2, 2], q[2, 0] - q[0, 2])
        cos = (q[1, 1] + amp - 1.0) / 2.0
        return float(np.rad2deg(np.arccos(np.clip(cos, -1.0, 1.0))))
    folds = {"asym": 1, "2-fold": 2, "4-fold": 4}[symmetry]
    angles = [2.0 * np.pi * k / folds for k in range(folds)]
    return min(geodesic_angle_deg(pred @ rotation_about_y(a), gt) for a in angles)


@dataclass
class PoseErrors:
    translation_m: float
    rotation_deg: float
    scale_pct: float


def pose_errors(pred: Pose9, gt: Pose9, symmetry: str = "asym") -> PoseErrors:
    """Translation (m), symmetry-aware rotation (deg), and scale (%) errors.

    Scale error is 100 times the mean per-axis |predicted/true - 1|.
    """
    t_err = float(np.linalg.norm(pred.translation - gt.translation))
    r_err = rotation_error_deg(pred.rotation, gt.rotation, symmetry)
    s_err = float(100.0 * np.mean(np.abs(pred.scale / gt.scale - 1.0)))
    return PoseErrors(t_err, r_err, s_err)
