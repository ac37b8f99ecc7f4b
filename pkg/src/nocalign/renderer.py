"""Software rasterizer and template-view camera rig.

Rendering serves two masters: template generation (canonical-coordinate,
depth, and mask images for grid building) and the dense refinement loss,
which needs a silhouette that varies continuously with pose.  The soft
mask therefore follows the sigmoid-of-signed-squared-distance
construction, evaluated against projected triangle edges in continuous
screen space rather than against a pixelized mask.  Distances are
normalized by image height, so ``soft_sigma`` is resolution-free.

No color, textures, or lighting: canonical coordinates double as the
visualization color space when needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CUBE_CENTER, CameraExtrinsics, CameraIntrinsics, Pose9, apply_pose
from .tensorio import NocMap, TriMesh

_NEAR = 1e-6
_HALF_DIAGONAL = float(np.sqrt(3.0) / 2.0)
# soft contributions beyond this many sigma-widths round to 0/1
_HALO_SIGMAS = 2.5


@dataclass
class RenderOutput:
    """One rendered view: canonical coordinates, depth, and masks.

    ``depth`` holds +inf where no surface was hit; ``hard_mask`` is exactly
    the finite-depth set and NOC validity never exceeds it.
    """

    noc: NocMap
    depth: np.ndarray
    soft_mask: np.ndarray
    hard_mask: np.ndarray


@dataclass
class OrbitSpec:
    """Template camera rig: an elevation x azimuth grid with angle jitter."""

    elevations_deg: tuple = (10.0, 20.0, 30.0)
    azimuths_deg: tuple = tuple(float(a) for a in range(0, 360, 30))
    jitter_std_deg: float = 2.0
    distance: float = 1.8
    seed: int = 0

    def __post_init__(self):
        if self.distance <= _HALF_DIAGONAL:
            raise ValueError(
                f"orbit distance {self.distance} must exceed the unit-cube "
                f"half-diagonal {_HALF_DIAGONAL:.6f}"
            )
        if self.jitter_std_deg < 0:
            raise ValueError("jitter std must be non-negative")

    @property
    def view_count(self) -> int:
        return len(self.elevations_deg) * len(self.azimuths_deg)


def template_intrinsics(image_size: int = 448, vfov_deg: float = 60.0) -> CameraIntrinsics:
    return CameraIntrinsics.from_fov(vfov_deg, image_size, image_size)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> CameraExtrinsics:
    """World-to-camera extrinsics, x right / y down / z forward."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValueError("view direction parallel to the up vector")
    right = right / norm
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return CameraExtrinsics(rot, -rot @ eye)


def orbit_cameras(spec: OrbitSpec) -> list[CameraExtrinsics]:
    """Jittered orbit cameras in elevation-major order, aimed at the cube center.

    With zero jitter the rig reproduces the exact angle grid.
    """
    rng = np.random.default_rng(spec.seed)
    cams = []
    for elev_mean in spec.elevations_deg:
        for azim_mean in spec.azimuths_deg:
            elev = np.deg2rad(elev_mean + rng.normal(0.0, spec.jitter_std_deg))
            azim = np.deg2rad(azim_mean + rng.normal(0.0, spec.jitter_std_deg))
            direction = np.array([
                np.cos(elev) * np.sin(azim),
                np.sin(elev),
                np.cos(elev) * np.cos(azim),
            ])
            eye = CUBE_CENTER + spec.distance * direction
            cams.append(look_at(eye, CUBE_CENTER))
    return cams


def pose_from_extrinsics(ext: CameraExtrinsics) -> Pose9:
    """The unit-scale pose that reproduces a template camera's view."""
    return Pose9(ext.rotation, ext.translation + ext.rotation @ CUBE_CENTER, np.ones(3))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _point_segment_dist2(px, py, ax, ay, bx, by):
    """Squared distance from pixel grid points to segment ab, screen units."""
    abx, aby = bx - ax, by - ay
    denom = abx * abx + aby * aby
    if denom < 1e-18:
        qx, qy = px - ax, py - ay
        return qx * qx + qy * qy
    t = np.clip(((px - ax) * abx + (py - ay) * aby) / denom, 0.0, 1.0)
    qx, qy = px - (ax + t * abx), py - (ay + t * aby)
    return qx * qx + qy * qy


def _triangle_edge_dist2(px, py, xs, ys):
    """Min squared distance to a triangle's three edges, one broadcast pass.

    A zero-length edge degrades to point distance: the clamped projection
    lands on the shared endpoint whatever t the guarded division yields.
    """
    ax, ay = xs[:, None, None], ys[:, None, None]
    abx = np.roll(xs, -1)[:, None, None] - ax
    aby = np.roll(ys, -1)[:, None, None] - ay
    denom = np.maximum(abx * abx + aby * aby, 1e-18)
    t = np.clip(((px - ax) * abx + (py - ay) * aby) / denom, 0.0, 1.0)
    qx = px - (ax + t * abx)
    qy = py - (ay + t * aby)
    return (qx * qx + qy * qy).min(axis=0)


def rasterize(mesh: TriMesh, pose: Pose9, cam: CameraIntrinsics,
              soft_sigma: float | None = None) -> RenderOutput:
    """Z-buffered perspective rasterization with barycentric NOC interpolation.

    Triangles touching the near plane are dropped; a mesh entirely behind
    the camera renders empty rather than raising.  ``soft_sigma`` of None
    or 0 substitutes the hard mask for the soft one (the sigma -> 0 limit).
    """
    h, w = cam.height, cam.width
    depth = np.full((h, w), np.inf)
    noc = np.zeros((h, w, 3))

    v_cam = apply_pose(pose, mesh.vertices)
    z = v_cam[:, 2]
    safe_z = np.where(z > _NEAR, z, 1.0)
    us = cam.fx * v_cam[:, 0] / safe_z + cam.cx
    vs = cam.fy * v_cam[:, 1] / safe_z + cam.cy
    inv_z = 1.0 / safe_z

    front = z > _NEAR
    tris = mesh.faces[np.all(front[mesh.faces], axis=1)] if len(mesh.faces) else mesh.faces
    soft_terms = []  # (row slice, col slice, per-pixel 1 - soft_tri)

    for tri in tris:
        i0, i1, i2 = tri
        ax, ay = us[i0], vs[i0]
        bx, by = us[i1], vs[i1]
        cx_, cy_ = us[i2], vs[i2]
        if soft_sigma:
            halo = int(np.ceil(_HALO_SIGMAS * np.sqrt(soft_sigma) * h)) + 1
            r0 = max(0, int(np.floor(min(ay, by, cy_) - 0.5)) - halo)
            r1 = min(h, int(np.ceil(max(ay, by, cy_) - 0.5)) + halo + 1)
            c0 = max(0, int(np.floor(min(ax, bx, cx_) - 0.5)) - halo)
            c1 = min(w, int(np.ceil(max(ax, bx, cx_) - 0.5)) + halo + 1)
        else:
            r0 = max(0, int(np.floor(min(ay, by, cy_) - 0.5)))
            r1 = min(h, int(np.ceil(max(ay, by, cy_) - 0.5)) + 1)
            c0 = max(0, int(np.floor(min(ax, bx, cx_) - 0.5)))
            c1 = min(w, int(np.ceil(max(ax, bx, cx_) - 0.5)) + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        px = np.arange(c0, c1) + 0.5
        py = (np.arange(r0, r1) + 0.5)[:, None]

        area = (bx - ax) * (cy_ - ay) - (by - ay) * (cx_ - ax)
        degenerate = abs(area) < 1e-12
        if not degenerate:
            w0 = ((cx_ - bx) * (py - by) - (cy_ - by) * (px - bx)) / area
            w1 = ((ax - cx_) * (py - cy_) - (ay - cy_) * (px - cx_)) / area
            w2 = 1.0 - w0 - w1
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        else:
            inside = np.zeros((r1 - r0, c1 - c0), dtype=bool)

        if soft_sigma:
            d2 = _triangle_edge_dist2(
                px, py, np.array([ax, bx, cx_]), np.array([ay, by, cy_])
            ) / (h * h)
            sign = np.where(inside, 1.0, -1.0)
            soft_tri = _sigmoid(sign * d2 / soft_sigma)
            soft_terms.append((slice(r0, r1), slice(c0, c1), 1.0 - soft_tri))

        if degenerate or not inside.any():
            continue
        # perspective-correct: 1/z and noc/z interpolate linearly in screen space
        izp = w0 * inv_z[i0] + w1 * inv_z[i1] + w2 * inv_z[i2]
        zp = np.where(inside, 1.0 / np.where(izp > 0, izp, 1.0), np.inf)
        tile = depth[r0:r1, c0:c1]
        closer = inside & (zp < tile)
        if not closer.any():
            continue
        n0, n1, n2 = mesh.vertices[i0], mesh.vertices[i1], mesh.vertices[i2]
        nocp = (
            w0[..., None] * (n0 * inv_z[i0])
            + w1[..., None] * (n1 * inv_z[i1])
            + w2[..., None] * (n2 * inv_z[i2])
        ) / izp[..., None]
        tile[closer] = zp[closer]
        noc[r0:r1, c0:c1][closer] = nocp[closer]

    hard = np.isfinite(depth)
    if soft_sigma:
        one_minus = np.ones((h, w))
        for rs, cs, term in soft_terms:
            one_minus[rs, cs] *= term
        soft = 1.0 - one_minus
    else:
        soft = hard.astype(np.float64)
    return RenderOutput(NocMap(noc, hard.copy()), depth, soft, hard)


@dataclass
class TemplateSet:
    """Rendered orbit views plus the cameras that produced them."""

    outputs: list[RenderOutput]
    extrinsics: list[CameraExtrinsics]
    intrinsics: CameraIntrinsics
    spec: OrbitSpec = field(default_factory=OrbitSpec)


def render_templates(mesh: TriMesh, spec: OrbitSpec = OrbitSpec(),
                     image_size: int = 448, vfov_deg: float = 60.0) -> TemplateSet:
    """Rasterize the canonical mesh from every orbit camera."""
    cam = template_intrinsics(image_size, vfov_deg)
    exts = orbit_cameras(spec)
    outputs = [rasterize(mesh, pose_from_extrinsics(ext), cam) for ext in exts]
    return TemplateSet(outputs, exts, cam, spec)
