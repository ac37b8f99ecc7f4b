"""Voxel feature field: multi-view back-projection, smoothing, and 2D-3D matching.

Template views are reduced to one sample per feature patch (the patch
center pushed through the z-buffer) and accumulated into a 100^3 grid
over the normalized object cube. Query pixels are matched to occupied
voxels by cosine similarity, which yields a NOC map prediction without
any per-image optimization.
"""

import dataclasses
import hashlib
import json
import math
import pathlib

import numpy as np

from .adapter import FeatureMap
from .geometry import CameraExtrinsics, CameraIntrinsics, backproject
from .tensorio import NocMap, read_tensor, write_tensor

GRID_RESOLUTION = 100

# Rendered views are trusted; augmented views get a small fraction of a
# rendered view's vote so they refine rather than dominate the field.
KIND_WEIGHTS = {"rendered": 0.5, "augmented": 0.071}

SMOOTH_WEIGHTS = (0.6, 0.25, 0.15)


class EmptyInputError(ValueError):
    """No views were supplied."""


class EmptyGridError(ValueError):
    """The grid has no occupied voxels."""


class NoOverlapError(ValueError):
    """Two NOC maps share no jointly valid pixels."""


@dataclasses.dataclass
class TemplateView:
    """One template image reduced to its patch features and geometry.

    ``features`` lives on the patch grid (h, w, C); ``zbuffer`` is the
    full-resolution depth image in meters with +inf on background. The
    world frame of ``extrinsics`` is the normalized object cube, so
    back-projected points are NOC coordinates directly.
    """

    features: FeatureMap
    zbuffer: np.ndarray
    extrinsics: CameraExtrinsics
    intrinsics: CameraIntrinsics
    kind: str = "rendered"

    def __post_init__(self):
        if self.kind not in KIND_WEIGHTS:
            raise ValueError(f"unknown view kind: {self.kind!r}")
        self.zbuffer = np.asarray(self.zbuffer, dtype=np.float64)
        if self.zbuffer.ndim != 2:
            raise ValueError("zbuffer must be 2-D")
        h, w = self.features.values.shape[:2]
        H, W = self.zbuffer.shape
        if H % h or W % w:
            raise ValueError("zbuffer size must be a multiple of the patch grid")

    def digest(self):
        """Content hash; used to give accumulation a canonical view order."""
        md = hashlib.sha256()
        md.update(self.kind.encode())
        for a in (self.features.values, self.features.valid, self.zbuffer,
                  self.extrinsics.rotation, self.extrinsics.translation):
            md.update(np.ascontiguousarray(a).tobytes())
        md.update(json.dumps(self.intrinsics.__dict__, sort_keys=True).encode())
        return md.hexdigest()


@dataclasses.dataclass
class VoxelFeatureGrid:
    """Finalized feature field over the unit cube.

    ``features`` is (R, R, R, C) float32 with unit-normalized vectors on
    occupied voxels and zeros elsewhere; ``weights`` is (R, R, R) float32
    accumulated mass. Voxel (i, j, k) covers NOC
    [i/R, (i+1)/R) x ... with center (i + 0.5)/R.

    ``centroids``, when present, holds the mass-weighted mean deposit
    position per voxel, (R, R, R, 3) float32. A flat face snaps every
    deposit on it to the same lattice plane, so reporting voxel centers
    would shift the whole face by a shared sub-voxel offset; the
    centroid keeps the measured plane instead.
    """

    features: np.ndarray
    weights: np.ndarray
    centroids: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.weights = np.asarray(self.weights, dtype=np.float32)
        if self.features.ndim != 4 or self.features.shape[:3] != self.weights.shape:
            raise ValueError("features must be (R, R, R, C) with matching weights")
        r = self.weights.shape[0]
        if self.weights.shape != (r, r, r):
            raise ValueError("grid must be cubic")
        if self.centroids is not None:
            self.centroids = np.asarray(self.centroids, dtype=np.float32)
            if self.centroids.shape != (r, r, r, 3):
                raise ValueError("centroids must be (R, R, R, 3)")

    @property
    def resolution(self):
        return self.weights.shape[0]

    @property
    def channels(self):
        return self.features.shape[3]

    @property
    def occupancy(self):
        return self.weights > 0

    def occupied_flat(self):
        """Sorted linear indices of occupied voxels."""
        return np.flatnonzero(self.weights.ravel() > 0)

    def voxel_centers(self, flat_index):
        r = self.resolution
        ijk = np.stack(np.unravel_index(flat_index, (r, r, r)), axis=-1)
        return (ijk + 0.5) / r

    def voxel_coords(self, flat_index):
        """Best position estimate per voxel: centroid if known, else center."""
        centers = self.voxel_centers(flat_index)
        if self.centroids is None:
            return centers
        cent = self.centroids.reshape(-1, 3)[flat_index].astype(np.float64)
        known = np.abs(cent - centers).max(axis=-1) <= 0.5 / self.resolution
        return np.where(known[..., None], cent, centers)


@dataclasses.dataclass
class MatchResult:
    """Per-pixel grid matches in raster order.

    ``pixels`` is (n, 2) int (row, col) on the patch grid, ``coords`` the
    matched voxel positions (n, 3), ``similarity`` the winning cosine.
    """

    pixels: np.ndarray
    coords: np.ndarray
    similarity: np.ndarray


def view_patch_noc(view):
    """Geometric NOC of each valid patch via its center depth.

    The patch center pixel's depth is pushed through the camera; when
    that pixel is background, the nearest in-patch foreground pixel
    stands in (patch validity only demands half coverage). Returns a
    patch-resolution NocMap.
    """
    h, w = view.features.values.shape[:2]
    H, W = view.zbuffer.shape
    ph, pw = H // h, W // w
    coords = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    us, vs, zs = [], [], []
    slots = []
    for i in range(h):
        for j in range(w):
            if not view.features.valid[i, j]:
                continue
            cv, cu = (i + 0.5) * ph, (j + 0.5) * pw
            r, c = min(int(cv), H - 1), min(int(cu), W - 1)
            z = view.zbuffer[r, c]
            if not np.isfinite(z):
                tile = view.zbuffer[i * ph:(i + 1) * ph, j * pw:(j + 1) * pw]
                rr, cc = np.nonzero(np.isfinite(tile))
                if not len(rr):
                    continue
                d2 = (i * ph + rr + 0.5 - cv) ** 2 + (j * pw + cc + 0.5 - cu) ** 2
                k = int(np.argmin(d2))
                r, c = i * ph + rr[k], j * pw + cc[k]
                cu, cv = c + 0.5, r + 0.5
                z = view.zbuffer[r, c]
            us.append(cu)
            vs.append(cv)
            zs.append(z)
            slots.append((i, j))
    if slots:
        pts = backproject(np.array(us), np.array(vs), np.array(zs), view.intrinsics)
        world = view.extrinsics.camera_to_world(pts)
        for (i, j), p in zip(slots, world):
            coords[i, j] = p
            valid[i, j] = True
    return NocMap(coords, valid)


def build_grid(views, kind_weights=None, resolution=GRID_RESOLUTION):
    """Accumulate patch samples from all views into a voxel feature field.

    Each valid patch contributes (weight * feature, weight) to the voxel
    containing its back-projected center; finalize divides and
    unit-normalizes. Accumulation runs in a canonical content-digest
    order, so the result is bit-identical under any input permutation.
    """
    views = list(views)
    if not views:
        raise EmptyInputError("no views to build from")
    kw = dict(KIND_WEIGHTS if kind_weights is None else kind_weights)
    channels = {v.features.values.shape[2] for v in views}
    if len(channels) != 1:
        raise ValueError("views disagree on channel count")
    c = channels.pop()
    views = sorted(views, key=lambda v: v.digest())

    r = resolution
    feat_acc = np.zeros((r * r * r, c), dtype=np.float32)
    pos_acc = np.zeros((r * r * r, 3), dtype=np.float64)
    w_acc = np.zeros(r * r * r, dtype=np.float32)
    for view in views:
        weight = np.float32(kw[view.kind])
        noc = view_patch_noc(view)
        if not noc.valid.any():
            continue
        pts = noc.values[noc.valid]
        feats = view.features.values[noc.valid].astype(np.float32)
        ijk = np.clip(np.floor(pts * r).astype(np.int64), 0, r - 1)
        flat = np.ravel_multi_index((ijk[:, 0], ijk[:, 1], ijk[:, 2]), (r, r, r))
        order = np.argsort(flat, kind="stable")
        np.add.at(feat_acc, flat[order], weight * feats[order])
        np.add.at(pos_acc, flat[order], weight * pts[order])
        np.add.at(w_acc, flat[order], weight)
    if not (w_acc > 0).any():
        raise EmptyGridError("all views were background")

    occ = w_acc > 0
    feat_acc[occ] /= w_acc[occ, None]
    pos_acc[occ] /= w_acc[occ, None].astype(np.float64)
    norms = np.linalg.norm(feat_acc[occ], axis=1)
    dead = norms == 0
    feat_acc[occ] = np.divide(feat_acc[occ], np.where(dead, 1, norms)[:, None])
    if dead.any():
        w_acc[np.flatnonzero(occ)[dead]] = 0  # zero-feature voxels are not usable
        feat_acc[np.flatnonzero(occ)[dead]] = 0
        if not (w_acc > 0).any():
            raise EmptyGridError("all accumulated features were zero")
    return VoxelFeatureGrid(feat_acc.reshape(r, r, r, c), w_acc.reshape(r, r, r),
                            pos_acc.astype(np.float32).reshape(r, r, r, 3))


def _downsample(grid, factor):
    """Occupancy-weighted 2x2x2 (or 4^3) block average; returns (feat, weight)."""
    r = grid.resolution
    rc = r // factor
    w = grid.weights.reshape(rc, factor, rc, factor, rc, factor)
    wf = (grid.features * grid.weights[..., None]).reshape(
        rc, factor, rc, factor, rc, factor, grid.channels)
    wsum = w.sum(axis=(1, 3, 5))
    fsum = wf.sum(axis=(1, 3, 5))
    feat = np.zeros_like(fsum)
    occ = wsum > 0
    feat[occ] = fsum[occ] / wsum[occ, None]
    return feat, wsum


def _upsample(feat, wsum, factor, resolution):
    """Trilinear interpolation of a coarse field at fine voxel centers.

    Empty coarse cells are ignored: corner weights are masked by
    occupancy and renormalized. Returns (values, mass, defined) on the
    fine grid, with defined False where no occupied cell has support.
    """
    r, rc = resolution, feat.shape[0]
    u = (np.arange(r) + 0.5) / factor - 0.5
    base = np.floor(u).astype(np.int64)
    frac = u - base

    c = feat.shape[3]
    num = np.zeros((r, r, r, c))
    wnum = np.zeros((r, r, r))
    den = np.zeros((r, r, r))
    occ = wsum > 0
    for dx in (0, 1):
        ix = base + dx
        tx = np.where(dx, frac, 1 - frac)
        okx = (ix >= 0) & (ix < rc)
        ixc = np.clip(ix, 0, rc - 1)
        for dy in (0, 1):
            iy = base + dy
            ty = np.where(dy, frac, 1 - frac)
            oky = (iy >= 0) & (iy < rc)
            iyc = np.clip(iy, 0, rc - 1)
            for dz in (0, 1):
                iz = base + dz
                tz = np.where(dz, frac, 1 - frac)
                okz = (iz >= 0) & (iz < rc)
                izc = np.clip(iz, 0, rc - 1)
                tw = (tx[:, None, None] * ty[None, :, None] * tz[None, None, :]
                      * okx[:, None, None] * oky[None, :, None] * okz[None, None, :]
                      * occ[np.ix_(ixc, iyc, izc)])
                num += tw[..., None] * feat[np.ix_(ixc, iyc, izc)]
                wnum += tw * wsum[np.ix_(ixc, iyc, izc)]
                den += tw
    defined = den > 0
    vals = np.zeros_like(num)
    mass = np.zeros_like(wnum)
    vals[defined] = num[defined] / den[defined, None]
    mass[defined] = wnum[defined] / den[defined]
    return vals, mass, defined


def smooth_grid(grid, weights=SMOOTH_WEIGHTS):
    """Blend the grid with its 2x and 4x downsampled-then-upsampled copies.

    The combination runs on the union of supports, so occupancy grows
    into voxels reached by interpolation from occupied cells; features
    are renormalized to unit length afterwards.
    """
    if len(weights) != 3 or any(w < 0 for w in weights):
        raise ValueError("weights must be three non-negative numbers")
    r, c = grid.resolution, grid.channels
    combined = weights[0] * grid.features.astype(np.float64)
    mass = weights[0] * grid.weights.astype(np.float64)
    support = grid.occupancy & (weights[0] > 0)
    for coef, factor in zip(weights[1:], (2, 4)):
        if coef == 0:
            continue
        if r % factor:
            raise ValueError(f"resolution {r} not divisible by {factor}")
        vals, m, defined = _upsample(*_downsample(grid, factor), factor, r)
        combined += coef * vals
        mass += coef * m
        support |= defined

    norms = np.linalg.norm(combined, axis=3)
    keep = support & (norms > 0)
    feat = np.zeros((r, r, r, c), dtype=np.float32)
    feat[keep] = (combined[keep] / norms[keep, None]).astype(np.float32)
    out_w = np.where(keep, mass, 0).astype(np.float32)
    cent = None
    if grid.centroids is not None:
        # measured positions survive; voxels grown by interpolation only
        # have their own centers to offer
        ijk = np.stack(np.meshgrid(*[np.arange(r)] * 3, indexing="ij"), axis=-1)
        cent = ((ijk + 0.5) / r).astype(np.float32)
        base = grid.occupancy & keep
        cent[base] = grid.centroids[base]
    return VoxelFeatureGrid(feat, out_w, cent)


def match(grid, features, mask=None, _chunk=256):
    """Cosine-similarity argmax of each valid pixel over occupied voxels.

    Ties break to the lowest voxel linear index. Returns a MatchResult
    in raster pixel order.
    """
    occ_flat = grid.occupied_flat()
    if not len(occ_flat):
        raise EmptyGridError("cannot match against an empty grid")
    if features.values.shape[2] != grid.channels:
        raise ValueError("channel count mismatch")
    valid = features.valid if mask is None else np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(valid)
    if not len(rows):
        return MatchResult(np.zeros((0, 2), dtype=np.int64), np.zeros((0, 3)),
                           np.zeros(0))

    v = grid.features.reshape(-1, grid.channels)[occ_flat].astype(np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    q = features.values[rows, cols]
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    q = q / np.where(qn == 0, 1, qn)

    best = np.empty(len(rows), dtype=np.int64)
    sims = np.empty(len(rows))
    for lo in range(0, len(rows), _chunk):
        hi = min(lo + _chunk, len(rows))
        s = q[lo:hi] @ v.T
        idx = np.argmax(s, axis=1)  # first max: lowest linear index wins
        best[lo:hi] = idx
        sims[lo:hi] = s[np.arange(hi - lo), idx]
    return MatchResult(np.stack([rows, cols], axis=1),
                       grid.voxel_coords(occ_flat[best]), sims)


def predict_noc(grid, features, out_size, mask=None):
    """NOC map from grid matches, bilinearly upsampled to ``out_size``.

    Validity upsamples through the same bilinear weights with the
    at-least-half coverage rule (exactly half counts as valid); values
    interpolate over valid patches only.
    """
    h, w = features.values.shape[:2]
    m = match(grid, features, mask)
    patch_noc = np.zeros((h, w, 3))
    patch_valid = np.zeros((h, w), dtype=bool)
    patch_noc[m.pixels[:, 0], m.pixels[:, 1]] = m.coords
    patch_valid[m.pixels[:, 0], m.pixels[:, 1]] = True

    H, W = out_size
    uy = (np.arange(H) + 0.5) * h / H - 0.5
    ux = (np.arange(W) + 0.5) * w / W - 0.5
    by, bx = np.floor(uy).astype(np.int64), np.floor(ux).astype(np.int64)
    fy, fx = uy - by, ux - bx

    vals = np.zeros((H, W, 3))
    cov = np.zeros((H, W))
    vf = patch_valid.astype(np.float64)
    for dy in (0, 1):
        iy = np.clip(by + dy, 0, h - 1)
        ty = np.where(dy, fy, 1 - fy)
        for dx in (0, 1):
            ix = np.clip(bx + dx, 0, w - 1)
            tx = np.where(dx, fx, 1 - fx)
            tw = ty[:, None] * tx[None, :]
            vals += (tw * vf[np.ix_(iy, ix)])[..., None] * patch_noc[np.ix_(iy, ix)]
            cov += tw * vf[np.ix_(iy, ix)]
    out_valid = cov >= 0.5
    out = np.zeros((H, W, 3))
    out[out_valid] = vals[out_valid] / cov[out_valid, None]
    return NocMap(out, out_valid)


def noc_error(pred, gt):
    """Root-mean-square 3D error over jointly valid pixels."""
    if pred.values.shape != gt.values.shape:
        raise ValueError("NOC maps differ in size")
    joint = pred.valid & gt.valid
    if not joint.any():
        raise NoOverlapError("validity masks do not intersect")
    d = pred.values[joint] - gt.values[joint]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def filter_augmented(views, reference, threshold=0.20):
    """Keep augmented views whose feature-matched NOC agrees with geometry.

    Each view's NOC is predicted from the reference grid (built from
    rendered views only) and compared at patch resolution against the
    view's own back-projected depth; views with RMSE above the threshold
    are discarded.
    """
    kept = []
    for view in views:
        geom = view_patch_noc(view)
        h, w = view.features.values.shape[:2]
        pred = predict_noc(reference, view.features, (h, w))
        try:
            err = noc_error(pred, geom)
        except NoOverlapError:
            continue
        if err <= threshold:
            kept.append(view)
    return kept


def save_grid(path, grid, meta=None):
    """Write the grid as two tensors plus a manifest under ``path``."""
    path = pathlib.Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_tensor(path / "features.nten", grid.features)
    write_tensor(path / "weights.nten", grid.weights)
    if grid.centroids is not None:
        write_tensor(path / "centroids.nten", grid.centroids)
    manifest = {"resolution": grid.resolution, "channels": grid.channels,
                "occupied": int(grid.occupancy.sum()),
                "centroids": grid.centroids is not None}
    manifest.update(meta or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_grid(path):
    path = pathlib.Path(path)
    features = read_tensor(path / "features.nten")
    weights = read_tensor(path / "weights.nten")
    cent_path = path / "centroids.nten"
    centroids = read_tensor(cent_path) if cent_path.exists() else None
    meta = json.loads((path / "manifest.json").read_text())
    return VoxelFeatureGrid(features, weights, centroids), meta


def positional_features(noc, frequencies=(0.5, 1.0, 2.0)):
    """Sinusoidal encoding of NOC coordinates, one cos/sin pair per
    axis and frequency. All encodings share the same norm, so cosine
    similarity reduces to a sum of cosines of coordinate differences
    with its global maximum at zero offset; nearest-voxel matching is
    then exact by construction.
    """
    noc = np.asarray(noc, dtype=np.float64)
    parts = []
    for f in frequencies:
        ang = 2 * math.pi * f * noc
        parts.append(np.cos(ang))
        parts.append(np.sin(ang))
    return np.concatenate(parts, axis=-1)
