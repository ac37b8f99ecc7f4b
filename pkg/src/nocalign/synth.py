"""Synthetic ground truth: parametric scenes with oracle features.

Stands in for real captures and foundation-model features at desk
scale. Oracle features are sinusoidal encodings of the NOC coordinate,
optionally corrupted with a controlled mirror ambiguity, so every later
stage can be tested against exact geometry.
"""

import dataclasses
import json
import math
import pathlib

import numpy as np

from .adapter import FeatureMap, downsample_noc
from .geometry import CameraIntrinsics, Pose9, random_rotation
from .renderer import rasterize
from .tensorio import (
    SampleRecord,
    TriMesh,
    normalize_mesh,
    save_mesh,
    write_samples,
    write_tensor,
)

SCENE_KINDS = ("cube", "lshape", "chair")

# Half-integer ladder: the per-axis similarity kernel sums these
# cosines, which cancel exactly at coordinate difference 1, so opposite
# faces of the unit cube never look alike and argmax matching against a
# sparse voxel dictionary cannot alias across the object. An octave
# ladder (1, 2, 4) would return to +1 there. The fold on x also needs
# gentle frequencies so a mirrored pair barely moves the encoding.
X_FREQUENCIES = (0.5, 1.0, 1.5, 2.0)
YZ_FREQUENCIES = (0.5, 1.0, 1.5, 2.0)

# Residual asymmetry of the fold: mirrored points stay distinguishable
# in principle, at a contrast an adapter must amplify to separate them.
MIRROR_LEAK = 0.5

# Per-tile phase shift; cos/sin pairs make the similarity kernel
# independent of phase, so tiling fills channels without changing it.
_PHASE_STEP = 1.2345


@dataclasses.dataclass(frozen=True)
class OracleConfig:
    channels: int = 64
    mirror_eps: float = 0.0

    def __post_init__(self):
        if self.channels < 2 or self.channels % 2:
            raise ValueError("channels must be a positive even number")
        if not 0.0 <= self.mirror_eps <= 1.0:
            raise ValueError("mirror_eps must lie in [0, 1]")


def _encoding_entries(channels):
    base = ([(0, f) for f in X_FREQUENCIES]
            + [(1, f) for f in YZ_FREQUENCIES]
            + [(2, f) for f in YZ_FREQUENCIES])
    entries = []
    tile = 0
    while len(entries) < channels // 2:
        for axis, freq in base:
            entries.append((axis, freq, tile * _PHASE_STEP))
            if len(entries) == channels // 2:
                break
        tile += 1
    return entries


def fold_coordinate(x, mirror_eps):
    """Mirror fold of the x coordinate about 0.5.

    Collapses x and 1-x to nearly the same value while keeping a
    leak of 2*MIRROR_LEAK*eps*(x-0.5) between them.
    """
    c = x - 0.5
    return 0.5 + c * (np.sign(c) + MIRROR_LEAK * mirror_eps)


def oracle_features(noc, cfg=OracleConfig()):
    """Sinusoidal positional encoding of a NOC map.

    Every cos/sin pair contributes cos(2*pi*f*delta) to the inner
    product of two encodings, so similarity depends only on the
    coordinate difference; with mirror_eps > 0 the x input is folded
    first and mirrored surface points become near-duplicates.
    """
    coords = np.asarray(noc.values, dtype=np.float64).copy()
    if cfg.mirror_eps > 0:
        coords[..., 0] = fold_coordinate(coords[..., 0], cfg.mirror_eps)
    channels = []
    for axis, freq, phase in _encoding_entries(cfg.channels):
        ang = 2 * math.pi * freq * coords[..., axis] + phase
        channels.append(np.cos(ang))
        channels.append(np.sin(ang))
    return FeatureMap(np.stack(channels, axis=-1), noc.valid.copy())


_BOX_FACES = np.array([
    [0, 2, 1], [0, 3, 2],
    [4, 5, 6], [4, 6, 7],
    [0, 1, 5], [0, 5, 4],
    [3, 6, 2], [3, 7, 6],
    [0, 4, 7], [0, 7, 3],
    [1, 2, 6], [1, 6, 5],
])

_KIND_BOXES = {
    "cube": [((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))],
    "lshape": [((0.0, 0.0, 0.0), (1.0, 0.4, 0.4)),
               ((0.0, 0.0, 0.0), (0.4, 1.0, 0.4))],
    "chair": [((0.00, 0.0, 0.00), (0.12, 0.5, 0.12)),
              ((0.88, 0.0, 0.00), (1.00, 0.5, 0.12)),
              ((0.00, 0.0, 0.88), (0.12, 0.5, 1.00)),
              ((0.88, 0.0, 0.88), (1.00, 0.5, 1.00)),
              ((0.00, 0.5, 0.00), (1.00, 0.62, 1.00)),
              ((0.00, 0.62, 0.00), (1.00, 1.45, 0.12))],
}


def make_mesh(kind):
    """Normalized triangle mesh for one of the scene kinds."""
    if kind not in _KIND_BOXES:
        raise ValueError(f"unknown mesh kind: {kind!r}")
    verts, faces = [], []
    offset = 0
    for lo, hi in _KIND_BOXES[kind]:
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        corners = np.array([[lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]],
                            [hi[0], hi[1], lo[2]], [lo[0], hi[1], lo[2]],
                            [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]],
                            [hi[0], hi[1], hi[2]], [lo[0], hi[1], hi[2]]])
        verts.append(corners)
        faces.append(_BOX_FACES + offset)
        offset += 8
    return normalize_mesh(np.vstack(verts), np.vstack(faces))


def scene_intrinsics(image_size, vfov_deg=60.0):
    f = image_size / (2 * math.tan(math.radians(vfov_deg) / 2))
    return CameraIntrinsics(fx=f, fy=f, cx=image_size / 2, cy=image_size / 2,
                            width=image_size, height=image_size)


@dataclasses.dataclass
class SceneSpec:
    """Everything needed to generate one scene deterministically."""

    kind: str
    pose: Pose9
    intrinsics: CameraIntrinsics
    depth_sigma: float = 0.0
    outlier_rate: float = 0.0
    mirror_eps: float = 0.0
    seed: int = 0
    patch: int = 14
    channels: int = 64
    confidence: float = 1.0
    image_id: str = ""
    frame_group: str = ""

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"unknown scene kind: {self.kind!r}")
        if self.depth_sigma < 0:
            raise ValueError("depth_sigma must be non-negative")
        for name in ("outlier_rate", "mirror_eps"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.intrinsics.height % self.patch or self.intrinsics.width % self.patch:
            raise ValueError("image size must be a multiple of the patch size")
        if not self.image_id:
            self.image_id = f"{self.kind}-{self.seed:06d}"
        if not self.frame_group:
            self.frame_group = self.image_id

    @property
    def cad_id(self):
        return self.kind


def random_scene(seed, kind=None, image_size=112, depth_sigma=0.0,
                 outlier_rate=0.0, mirror_eps=0.0, patch=14, channels=64):
    """Scene spec with a random in-view pose.

    Scales stay in [0.8, 1.25] and the center within a cone where the
    whole scaled unit cube is guaranteed inside the frustum.
    """
    rng = np.random.default_rng(seed)
    if kind is None:
        kind = SCENE_KINDS[rng.integers(len(SCENE_KINDS))]
    rotation = random_rotation(rng)
    scale = rng.uniform(0.8, 1.25, size=3)
    t = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                  rng.uniform(2.4, 3.0)])
    return SceneSpec(kind=kind, pose=Pose9(rotation, t, scale),
                     intrinsics=scene_intrinsics(image_size),
                     depth_sigma=depth_sigma, outlier_rate=outlier_rate,
                     mirror_eps=mirror_eps, seed=seed, patch=patch,
                     channels=channels)


def generate_scene(spec, root):
    """Render the scene and write the on-disk dataset layout.

    Produces features/depth/mask/intrinsics tensors, the mesh, a
    one-record samples.jsonl, and gt.json with the ground-truth pose.
    Returns (record, ground-truth pose). Bit-identical per spec.
    """
    root = pathlib.Path(root)
    mesh = make_mesh(spec.kind)
    out = rasterize(mesh, spec.pose, spec.intrinsics)
    rng = np.random.default_rng(spec.seed)

    depth = np.where(out.hard_mask, out.depth, 0.0)
    if spec.depth_sigma > 0:
        rows, cols = np.nonzero(out.hard_mask)
        depth[rows, cols] += rng.normal(0.0, spec.depth_sigma, size=len(rows))

    patch_noc = downsample_noc(out.noc, spec.patch)
    feats = oracle_features(patch_noc, OracleConfig(spec.channels, spec.mirror_eps))
    values = feats.values
    if spec.outlier_rate > 0:
        rows, cols = np.nonzero(feats.valid)
        hit = rng.random(len(rows)) < spec.outlier_rate
        junk = rng.standard_normal((int(hit.sum()), spec.channels))
        junk /= np.linalg.norm(junk, axis=1, keepdims=True)
        values[rows[hit], cols[hit]] = junk * math.sqrt(spec.channels / 2)

    for sub in ("features", "depth", "mask", "intrinsics", "meshes"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_tensor(root / "features" / f"{spec.image_id}.nten",
                 values.astype(np.float32))
    write_tensor(root / "depth" / f"{spec.image_id}.nten",
                 depth.astype(np.float32))
    write_tensor(root / "mask" / f"{spec.image_id}.nten",
                 out.hard_mask.astype(np.uint8))
    write_tensor(root / "intrinsics" / f"{spec.image_id}.nten",
                 spec.intrinsics.matrix().astype(np.float32))
    save_mesh(root / "meshes" / f"{spec.cad_id}.obj", mesh)

    record = SampleRecord(
        image_id=spec.image_id,
        feature_path=f"features/{spec.image_id}.nten",
        depth_path=f"depth/{spec.image_id}.nten",
        mask_path=f"mask/{spec.image_id}.nten",
        intrinsics_path=f"intrinsics/{spec.image_id}.nten",
        cad_id=spec.cad_id,
        confidence=spec.confidence,
        frame_group=spec.frame_group,
    )
    write_samples(root / "samples.jsonl", [record])
    gt = {
        "image_id": spec.image_id,
        "cad_id": spec.cad_id,
        "symmetry": "asym",
        "pose": spec.pose.to_dict(),
        "noise": {"depth_sigma": spec.depth_sigma,
                  "outlier_rate": spec.outlier_rate,
                  "mirror_eps": spec.mirror_eps},
        "seed": spec.seed,
        "patch": spec.patch,
        "channels": spec.channels,
    }
    (root / "gt.json").write_text(json.dumps(gt, indent=2, sort_keys=True))
    return record, spec.pose
