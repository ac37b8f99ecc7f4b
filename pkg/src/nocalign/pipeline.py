"""End-to-end alignment: one callable from sample tensors to a refined pose.

Per sample: encode and fuse the ingested patch features, match them
against the CAD model's voxel feature grid, lift matched patch centers
through the ingested depth map, solve a robust 9-DoF pose from the
3D-3D correspondences, then polish it with dense render-and-compare
refinement. CAD preparation renders orbit templates and accumulates
their fused features into the grid the matcher uses.
"""

import dataclasses
import time

import numpy as np

from .adapter import AdapterModel, FeatureMap, downsample_mask, encode, fuse
from .densealign import AlignObservation, LossTerms, RefineConfig, refine
from .fieldgrid import (TemplateView, VoxelFeatureGrid, build_grid,
                        filter_augmented, match, predict_noc, smooth_grid,
                        view_patch_noc)
from .geometry import (CameraIntrinsics, CorrespondenceSet, Pose9,
                       RansacConfig, backproject, ransac_pose)
from .renderer import OrbitSpec, render_templates
from .synth import OracleConfig, oracle_features
from .tensorio import NocMap, SampleRecord, SceneDataset, TriMesh


class StageError(RuntimeError):
    """An alignment stage failed; ``stage`` names the culprit."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    omega: float = 0.5
    min_correspondences: int = 4
    # cosine matches cool off roughly quadratically with coordinate error,
    # so a similarity ramp above sim_floor downweights the mixed patches
    # at silhouette and edge boundaries without discarding them outright
    sim_floor: float = 0.98
    sim_min_weight: float = 1e-3
    # minimal samples are isotropic fits, so on strongly anisotropic
    # objects even perfect correspondences sit decimeters from the best
    # hypothesis; a tight radius would evict the extent-carrying points
    ransac: RansacConfig = dataclasses.field(
        default_factory=lambda: RansacConfig(inlier_threshold=0.25))
    refine: RefineConfig = dataclasses.field(default_factory=RefineConfig)
    # 36 templates on a full sphere covering: orbits confined to the upper
    # hemisphere leave the underside unobserved, and any scene viewing the
    # object from below then matches garbage
    orbit: OrbitSpec = dataclasses.field(default_factory=lambda: OrbitSpec(
        elevations_deg=(-30.0, -10.0, 10.0, 30.0),
        azimuths_deg=tuple(float(a) for a in range(0, 360, 40))))
    template_size: int = 224
    patch: int = 1
    filter_threshold: float = 0.20
    smooth: bool = True
    # dense refinement compares rendered and observed images once per
    # finite-difference probe, so its cost scales with this resolution
    # squared; 112 keeps the loss surface intact at a fraction of the
    # full-image price, and 0 means refine at the native size
    refine_size: int = 112

    def __post_init__(self):
        if self.min_correspondences < 4:
            raise ValueError("pose solving needs at least 4 correspondences")
        if self.template_size % self.patch:
            raise ValueError("template size must be divisible by the patch")
        if not 0.0 <= self.sim_floor < 1.0:
            raise ValueError("sim_floor must lie in [0, 1)")
        if self.sim_min_weight <= 0:
            raise ValueError("sim_min_weight must be positive")
        if self.refine_size < 0:
            raise ValueError("refine_size must be non-negative")


@dataclasses.dataclass
class AlignmentResult:
    """Coarse and refined poses with the evidence that produced them."""

    coarse: Pose9 | None
    refined: Pose9 | None
    correspondence_count: int
    inlier_count: int
    coarse_loss: LossTerms | None
    refined_loss: LossTerms | None
    timings_ms: dict
    failure: str | None = None
    refine_trace: list | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None


def _lift_matches(pixels, depth, mask, patch, cam):
    """Camera-space point per matched patch: mean of its valid pixels.

    A patch feature summarizes the whole patch, so its camera-side
    anchor is the average of the back-projected valid pixels.  That
    average commutes with the rigid-plus-scale map, keeping it
    consistent with the patch-mean object coordinate the feature
    encodes; a lone surface pixel anywhere in the patch still lifts.
    Returns the points and the indices of matches with any valid depth.
    """
    valid = mask & (depth > 0) & np.isfinite(depth)
    pts, keep = [], []
    for k, (i, j) in enumerate(pixels):
        sl = np.s_[i * patch:(i + 1) * patch, j * patch:(j + 1) * patch]
        rr, cc = np.nonzero(valid[sl])
        if not len(rr):
            continue
        r, c = i * patch + rr, j * patch + cc
        p = backproject(c + 0.5, r + 0.5, depth[r, c], cam)
        pts.append(p.mean(axis=0))
        keep.append(k)
    if not keep:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return np.array(pts), np.array(keep, dtype=np.int64)


def align_sample(dataset: SceneDataset, sample: SampleRecord, mesh: TriMesh,
                 adapter: AdapterModel, grid: VoxelFeatureGrid,
                 cfg: PipelineConfig = PipelineConfig()) -> AlignmentResult:
    """Run the full alignment for one sample record.

    Deterministic for fixed inputs and config seeds. Fewer than
    ``min_correspondences`` usable matches yields a coarse-failure
    result rather than an exception; any stage blowing up is re-raised
    tagged with the stage name.
    """
    timings = {}

    def clock(stage, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:
            raise StageError(stage, exc) from exc
        timings[stage] = (time.perf_counter() - t0) * 1e3
        return out

    def load():
        feats = dataset.load_features(sample).astype(np.float64)
        depth = dataset.load_depth(sample).astype(np.float64)
        mask = dataset.load_mask(sample).astype(bool)
        k = dataset.load_intrinsics_matrix(sample)
        cam = CameraIntrinsics.from_matrix(k, depth.shape[1], depth.shape[0])
        if depth.shape[0] % feats.shape[0] or depth.shape[1] % feats.shape[1]:
            raise ValueError("image size is not a multiple of the feature grid")
        patch = depth.shape[0] // feats.shape[0]
        if patch != depth.shape[1] // feats.shape[1]:
            raise ValueError("feature patches are not square")
        return feats, depth, mask, cam, patch

    feats, depth, mask, cam, patch = clock("load", load)

    def encode_stage():
        raw = FeatureMap(feats, downsample_mask(mask, patch))
        return fuse(raw, encode(adapter, raw), cfg.omega)

    fused = clock("encode", encode_stage)
    matches = clock("match", lambda: match(grid, fused))
    cam_pts, kept = clock("lift", lambda: _lift_matches(
        matches.pixels, depth, mask, patch, cam))

    if len(kept) < cfg.min_correspondences:
        return AlignmentResult(
            coarse=None, refined=None, correspondence_count=int(len(kept)),
            inlier_count=0, coarse_loss=None, refined_loss=None,
            timings_ms=timings, failure="coarse")

    sim = matches.similarity[kept]
    weights = np.clip((sim - cfg.sim_floor) / (1.0 - cfg.sim_floor),
                      cfg.sim_min_weight, None)
    corr = CorrespondenceSet(matches.coords[kept], cam_pts, weights)
    coarse, inliers = clock("coarse", lambda: ransac_pose(corr, cfg.ransac))

    h, w = depth.shape
    factor = 1
    if cfg.refine_size and cfg.refine_size < h:
        if h % cfg.refine_size == 0 and w % (h // cfg.refine_size) == 0:
            factor = h // cfg.refine_size
    rh, rw = h // factor, w // factor

    def predict():
        noc = predict_noc(grid, fused, (rh, rw))
        return noc

    pred = clock("predict", predict)

    def refine_stage():
        if factor == 1:
            obs_mask, obs_depth, obs_cam = mask, depth, cam
        else:
            fg = (mask & (depth > 0)).reshape(rh, factor, rw, factor)
            cnt = fg.sum(axis=(1, 3))
            dsum = (depth.reshape(rh, factor, rw, factor) * fg).sum(axis=(1, 3))
            obs_depth = np.where(cnt > 0, dsum / np.maximum(cnt, 1), 0.0)
            obs_mask = mask.reshape(rh, factor, rw, factor).mean(axis=(1, 3)) >= 0.5
            # (u, v) carry the half-pixel offset already, so centers map
            # through plain division
            obs_cam = CameraIntrinsics(cam.fx / factor, cam.fy / factor,
                                       cam.cx / factor, cam.cy / factor,
                                       rw, rh)
        obs = AlignObservation(noc=NocMap(pred.values, pred.valid & obs_mask),
                               mask=obs_mask.astype(np.uint8),
                               depth=obs_depth, intrinsics=obs_cam)
        return refine(obs, mesh, coarse, cfg.refine)

    result = clock("refine", refine_stage)
    return AlignmentResult(
        coarse=coarse, refined=result.pose,
        correspondence_count=len(corr), inlier_count=int(len(inliers)),
        coarse_loss=result.trace[0].terms,
        refined_loss=result.trace[result.best_step].terms,
        timings_ms=timings, refine_trace=result.trace)


def _fused_template(raw: FeatureMap, zbuffer, extrinsics, intrinsics, kind,
                    adapter: AdapterModel, omega: float) -> TemplateView:
    fused = fuse(raw, encode(adapter, raw), omega)
    return TemplateView(features=fused, zbuffer=zbuffer,
                        extrinsics=extrinsics, intrinsics=intrinsics,
                        kind=kind)


def prepare_cad(mesh: TriMesh, adapter: AdapterModel,
                bridge_features: list | None = None,
                augmented: list | None = None,
                cfg: PipelineConfig = PipelineConfig()) -> VoxelFeatureGrid:
    """Build the voxel feature grid for one CAD model.

    Renders the orbit templates and lifts their fused features into the
    grid. Raw per-template features come from ``bridge_features`` when
    given (one FeatureMap per orbit view, in order) and otherwise from
    the synthetic oracle encoder. Augmented views are filtered against a
    rendered-only reference grid before they may contribute. The result
    is smoothed unless ``cfg.smooth`` is off; smoothing trades coarse
    pose precision for tolerance to feature corruption, so precision
    benchmarks want it disabled.
    """
    tset = render_templates(mesh, cfg.orbit, image_size=cfg.template_size)
    if bridge_features is not None and len(bridge_features) != len(tset.outputs):
        raise ValueError(f"{len(bridge_features)} feature maps for "
                         f"{len(tset.outputs)} template views")

    side = cfg.template_size // cfg.patch
    rendered = []
    for i, (out, ext) in enumerate(zip(tset.outputs, tset.extrinsics)):
        zbuffer = np.where(out.noc.valid, out.depth, np.inf)
        patch_valid = downsample_mask(out.noc.valid, cfg.patch)
        if bridge_features is not None:
            raw = bridge_features[i]
        else:
            shell = TemplateView(
                features=FeatureMap(
                    np.zeros((side, side, adapter.in_channels), dtype=np.float32),
                    patch_valid),
                zbuffer=zbuffer, extrinsics=ext, intrinsics=tset.intrinsics,
                kind="rendered")
            raw = oracle_features(view_patch_noc(shell),
                                  OracleConfig(channels=adapter.in_channels))
        rendered.append(_fused_template(raw, zbuffer, ext, tset.intrinsics,
                                        "rendered", adapter, cfg.omega))

    reference = build_grid(rendered)
    grid = reference
    if augmented:
        fused_aug = [_fused_template(v.features, v.zbuffer, v.extrinsics,
                                     v.intrinsics, "augmented", adapter,
                                     cfg.omega)
                     for v in augmented]
        kept = filter_augmented(fused_aug, reference, cfg.filter_threshold)
        if kept:
            grid = build_grid(rendered + kept)
    return smooth_grid(grid) if cfg.smooth else grid
