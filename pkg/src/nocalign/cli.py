"""Operator surface: one binary covering the full workflow.

Every subcommand accepts ``--config FILE`` (JSON whose keys mirror the
long flag names with dashes as underscores); explicit flags win over
config values, and the fully resolved parameters land next to the
outputs in ``manifest.json`` so a run can be reproduced from its
artifacts alone. Failures remove partial outputs and exit nonzero.
"""

import dataclasses
import json
import os
import pathlib
import shutil

import click
import numpy as np

from .adapter import (FeatureMap, MiningConfig, TrainConfig, downsample_mask,
                      downsample_noc, load_adapter, save_adapter,
                      train_adapter)
from .densealign import LossTerms, RefineConfig, TraceStep
from .evaluation import (EvalRecord, ReportEntry, nms_accuracy, report,
                         single_view_accuracy)
from .fieldgrid import load_grid, save_grid
from .geometry import CameraIntrinsics, Pose9, RansacConfig
from .pipeline import PipelineConfig, align_sample, prepare_cad
from .renderer import OrbitSpec, rasterize, render_templates
from .synth import SCENE_KINDS, SceneSpec, generate_scene, random_scene
from .tensorio import (SceneDataset, load_mesh, read_tensor, write_tensor)


@click.group()
def main():
    """9-DoF CAD-to-image alignment toolkit."""


def _resolve(ctx, config_path, values):
    """Merge config-file entries under explicit flags.

    A parameter keeps its command-line value when the user typed it;
    otherwise a config entry overrides the built-in default.
    """
    merged = dict(values)
    if config_path:
        cfg = json.loads(pathlib.Path(config_path).read_text())
        unknown = set(cfg) - set(values)
        if unknown:
            raise click.ClickException(
                f"unknown config keys {sorted(unknown)} in {config_path}")
        for key, val in cfg.items():
            src = ctx.get_parameter_source(key)
            if src is not None and src.name == "DEFAULT":
                merged[key] = val
    return merged


def _write_manifest(out_dir, command, params, extra=None):
    doc = {"command": command,
           "params": {k: v for k, v in sorted(params.items())}}
    if extra:
        doc.update(extra)
    path = pathlib.Path(out_dir) / "manifest.json"
    if path.exists():
        # checkpoint writers own this file; fold provenance in alongside
        doc = {**json.loads(path.read_text()), **doc}
    path.write_text(
        json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


class _fresh_dir:
    """Create the output directory; remove it again if the body fails."""

    def __init__(self, path):
        self.path = pathlib.Path(path)

    def __enter__(self):
        self.existed = self.path.exists()
        self.path.mkdir(parents=True, exist_ok=True)
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and not self.existed:
            shutil.rmtree(self.path, ignore_errors=True)
        return False


def _jobs_value(jobs):
    if jobs is not None:
        return max(1, jobs)
    env = os.environ.get("NOCALIGN_JOBS", "").strip()
    return max(1, int(env)) if env else 1


_config_option = click.option(
    "--config", type=click.Path(exists=True, dir_okay=False), default=None,
    help="JSON file whose keys mirror the long flag names.")


# synth-gen


@main.command("synth-gen")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="JSON scene list or generator parameters.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_config_option
@click.pass_context
def synth_gen(ctx, spec_path, out_dir, seed, config):
    """Generate synthetic scene datasets from a spec file.

    The spec either enumerates scenes (key "scenes": a list of per-scene
    overrides) or describes a batch (key "count" plus shared settings:
    kinds, image_size, patch, channels, depth_sigma, outlier_rate,
    mirror_eps). Scene i uses seed + i.
    """
    params = _resolve(ctx, config, dict(spec=spec_path, out=out_dir, seed=seed))
    doc = json.loads(pathlib.Path(spec_path).read_text())
    shared = {k: doc[k] for k in ("image_size", "patch", "channels",
                                  "depth_sigma", "outlier_rate", "mirror_eps")
              if k in doc}
    if "scenes" in doc:
        scenes = [{**shared, **entry} for entry in doc["scenes"]]
    elif "count" in doc:
        kinds = doc.get("kinds", list(SCENE_KINDS))
        scenes = [{**shared, "kind": kinds[i % len(kinds)]}
                  for i in range(int(doc["count"]))]
    else:
        raise click.ClickException(
            f"--spec {spec_path} needs a 'scenes' list or a 'count'")

    with _fresh_dir(out_dir) as out:
        ids = []
        for i, entry in enumerate(scenes):
            entry = dict(entry)
            scene_seed = int(entry.pop("seed", params["seed"] + i))
            base = random_scene(scene_seed, kind=entry.pop("kind", None),
                                image_size=entry.pop("image_size", 448),
                                patch=entry.pop("patch", 14),
                                channels=entry.pop("channels", 64))
            spec = dataclasses.replace(base, **entry) if entry else base
            record, _ = generate_scene(spec, out / spec.image_id)
            ids.append(record.image_id)
        _write_manifest(out, "synth-gen", params,
                        {"scenes": ids, "spec_document": doc})
    click.echo(f"wrote {len(ids)} scenes to {out_dir}")


# render-templates


def _orbit_for(views, seed):
    """Evenly factor the requested view count into elevation rings."""
    for rings, elevs in ((4, (-30.0, -10.0, 10.0, 30.0)),
                         (3, (-20.0, 10.0, 40.0)),
                         (2, (-15.0, 15.0))):
        if views % rings == 0 and views >= rings * 2:
            step = 360.0 / (views // rings)
            return OrbitSpec(elevations_deg=elevs,
                             azimuths_deg=tuple(i * step for i in range(views // rings)),
                             seed=seed)
    return OrbitSpec(elevations_deg=(20.0,),
                     azimuths_deg=tuple(i * 360.0 / views for i in range(views)),
                     seed=seed)


@main.command("render-templates")
@click.option("--mesh", "mesh_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--views", type=int, default=36, show_default=True)
@click.option("--size", type=int, default=224, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_config_option
@click.pass_context
def render_templates_cmd(ctx, mesh_path, out_dir, views, size, seed, config):
    """Render orbit template tensors for one CAD mesh."""
    params = _resolve(ctx, config, dict(
        mesh=mesh_path, out=out_dir, views=views, size=size, seed=seed))
    mesh = load_mesh(mesh_path)
    orbit = _orbit_for(params["views"], params["seed"])
    with _fresh_dir(out_dir) as out:
        tset = render_templates(mesh, orbit, image_size=params["size"])
        for i, (view, ext) in enumerate(zip(tset.outputs, tset.extrinsics)):
            vdir = out / f"view_{i:03d}"
            vdir.mkdir(exist_ok=True)
            write_tensor(vdir / "noc.nten", view.noc.values.astype(np.float32))
            write_tensor(vdir / "mask.nten",
                         view.noc.valid.astype(np.uint8))
            write_tensor(vdir / "depth.nten",
                         np.where(np.isfinite(view.depth), view.depth,
                                  0.0).astype(np.float32))
            pose = np.eye(4, dtype=np.float32)
            pose[:3, :3] = ext.rotation
            pose[:3, 3] = ext.translation
            write_tensor(vdir / "extrinsics.nten", pose)
        write_tensor(out / "intrinsics.nten",
                     tset.intrinsics.matrix().astype(np.float32))
        _write_manifest(out, "render-templates", params, {
            "mesh_name": pathlib.Path(mesh_path).stem,
            "orbit": dataclasses.asdict(orbit),
        })
    click.echo(f"rendered {params['views']} templates to {out_dir}")


# train-adapter


def _dataset_roots(data_dir):
    data_dir = pathlib.Path(data_dir)
    if (data_dir / "samples.jsonl").is_file():
        return [data_dir]
    roots = sorted(p.parent for p in data_dir.glob("*/samples.jsonl"))
    if not roots:
        raise click.ClickException(f"no samples.jsonl under {data_dir}")
    return roots


def _training_pairs(roots):
    """(raw features, patch NOC) pairs; supervision re-rendered from GT."""
    pairs = []
    for root in roots:
        ds = SceneDataset.open(root)
        gt = json.loads((root / "gt.json").read_text())
        pose = Pose9.from_dict(gt["pose"])
        for rec in ds.records:
            feats = ds.load_features(rec).astype(np.float64)
            mask = ds.load_mask(rec).astype(bool)
            patch = mask.shape[0] // feats.shape[0]
            mesh = load_mesh(root / "meshes" / f"{rec.cad_id}.obj")
            cam = CameraIntrinsics.from_matrix(
                ds.load_intrinsics_matrix(rec), mask.shape[1], mask.shape[0])
            out = rasterize(mesh, pose, cam)
            pairs.append((FeatureMap(feats, downsample_mask(mask, patch)),
                          downsample_noc(out.noc, patch)))
    return pairs


@main.command("train-adapter")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--beta", type=float, default=0.1, show_default=True)
@click.option("--omega", type=float, default=0.5, show_default=True)
@click.option("--lr", type=float, default=3e-4, show_default=True)
@click.option("--batch", type=int, default=140, show_default=True)
@click.option("--steps", type=int, default=1000, show_default=True)
@click.option("--hidden", type=int, default=512, show_default=True)
@click.option("--enc-channels", type=int, default=256, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_config_option
@click.pass_context
def train_adapter_cmd(ctx, data_dir, out_dir, beta, omega, lr, batch, steps,
                      hidden, enc_channels, seed, config):
    """Train the feature adapter on generated scenes."""
    params = _resolve(ctx, config, dict(
        data=data_dir, out=out_dir, beta=beta, omega=omega, lr=lr,
        batch=batch, steps=steps, hidden=hidden,
        enc_channels=enc_channels, seed=seed))
    pairs = _training_pairs(_dataset_roots(data_dir))
    cfg = TrainConfig(mining=MiningConfig(beta=params["beta"]),
                      hidden=params["hidden"],
                      enc_channels=params["enc_channels"], lr=params["lr"],
                      batch_size=params["batch"], steps=params["steps"],
                      seed=params["seed"])
    with _fresh_dir(out_dir) as out:
        model, curve = train_adapter(pairs, cfg)
        save_adapter(out, model, cfg, extra={"omega": params["omega"]})
        lines = ["step,total,noc,triplet"]
        lines += [f"{c['step']},{c['total']:.8f},{c['noc']:.8f},"
                  f"{c['triplet']:.8f}" for c in curve]
        (out / "loss.csv").write_text("\n".join(lines) + "\n")
        _write_manifest(out, "train-adapter", params,
                        {"pairs": len(pairs),
                         "final_loss": curve[-1]["total"] if curve else None})
    click.echo(f"trained adapter on {len(pairs)} maps, checkpoint in {out_dir}")


# build-grid


@main.command("build-grid")
@click.option("--mesh", "mesh_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--templates", "templates_dir",
              type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--adapter", "adapter_dir",
              type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--filter-threshold", type=float, default=0.20, show_default=True)
@click.option("--smooth/--no-smooth", default=True, show_default=True)
@_config_option
@click.pass_context
def build_grid_cmd(ctx, mesh_path, templates_dir, adapter_dir, out_dir,
                   filter_threshold, smooth, config):
    """Accumulate template features into a voxel grid checkpoint.

    The template directory fixes the orbit and image size; per-view
    ``features.nten`` files (bridge outputs) are used as raw features
    when present, the synthetic oracle encoder otherwise.
    """
    params = _resolve(ctx, config, dict(
        mesh=mesh_path, templates=templates_dir, adapter=adapter_dir,
        out=out_dir, filter_threshold=filter_threshold, smooth=smooth))
    mesh = load_mesh(mesh_path)
    model, model_meta = load_adapter(adapter_dir)
    tman = json.loads(
        (pathlib.Path(templates_dir) / "manifest.json").read_text())
    orbit = OrbitSpec(**{k: tuple(v) if isinstance(v, list) else v
                         for k, v in tman["orbit"].items()})
    omega = float(model_meta.get("omega", 0.5))

    view_dirs = sorted(pathlib.Path(templates_dir).glob("view_*"))
    bridge = []
    for vdir in view_dirs:
        fpath = vdir / "features.nten"
        if fpath.is_file():
            values = read_tensor(fpath).astype(np.float64)
            valid = read_tensor(vdir / "mask.nten").astype(bool)
            patch = valid.shape[0] // values.shape[0]
            bridge.append(FeatureMap(values, downsample_mask(valid, patch)))
    if bridge and len(bridge) != len(view_dirs):
        raise click.ClickException(
            f"{len(bridge)} of {len(view_dirs)} template views carry "
            f"features.nten; need all or none")

    size = tman["params"]["size"]
    # bridge features fix the patch granularity; the oracle is per-pixel
    patch = size // bridge[0].values.shape[0] if bridge else 1
    cfg = PipelineConfig(omega=omega, orbit=orbit, template_size=size,
                         patch=patch,
                         filter_threshold=params["filter_threshold"],
                         smooth=params["smooth"])
    with _fresh_dir(out_dir) as out:
        grid = prepare_cad(mesh, model, bridge_features=bridge or None,
                           cfg=cfg)
        save_grid(out, grid, meta={"cad_id": pathlib.Path(mesh_path).stem,
                                   "omega": omega,
                                   "bridge_features": bool(bridge)})
        _write_manifest(out, "build-grid", params,
                        {"occupied": int(grid.occupancy.sum())})
    click.echo(f"grid checkpoint in {out_dir}")


# align


def _pose_dict(pose):
    return None if pose is None else pose.to_dict()


def _terms_dict(terms):
    if terms is None:
        return None
    return {"total": terms.total, "noc": terms.noc, "mask": terms.mask,
            "depth": terms.depth, "overlap": terms.overlap}


_WORKER_CACHE = {}


def _cached(kind, path, loader):
    key = (kind, str(path))
    if key not in _WORKER_CACHE:
        _WORKER_CACHE[key] = loader(path)
    return _WORKER_CACHE[key]


def _align_one(root, image_id, grid_path, adapter_path, cfg):
    ds = SceneDataset.open(root)
    rec = next(r for r in ds.records if r.image_id == image_id)
    mesh = load_mesh(pathlib.Path(root) / "meshes" / f"{rec.cad_id}.obj")
    grid, _ = _cached("grid", grid_path, load_grid)
    model, model_meta = _cached("adapter", adapter_path, load_adapter)
    cfg = dataclasses.replace(cfg, omega=float(model_meta.get("omega", 0.5)))
    result = align_sample(ds, rec, mesh, model, grid, cfg)
    doc = {
        "image_id": rec.image_id,
        "cad_id": rec.cad_id,
        "frame_group": rec.frame_group,
        "confidence": rec.confidence,
        "ok": result.ok,
        "failure": result.failure,
        "coarse": _pose_dict(result.coarse),
        "refined": _pose_dict(result.refined),
        "correspondence_count": result.correspondence_count,
        "inlier_count": result.inlier_count,
        "coarse_loss": _terms_dict(result.coarse_loss),
        "refined_loss": _terms_dict(result.refined_loss),
        "timings_ms": {k: round(v, 3) for k, v in result.timings_ms.items()},
    }
    if result.refine_trace is not None:
        doc["trace"] = [{"step": s.step, **_terms_dict(s.terms)}
                        for s in result.refine_trace]
    return doc


def _align_worker(task):
    root, image_id, grid_path, adapter_path, cfg = task
    return _align_one(root, image_id, grid_path, adapter_path, cfg)


@main.command("align")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--grid", "grid_dir", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--adapter", "adapter_dir",
              type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--sample", default="all", show_default=True,
              help="Image id to align, or 'all'.")
@click.option("--no-refine", is_flag=True, default=False)
@click.option("--ransac-threshold", type=float, default=0.25, show_default=True)
@click.option("--steps", type=int, default=200, show_default=True)
@click.option("--jobs", type=int, default=None,
              help="Parallel samples; NOCALIGN_JOBS is the fallback.")
@_config_option
@click.pass_context
def align_cmd(ctx, data_dir, grid_dir, adapter_dir, out_dir, sample,
              no_refine, ransac_threshold, steps, jobs, config):
    """Align samples against a prepared grid; one JSON result each."""
    params = _resolve(ctx, config, dict(
        data=data_dir, grid=grid_dir, adapter=adapter_dir, out=out_dir,
        sample=sample, no_refine=no_refine,
        ransac_threshold=ransac_threshold, steps=steps, jobs=jobs))
    jobs_n = _jobs_value(params["jobs"])
    cfg = PipelineConfig(
        ransac=RansacConfig(inlier_threshold=params["ransac_threshold"]),
        refine=RefineConfig(steps=0 if params["no_refine"]
                            else params["steps"]))

    tasks = []
    for root in _dataset_roots(data_dir):
        for rec in SceneDataset.open(root).records:
            if params["sample"] in ("all", rec.image_id):
                tasks.append((str(root), rec.image_id, grid_dir, adapter_dir,
                              cfg))
    if not tasks:
        raise click.ClickException(
            f"no sample {params['sample']!r} under {data_dir}")

    with _fresh_dir(out_dir) as out:
        if jobs_n == 1:
            docs = [_align_worker(t) for t in tasks]
        else:
            import concurrent.futures
            with concurrent.futures.ProcessPoolExecutor(jobs_n) as pool:
                docs = list(pool.map(_align_worker, tasks))
        for doc in docs:
            (out / f"{doc['image_id']}.json").write_text(
                json.dumps(doc, indent=2, sort_keys=True) + "\n")
        _write_manifest(out, "align", {**params, "jobs": jobs_n},
                        {"samples": [d["image_id"] for d in docs],
                         "failures": [d["image_id"] for d in docs
                                      if not d["ok"]]})
    ok = sum(d["ok"] for d in docs)
    click.echo(f"aligned {ok}/{len(docs)} samples into {out_dir}")


# eval


def _gt_index(gt_dir):
    index = {}
    for root in _dataset_roots(gt_dir):
        gt = json.loads((root / "gt.json").read_text())
        index[gt["image_id"]] = (root, gt)
    return index


@main.command("eval")
@click.option("--results", "results_dir",
              type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--gt", "gt_dir", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--metric", type=click.Choice(["single", "nms"]),
              default="single", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
@_config_option
@click.pass_context
def eval_cmd(ctx, results_dir, gt_dir, metric, out_dir, figures, config):
    """Score alignment results against ground truth and emit the report."""
    params = _resolve(ctx, config, dict(
        results=results_dir, gt=gt_dir, metric=metric, out=out_dir,
        figures=figures))
    index = _gt_index(gt_dir)
    entries = []
    skipped = []
    for path in sorted(pathlib.Path(results_dir).glob("*.json")):
        if path.name == "manifest.json":
            continue
        doc = json.loads(path.read_text())
        if doc["image_id"] not in index:
            raise click.ClickException(
                f"{path} has no ground truth under {gt_dir}")
        root, gt = index[doc["image_id"]]
        pose = doc.get("refined") or doc.get("coarse")
        if pose is None:
            skipped.append(doc["image_id"])
            continue
        record = EvalRecord(
            sample_id=doc["image_id"], category=doc["cad_id"],
            frame_group=doc["frame_group"], confidence=doc["confidence"],
            predicted=Pose9.from_dict(pose),
            truth=Pose9.from_dict(gt["pose"]),
            symmetry=gt.get("symmetry", "asym"))
        entry = ReportEntry(record=record)
        if params["figures"]:
            ds = SceneDataset.open(root)
            rec = next(r for r in ds.records
                       if r.image_id == doc["image_id"])
            entry.mask = ds.load_mask(rec).astype(bool)
            entry.intrinsics = CameraIntrinsics.from_matrix(
                ds.load_intrinsics_matrix(rec), entry.mask.shape[1],
                entry.mask.shape[0])
            entry.mesh = load_mesh(
                pathlib.Path(root) / "meshes" / f"{rec.cad_id}.obj")
            if doc.get("trace"):
                entry.trace = [
                    TraceStep(step=t["step"],
                              terms=LossTerms(total=t["total"], noc=t["noc"],
                                              mask=t["mask"],
                                              depth=t["depth"],
                                              overlap=t["overlap"]),
                              pose=None)
                    for t in doc["trace"]]
        entries.append(entry)
    if not entries:
        raise click.ClickException(f"no scorable results in {results_dir}")

    records = [e.record for e in entries]
    accuracy = (nms_accuracy(records) if params["metric"] == "nms"
                else single_view_accuracy(records))
    with _fresh_dir(out_dir) as out:
        report(entries, out)
        _write_manifest(out, "eval", params, {
            "scored": len(entries), "skipped_failures": skipped,
            "category_avg": accuracy.category_avg,
            "instance_avg": accuracy.instance_avg,
        })
    click.echo(f"{params['metric']} accuracy: category {accuracy.category_avg:.1f} "
               f"instance {accuracy.instance_avg:.1f} ({out_dir}/metrics.csv)")


if __name__ == "__main__":
    main()
