"""Benchmark metrics and report emission.

A prediction is accurate when translation, rotation, and scale errors
all pass the 20 cm / 20 deg / 20% thresholds inclusively, with rotation
minimized over the object's symmetry class. Accuracies aggregate two
ways: the instance average is the plain rate over records, the category
average first averages within each category. Multi-frame groups reduce
to their most confident prediction before scoring.

``report`` writes the per-category table as CSV plus optional per-sample
mask-vs-silhouette overlays (PNG) and refinement loss traces (SVG). All
outputs are byte-stable for fixed inputs.
"""

import csv
import dataclasses
import io
import pathlib

import numpy as np

from .geometry import SYMMETRY_CLASSES, CameraIntrinsics, Pose9, pose_errors
from .renderer import rasterize
from .tensorio import TriMesh

ACCURACY_THRESHOLDS = (0.20, 20.0, 20.0)  # meters, degrees, percent

CSV_COLUMNS = ("category", "n", "acc_single", "acc_nms",
               "t_err_mean", "r_err_mean", "s_err_mean")


@dataclasses.dataclass(frozen=True)
class EvalRecord:
    """One scored prediction against its ground truth."""

    sample_id: str
    category: str
    frame_group: str
    confidence: float
    predicted: Pose9
    truth: Pose9
    symmetry: str = "asym"

    def __post_init__(self):
        if self.symmetry not in SYMMETRY_CLASSES:
            raise ValueError(
                f"unknown symmetry class {self.symmetry!r}; "
                f"expected one of {SYMMETRY_CLASSES}")


@dataclasses.dataclass(frozen=True)
class Accuracy:
    """Percent accuracies: per category, their mean, and the plain rate."""

    per_category: dict
    category_avg: float
    instance_avg: float


def is_accurate(record: EvalRecord) -> bool:
    e = pose_errors(record.predicted, record.truth, record.symmetry)
    t, r, s = ACCURACY_THRESHOLDS
    return e.translation_m <= t and e.rotation_deg <= r and e.scale_pct <= s


def single_view_accuracy(records) -> Accuracy:
    """Score every record independently.

    The category average weights each category equally regardless of
    its record count; categories with no records simply do not appear.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to score")
    hits = {}
    for rec in records:
        hits.setdefault(rec.category, []).append(is_accurate(rec))
    per_cat = {c: 100.0 * np.mean(h) for c, h in sorted(hits.items())}
    instance = 100.0 * np.mean([h for hs in hits.values() for h in hs])
    return Accuracy(per_cat, float(np.mean(list(per_cat.values()))),
                    float(instance))


def select_max_confidence(records) -> list:
    """One record per frame group: highest confidence, ties to the
    lowest sample id. Output preserves input order."""
    best = {}
    for rec in records:
        cur = best.get(rec.frame_group)
        if (cur is None or rec.confidence > cur.confidence
                or (rec.confidence == cur.confidence
                    and rec.sample_id < cur.sample_id)):
            best[rec.frame_group] = rec
    chosen = set(id(rec) for rec in best.values())
    return [rec for rec in records if id(rec) in chosen]


def nms_accuracy(records) -> Accuracy:
    return single_view_accuracy(select_max_confidence(records))


@dataclasses.dataclass
class ReportEntry:
    """A record plus whatever optional evidence its figures need."""

    record: EvalRecord
    mask: np.ndarray | None = None
    intrinsics: CameraIntrinsics | None = None
    mesh: TriMesh | None = None
    trace: list | None = None


_MASK_COLOR = np.array([70, 160, 90], dtype=np.uint16)
_SILHOUETTE_COLOR = np.array([200, 60, 60], dtype=np.uint16)


def overlay_image(mask: np.ndarray, mesh: TriMesh, pose: Pose9,
                  cam: CameraIntrinsics) -> np.ndarray:
    """Observed mask in green, predicted silhouette in red; overlap adds."""
    sil = rasterize(mesh, pose, cam).hard_mask
    img = np.zeros(mask.shape + (3,), dtype=np.uint16)
    img[mask.astype(bool)] += _MASK_COLOR
    img[sil] += _SILHOUETTE_COLOR
    return np.minimum(img, 255).astype(np.uint8)


def _trace_figure(trace):
    from matplotlib.figure import Figure
    fig = Figure(figsize=(5.0, 3.2))
    ax = fig.add_subplot()
    steps = [s.step for s in trace]
    ax.plot(steps, [s.terms.total for s in trace], label="total", lw=1.6)
    ax.plot(steps, [s.terms.noc for s in trace], label="noc", lw=0.9)
    ax.plot(steps, [s.terms.mask for s in trace], label="mask", lw=0.9)
    ax.plot(steps, [s.terms.depth for s in trace], label="depth", lw=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return fig


def _write_svg(fig, path):
    import matplotlib
    matplotlib.rcParams["svg.hashsalt"] = "nocalign"
    # a created-date stamp would break byte stability
    fig.savefig(path, format="svg", metadata={"Date": None})


def report(entries, sink) -> list:
    """Emit metrics.csv plus per-sample figures under ``sink``.

    Overlays require mask, mesh, and intrinsics on an entry; loss traces
    require the refinement trace. Entries missing those get no figure.
    Returns the written paths in a fixed order.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("nothing to report")
    sink = pathlib.Path(sink)
    sink.mkdir(parents=True, exist_ok=True)
    records = [e.record for e in entries]
    single = single_view_accuracy(records)
    nms = nms_accuracy(records)

    errs = {}
    for rec in records:
        e = pose_errors(rec.predicted, rec.truth, rec.symmetry)
        errs.setdefault(rec.category, []).append(
            (e.translation_m, e.rotation_deg, e.scale_pct))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for cat in sorted(errs):
        t, r, s = np.mean(errs[cat], axis=0)
        writer.writerow([
            cat, len(errs[cat]),
            f"{single.per_category[cat]:.1f}",
            f"{nms.per_category.get(cat, float('nan')):.1f}",
            f"{t:.4f}", f"{r:.2f}", f"{s:.2f}"])
    csv_path = sink / "metrics.csv"
    csv_path.write_text(buf.getvalue())
    written = [csv_path]

    from PIL import Image
    for entry in entries:
        rec = entry.record
        if entry.mask is not None and entry.mesh is not None \
                and entry.intrinsics is not None:
            (sink / "overlays").mkdir(exist_ok=True)
            img = overlay_image(entry.mask, entry.mesh, rec.predicted,
                                entry.intrinsics)
            path = sink / "overlays" / f"{rec.sample_id}.png"
            Image.fromarray(img).save(path)
            written.append(path)
        if entry.trace:
            (sink / "traces").mkdir(exist_ok=True)
            path = sink / "traces" / f"{rec.sample_id}.svg"
            _write_svg(_trace_figure(entry.trace), path)
            written.append(path)
    return written
