"""Binary tensor container, triangle mesh loading, and on-disk dataset layout.

The tensor container is a deliberately tiny format: a fixed 8-byte prefix
(magic ``NTEN``, version, dtype code, rank, one pad byte), then one u64
extent per dimension, then the row-major little-endian payload.  Everything
downstream (features, depth, masks, intrinsics, checkpoints) goes through
these two functions, so round-trips must be bit-exact, NaN payloads
included.

A dataset directory looks like::

    scene/
      features/<image_id>.nten     h x w x C float32 patch features
      depth/<image_id>.nten        H x W float32, meters
      mask/<image_id>.nten         H x W uint8, {0, 1}
      intrinsics/<image_id>.nten   3 x 3 float32
      meshes/<cad_id>.obj
      samples.jsonl                one SampleRecord per line

``samples.jsonl`` keys: image_id, feature_path, depth_path, mask_path,
intrinsics_path, cad_id, confidence, frame_group.  Paths are relative to
the scene directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NTEN"
VERSION = 1

# dtype code <-> numpy dtype, all little-endian on disk
_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<u2")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.uint8): 2, np.dtype(np.uint16): 3}


class TensorFormatError(ValueError):
    """Bad magic, version, dtype code, rank, or extents."""


class TensorLengthError(ValueError):
    """Payload byte count disagrees with the declared extents."""


class MeshFormatError(ValueError):
    """OBJ line that cannot be interpreted under the supported subset."""


class UnsupportedFaceError(MeshFormatError):
    """Face with a vertex count other than three."""


class MeshIndexError(MeshFormatError):
    """Face references a vertex that does not exist."""


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """Serialize ``array`` (float32, uint8, or uint16) to ``path``.

    Rank must be at least one and every extent at least one; scalars and
    zero-length axes are rejected rather than given a silent encoding.
    """
    array = np.asarray(array)
    code = _DTYPE_TO_CODE.get(array.dtype)
    if code is None:
        raise TensorFormatError(f"unsupported dtype {array.dtype}; expected float32, uint8, or uint16")
    if array.ndim < 1:
        raise TensorFormatError("rank-0 tensors are not representable")
    if array.ndim > 255:
        raise TensorFormatError(f"rank {array.ndim} exceeds the u8 rank field")
    if any(e < 1 for e in array.shape):
        raise TensorFormatError(f"zero-length extent in shape {array.shape}")

    header = MAGIC + struct.pack("<BBBB", VERSION, code, array.ndim, 0)
    extents = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array).astype(array.dtype.newbyteorder("<"), copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(extents)
        fh.write(payload)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor written by :func:`write_tensor`, validating the header."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise TensorFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, code, ndim, pad = struct.unpack("<BBBB", blob[4:8])
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    if ndim < 1:
        raise TensorFormatError(f"{path}: rank must be at least 1")
    if pad != 0:
        raise TensorFormatError(f"{path}: nonzero pad byte {pad}")
    offset = 8 + 8 * ndim
    if len(blob) < offset:
        raise TensorFormatError(f"{path}: truncated extents")
    shape = struct.unpack(f"<{ndim}Q", blob[8:offset])
    if any(e < 1 for e in shape):
        raise TensorFormatError(f"{path}: zero-length extent in {shape}")
    dtype = _CODE_TO_DTYPE[code]
    expected = dtype.itemsize * int(np.prod(shape))
    actual = len(blob) - offset
    if actual != expected:
        raise TensorLengthError(f"{path}: payload is {actual} bytes, extents require {expected}")
    data = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    return data.reshape(shape).copy()


@dataclass
class TriMesh:
    """Triangle mesh with vertices normalized into the unit cube.

    ``vertices`` are float64 (n, 3) canonical coordinates in [0, 1]^3,
    ``faces`` int64 (m, 3) zero-based vertex indices.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshFormatError(f"vertices must be (n, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshFormatError(f"faces must be (m, 3), got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshIndexError("face index out of range")


def normalize_mesh(vertices: np.ndarray, faces: np.ndarray) -> TriMesh:
    """Center the bounding box at (0.5, 0.5, 0.5) with longest side exactly 1."""
    vertices = np.asarray(vertices, dtype=np.float64)
    lo = vertices.min(axis=0)
    hi = vertices.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise MeshFormatError("mesh has zero spatial extent")
    center = (lo + hi) / 2.0
    return TriMesh((vertices - center) / extent + 0.5, faces)


def load_mesh(path: str | Path) -> TriMesh:
    """Load a Wavefront OBJ, keeping only ``v`` and triangular ``f`` lines.

    Face indices are 1-based; ``a/b/c`` slash groups contribute only their
    leading vertex index.  Any other line kind is ignored.  The result is
    normalized into the unit cube.
    """
    vertices = []
    faces = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: vertex needs three coordinates")
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                refs = parts[1:]
                if len(refs) != 3:
                    raise UnsupportedFaceError(
                        f"{path}:{lineno}: face has {len(refs)} vertices, only triangles are supported"
                    )
                idx = []
                for ref in refs:
                    head = ref.split("/")[0]
                    one_based = int(head)
                    if one_based < 1:
                        raise MeshIndexError(f"{path}:{lineno}: vertex index {one_based} must be positive")
                    idx.append(one_based - 1)
                faces.append(idx)
    if not vertices:
        raise MeshFormatError(f"{path}: no vertices")
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and faces.max() >= len(vertices):
        raise MeshIndexError(f"{path}: face references vertex {int(faces.max()) + 1} of {len(vertices)}")
    return normalize_mesh(vertices, faces)


def save_mesh(path: str | Path, mesh: TriMesh) -> None:
    """Write a minimal OBJ (``v`` and ``f`` lines only)."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


@dataclass
class NocMap:
    """Per-pixel canonical coordinates with a validity plane.

    ``values`` is (H, W, 3) float64 in [0, 1] where valid; invalid pixels
    hold zeros and must be ignored by consumers.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ValueError(f"values must be (H, W, 3), got {self.values.shape}")
        if self.valid.shape != self.values.shape[:2]:
            raise ValueError(f"valid plane {self.valid.shape} does not match {self.values.shape[:2]}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


@dataclass
class SampleRecord:
    """One alignment task: an image's tensors plus the CAD model to place."""

    image_id: str
    feature_path: str
    depth_path: str
    mask_path: str
    intrinsics_path: str
    cad_id: str
    confidence: float
    frame_group: str

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        return cls(**json.loads(line))


def write_samples(path: str | Path, records: list[SampleRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_samples(path: str | Path) -> list[SampleRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(SampleRecord.from_json(line))
    return records


@dataclass
class SceneDataset:
    """Root-relative view of one dataset directory."""

    root: Path
    records: list[SampleRecord] = field(default_factory=list)

    @classmethod
    def open(cls, root: str | Path) -> "SceneDataset":
        root = Path(root)
        samples = root / "samples.jsonl"
        if not samples.is_file():
            raise FileNotFoundError(f"{samples} not found")
        return cls(root=root, records=read_samples(samples))

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_features(self, rec: SampleRecord) -> np.ndarray:
        return read_tensor(self.resolve(rec.feature_path))

    def load_depth(self, rec: SampleRecord) -> np.ndarray:
        return read_tensor(self.resolve(rec.depth_path))

    def load_mask(self, rec: SampleRecord) -> np.ndarray:
        return read_tensor(self.resolve(rec.mask_path))

    def load_intrinsics_matrix(self, rec: SampleRecord) -> np.ndarray:
        return read_tensor(self.resolve(rec.intrinsics_path))

    def mesh_path(self, rec: SampleRecord) -> Path:
        return self.root / "meshes" / f"{rec.cad_id}.obj"
