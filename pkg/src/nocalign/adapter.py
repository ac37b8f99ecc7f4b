"""Metric-learning feature adapter: per-pixel MLP with hand-derived gradients.

The encoder is a 2-layer MLP (GELU between the layers), the decoder a
single linear layer predicting canonical coordinates.  Training mixes a
canonical-coordinate regression loss with a cosine triplet loss whose
negatives are mined on the raw features, which is what lets the encoder
pull visually-confusable but geometrically-distant points apart.

All gradients are closed-form backprop in float64; the finite-difference
harness in the tests holds them to 1e-4 relative error.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .tensorio import NocMap, read_tensor, write_tensor

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class EmptyBatchError(ValueError):
    """Loss requested over zero valid pixels."""


class MiningExhaustedError(RuntimeError):
    """No minable triplet exists under the thresholds."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite loss at step {step}")


@dataclass
class FeatureMap:
    """Dense per-patch features (h, w, C) with a validity plane."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 3:
            raise ValueError(f"values must be (h, w, C), got {self.values.shape}")
        if self.valid.shape != self.values.shape[:2]:
            raise ValueError(f"valid plane {self.valid.shape} vs {self.values.shape[:2]}")

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    # overflow to 0/inf is fine here; diverged weights surface as a
    # non-finite loss at the training loop
    with np.errstate(over="ignore", invalid="ignore"):
        phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi


@dataclass
class AdapterModel:
    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray
    dec_w: np.ndarray
    dec_b: np.ndarray

    PARAM_NAMES = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w", "dec_b")
    ENCODER_NAMES = ("enc_w1", "enc_b1", "enc_w2", "enc_b2")
    DECODER_NAMES = ("dec_w", "dec_b")

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    @property
    def in_channels(self) -> int:
        return self.enc_w1.shape[0]

    @property
    def enc_channels(self) -> int:
        return self.enc_w2.shape[1]

    @property
    def hidden(self) -> int:
        return self.enc_w1.shape[1]


def init_adapter(in_channels: int, hidden: int = 512, enc_channels: int = 256,
                 seed: int = 0) -> AdapterModel:
    """He-style Gaussian init, deterministic per seed."""
    rng = np.random.default_rng(seed)
    return AdapterModel(
        enc_w1=rng.standard_normal((in_channels, hidden)) * np.sqrt(2.0 / in_channels),
        enc_b1=np.zeros(hidden),
        enc_w2=rng.standard_normal((hidden, enc_channels)) * np.sqrt(2.0 / hidden),
        enc_b2=np.zeros(enc_channels),
        dec_w=rng.standard_normal((enc_channels, 3)) * np.sqrt(2.0 / enc_channels),
        dec_b=np.zeros(3),
    )


def encode_vectors(model: AdapterModel, x: np.ndarray) -> np.ndarray:
    """Encode (N, C_in) raw feature vectors to (N, C_enc)."""
    pre = x @ model.enc_w1 + model.enc_b1
    return _gelu(pre) @ model.enc_w2 + model.enc_b2


def decode_vectors(model: AdapterModel, z: np.ndarray) -> np.ndarray:
    return z @ model.dec_w + model.dec_b


def encode(model: AdapterModel, fmap: FeatureMap) -> FeatureMap:
    """Per-pixel encoding; validity carries through unchanged."""
    h, w, c = fmap.values.shape
    if c != model.in_channels:
        raise ValueError(f"feature map has {c} channels, model expects {model.in_channels}")
    flat = encode_vectors(model, fmap.values.reshape(-1, c))
    return FeatureMap(flat.reshape(h, w, model.enc_channels), fmap.valid.copy())


def _zero_grads(model: AdapterModel) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in model.params().items()}


def _encoder_backward(model, x, pre, hid, dz, grads):
    """Accumulate encoder grads given dL/d(encoded) ``dz`` for inputs ``x``."""
    grads["enc_w2"] += hid.T @ dz
    grads["enc_b2"] += dz.sum(axis=0)
    dh = dz @ model.enc_w2.T
    dpre = dh * _gelu_grad(pre)
    grads["enc_w1"] += x.T @ dpre
    grads["enc_b1"] += dpre.sum(axis=0)


def noc_loss_flat(model: AdapterModel, x: np.ndarray, target: np.ndarray
                  ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared canonical-coordinate error over (N, C_in) pixel vectors."""
    n = len(x)
    if n == 0:
        raise EmptyBatchError("no valid pixels in batch")
    # non-finite values flow through; the training loop turns them into
    # a divergence error rather than a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        pre = x @ model.enc_w1 + model.enc_b1
        hid = _gelu(pre)
        z = hid @ model.enc_w2 + model.enc_b2
        pred = z @ model.dec_w + model.dec_b
        err = pred - target
        loss = float((err * err).sum() / n)

        grads = _zero_grads(model)
        dpred = 2.0 * err / n
        grads["dec_w"] += z.T @ dpred
        grads["dec_b"] += dpred.sum(axis=0)
        dz = dpred @ model.dec_w.T
        _encoder_backward(model, x, pre, hid, dz, grads)
    return loss, grads


def noc_loss(model: AdapterModel, batch: list[tuple[FeatureMap, NocMap]]
             ) -> tuple[float, dict[str, np.ndarray]]:
    """NOC regression loss over every jointly-valid pixel of the batch."""
    xs, ts = [], []
    for fmap, noc in batch:
        if fmap.shape != noc.shape:
            raise ValueError(f"feature map {fmap.shape} vs NOC map {noc.shape}")
        both = fmap.valid & noc.valid
        xs.append(fmap.values[both])
        ts.append(noc.values[both])
    x = np.concatenate(xs, axis=0) if xs else np.zeros((0, model.in_channels))
    t = np.concatenate(ts, axis=0) if ts else np.zeros((0, 3))
    return noc_loss_flat(model, x, t)


@dataclass
class PointPool:
    """Flat pool of pixel records mined for triplets.

    ``features`` are the raw (pre-adapter) descriptors; mining thresholds
    are evaluated on these, never on encoded features.
    """

    noc: np.ndarray
    features: np.ndarray
    view_ids: np.ndarray
    pixels: np.ndarray

    def __post_init__(self):
        self.noc = np.asarray(self.noc, dtype=np.float64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.view_ids = np.asarray(self.view_ids, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        n = len(self.noc)
        if not (len(self.features) == len(self.view_ids) == len(self.pixels) == n):
            raise ValueError("pool arrays disagree on length")

    def __len__(self) -> int:
        return len(self.noc)


def build_pool(pairs: list[tuple[FeatureMap, NocMap]]) -> PointPool:
    """Collect every jointly-valid pixel of the pairs into one pool."""
    noc, feats, views, pix = [], [], [], []
    for view_id, (fmap, nmap) in enumerate(pairs):
        both = fmap.valid & nmap.valid
        rows, cols = np.nonzero(both)
        noc.append(nmap.values[rows, cols])
        feats.append(fmap.values[rows, cols])
        views.append(np.full(len(rows), view_id))
        pix.append(np.stack([rows, cols], axis=1))
    if not noc:
        raise EmptyBatchError("no pairs given")
    return PointPool(np.concatenate(noc), np.concatenate(feats),
                     np.concatenate(views), np.concatenate(pix))


@dataclass
class MiningConfig:
    tau_pos_dist: float = 0.02
    tau_neg_dist: float = 0.4
    tau_neg_feat: float = 0.75
    alpha: float = 0.5
    beta: float = 0.1

    def __post_init__(self):
        if not 0 < self.tau_pos_dist < self.tau_neg_dist:
            raise ValueError(f"need 0 < tau_pos ({self.tau_pos_dist}) < tau_neg ({self.tau_neg_dist})")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.int64).reshape(-1)
        self.positives = np.asarray(self.positives, dtype=np.int64).reshape(-1)
        self.negatives = np.asarray(self.negatives, dtype=np.int64).reshape(-1)
        if not len(self.anchors) == len(self.positives) == len(self.negatives):
            raise ValueError("triplet arrays disagree on length")

    def __len__(self) -> int:
        return len(self.anchors)

    def take(self, idx) -> "TripletBatch":
        return TripletBatch(self.anchors[idx], self.positives[idx], self.negatives[idx])


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    return x / safe[:, None], norm


def mine_triplets(pool: PointPool, cfg: MiningConfig, count: int, seed: int = 0,
                  _chunk: int = 256) -> TripletBatch:
    """Sample up to ``count`` triplets under the distance/feature thresholds.

    Positives sit within tau_pos_dist in NOC space; negatives sit beyond
    tau_neg_dist yet look alike (raw cosine above tau_neg_feat).  Anchors
    whose candidate sets are empty are skipped, not resampled; if the
    attempt budget ends with nothing minable, raises MiningExhaustedError.
    """
    n = len(pool)
    if n < 3:
        raise MiningExhaustedError(f"pool of {n} records cannot form triplets")
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    unit, _ = _unit_rows(pool.features)
    sq = (pool.noc**2).sum(axis=1)

    anchors, positives, negatives = [], [], []
    attempts = 0
    budget = max(20 * count, 2000)
    while len(anchors) < count and attempts < budget:
        take = min(_chunk, budget - attempts)
        cand = rng.integers(0, n, size=take)
        attempts += take
        sim = unit[cand] @ unit.T
        d2 = sq[cand][:, None] + sq[None, :] - 2.0 * (pool.noc[cand] @ pool.noc.T)
        np.maximum(d2, 0.0, out=d2)
        dist = np.sqrt(d2)
        for row, a in enumerate(cand):
            pos_mask = dist[row] <= cfg.tau_pos_dist
            pos_mask[a] = False
            neg_mask = (dist[row] >= cfg.tau_neg_dist) & (sim[row] > cfg.tau_neg_feat)
            pos_idx = np.flatnonzero(pos_mask)
            neg_idx = np.flatnonzero(neg_mask)
            if len(pos_idx) == 0 or len(neg_idx) == 0:
                continue
            anchors.append(int(a))
            positives.append(int(rng.choice(pos_idx)))
            negatives.append(int(rng.choice(neg_idx)))
            if len(anchors) >= count:
                break
    if not anchors:
        raise MiningExhaustedError("no triplet satisfies the mining thresholds")
    return TripletBatch(anchors, positives, negatives)


def triplet_margins(enc_a: np.ndarray, enc_p: np.ndarray, enc_n: np.ndarray,
                    alpha: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hinge terms max(0, d(a,n) - d(a,p) + alpha) with d = cosine similarity.

    Returns (hinges, d_ap, d_an).  Zero-norm vectors get similarity 0.
    """
    ua, _ = _unit_rows(enc_a)
    up, _ = _unit_rows(enc_p)
    un, _ = _unit_rows(enc_n)
    d_ap = (ua * up).sum(axis=1)
    d_an = (ua * un).sum(axis=1)
    return np.maximum(0.0, d_an - d_ap + alpha), d_ap, d_an


def triplet_loss(model: AdapterModel, pool: PointPool, batch: TripletBatch,
                 alpha: float = 0.5) -> tuple[float, dict[str, np.ndarray]]:
    """Mean triplet hinge over the batch, with encoder gradients."""
    k = len(batch)
    if k == 0:
        raise EmptyBatchError("empty triplet batch")
    idx = np.concatenate([batch.anchors, batch.positives, batch.negatives])
    x = pool.features[idx]
    pre = x @ model.enc_w1 + model.enc_b1
    hid = _gelu(pre)
    z = hid @ model.enc_w2 + model.enc_b2
    za, zp, zn = z[:k], z[k:2 * k], z[2 * k:]

    norm_a = np.linalg.norm(za, axis=1)
    norm_p = np.linalg.norm(zp, axis=1)
    norm_n = np.linalg.norm(zn, axis=1)
    sa = np.where(norm_a > 0, norm_a, 1.0)
    sp = np.where(norm_p > 0, norm_p, 1.0)
    sn = np.where(norm_n > 0, norm_n, 1.0)
    ua, up, un = za / sa[:, None], zp / sp[:, None], zn / sn[:, None]
    d_ap = (ua * up).sum(axis=1)
    d_an = (ua * un).sum(axis=1)
    hinge = d_an - d_ap + alpha
    active = hinge > 0
    loss = float(np.where(active, hinge, 0.0).mean())

    # d cos(a, b)/da = (b_hat - cos * a_hat) / ||a||
    w = active.astype(np.float64) / k
    dza = (w[:, None] / sa[:, None]) * ((un - d_an[:, None] * ua) - (up - d_ap[:, None] * ua))
    dzp = (-w[:, None] / sp[:, None]) * (ua - d_ap[:, None] * up)
    dzn = (w[:, None] / sn[:, None]) * (ua - d_an[:, None] * un)
    dz = np.concatenate([dza, dzp, dzn], axis=0)

    grads = _zero_grads(model)
    _encoder_backward(model, x, pre, hid, dz, grads)
    return loss, grads


@dataclass
class TrainConfig:
    mining: MiningConfig = field(default_factory=MiningConfig)
    hidden: int = 512
    enc_channels: int = 256
    lr: float = 3e-4
    weight_decay: float = 1e-2
    batch_size: int = 140
    steps: int = 1000
    seed: int = 0
    mining_rounds: int = 40  # triplet pool size = batch_size * mining_rounds

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("lr must be positive, batch_size >= 1, steps >= 0")


class AdamW:
    """Decoupled weight decay Adam over a dict of parameter arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], skip: set[str] = frozenset()):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if name in skip:
                continue
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / b1t
            vhat = self.v[name] / b2t
            p -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)


def train_adapter(pairs: list[tuple[FeatureMap, NocMap]], cfg: TrainConfig
                  ) -> tuple[AdapterModel, list[dict]]:
    """Train on (feature map, NOC map) pairs; deterministic per seed.

    Mining runs once up front: negatives depend only on raw features, so
    the triplet set is static through training.  With beta = 1 the decoder
    receives no updates at all; with beta = 0 mining is skipped entirely.
    """
    pool = build_pool(pairs)
    if len(pool) == 0:
        raise EmptyBatchError("pairs contain no valid pixels")
    beta = cfg.mining.beta
    model = init_adapter(pool.features.shape[1], cfg.hidden, cfg.enc_channels, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)

    triplets = None
    if beta > 0:
        want = cfg.batch_size * max(1, min(cfg.steps, cfg.mining_rounds))
        triplets = mine_triplets(pool, cfg.mining, want, seed=cfg.seed + 2)

    opt = AdamW(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    skip = set(AdapterModel.DECODER_NAMES) if beta == 1.0 else frozenset()
    curve = []
    for step in range(cfg.steps):
        grads = _zero_grads(model)
        noc_val = 0.0
        trip_val = 0.0
        if beta < 1.0:
            pick = rng.integers(0, len(pool), size=min(cfg.batch_size, len(pool)))
            noc_val, g = noc_loss_flat(model, pool.features[pick], pool.noc[pick])
            for name in grads:
                grads[name] += (1.0 - beta) * g[name]
        if beta > 0.0:
            lo = (step * cfg.batch_size) % len(triplets)
            rows = np.arange(lo, lo + min(cfg.batch_size, len(triplets))) % len(triplets)
            trip_val, g = triplet_loss(model, pool, triplets.take(rows), alpha=cfg.mining.alpha)
            for name in grads:
                grads[name] += beta * g[name]
        total = (1.0 - beta) * noc_val + beta * trip_val
        if not np.isfinite(total):
            raise TrainingDivergedError(step)
        opt.step(grads, skip=skip)
        curve.append({"step": step, "total": total, "noc": noc_val, "triplet": trip_val})
    return model, curve


def fuse(raw: FeatureMap, adapted: FeatureMap, omega: float = 0.5) -> FeatureMap:
    """Concatenate unit-normalized raw and adapted features, weighted.

    Output channels are C_raw + C_adapted; a pixel whose raw or adapted
    vector has zero norm is normalized to zeros and marked invalid.
    """
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega {omega} outside [0, 1]")
    if raw.shape != adapted.shape:
        raise ValueError(f"raw {raw.shape} vs adapted {adapted.shape}")
    h, w = raw.shape
    ur, nr = _unit_rows(raw.values.reshape(-1, raw.channels))
    ua, na = _unit_rows(adapted.values.reshape(-1, adapted.channels))
    fused = np.concatenate([(1.0 - omega) * ur, omega * ua], axis=1).reshape(h, w, -1)
    valid = raw.valid & adapted.valid & (nr > 0).reshape(h, w) & (na > 0).reshape(h, w)
    return FeatureMap(fused, valid)


def downsample_noc(noc: NocMap, patch: int) -> NocMap:
    """Area-average valid NOC over each patch; valid iff >= 50% foreground."""
    h, w = noc.shape
    if h % patch or w % patch:
        raise ValueError(f"map {h}x{w} not divisible by patch {patch}")
    ph, pw = h // patch, w // patch
    vals = noc.values.reshape(ph, patch, pw, patch, 3)
    good = noc.valid.reshape(ph, patch, pw, patch)
    counts = good.sum(axis=(1, 3))
    summed = (vals * good[..., None]).sum(axis=(1, 3))
    valid = counts >= (patch * patch) / 2.0
    out = np.zeros((ph, pw, 3))
    nz = counts > 0
    out[nz] = summed[nz] / counts[nz][..., None]
    out[~valid] = 0.0
    return NocMap(out, valid)


def downsample_mask(mask: np.ndarray, patch: int) -> np.ndarray:
    """Patch-level foreground mask under the same >= 50% coverage rule."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    if h % patch or w % patch:
        raise ValueError(f"mask {h}x{w} not divisible by patch {patch}")
    counts = mask.reshape(h // patch, patch, w // patch, patch).sum(axis=(1, 3))
    return counts >= (patch * patch) / 2.0


def save_adapter(ckpt_dir: str | Path, model: AdapterModel, cfg: TrainConfig | None = None,
                 extra: dict | None = None) -> None:
    """Write weights as float32 tensors plus a JSON manifest."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in model.params().items():
        write_tensor(ckpt_dir / f"{name}.nten", arr.astype(np.float32))
    manifest = {
        "kind": "adapter",
        "in_channels": model.in_channels,
        "hidden": model.hidden,
        "enc_channels": model.enc_channels,
        "activation": "gelu",
        "shapes": {name: list(arr.shape) for name, arr in model.params().items()},
    }
    if cfg is not None:
        manifest["train"] = asdict(cfg)
    if extra:
        manifest.update(extra)
    with open(ckpt_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_adapter(ckpt_dir: str | Path) -> tuple[AdapterModel, dict]:
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    arrays = {}
    for name in AdapterModel.PARAM_NAMES:
        arr = read_tensor(ckpt_dir / f"{name}.nten").astype(np.float64)
        expected = tuple(manifest["shapes"][name])
        if arr.shape != expected:
            raise ValueError(f"{name}: stored shape {arr.shape} != manifest {expected}")
        arrays[name] = arr
    return AdapterModel(**arrays), manifest
