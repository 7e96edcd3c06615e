"""Dataset format, loading, rain classification, resampling and synthetic data.

On-disk layout of a dataset directory::

    manifest.json
    tensors/<id>.prb      # NWP predictors, shape (T, C, H, W)
    obs/<id>.prb          # observed rain rate in mm/h, shape (H, W)

A ``.prb`` file is a tiny self-describing little-endian float32 container:
4 magic bytes ``PRB1``, one ``u8`` rank, ``rank`` dims as ``u32`` and the
row-major payload.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from datetime import datetime, timedelta
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

PRB_MAGIC = b"PRB1"
SPLITS = ("train", "val", "test")

NO_RAIN, RAIN, HEAVY_RAIN = 0, 1, 2
CLASS_NAMES = ("No Rain", "Rain", "Heavy Rain")


class DataError(Exception):
    """Base class for dataset problems."""


class ValidationError(DataError, ValueError):
    """Input values or configuration violate a documented precondition."""


class LoadError(DataError):
    """A dataset file is missing, malformed or inconsistent with the manifest."""


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class ThresholdSpec:
    rain_threshold: float
    heavy_threshold: float

    def __post_init__(self):
        if not (0.0 <= self.rain_threshold < self.heavy_threshold):
            raise ValidationError(
                f"thresholds must satisfy 0 <= rain < heavy, got "
                f"rain={self.rain_threshold}, heavy={self.heavy_threshold}"
            )

    def to_json(self) -> dict:
        return {"rain": self.rain_threshold, "heavy": self.heavy_threshold}

    @classmethod
    def from_json(cls, d: dict) -> "ThresholdSpec":
        return cls(float(d["rain"]), float(d["heavy"]))


# Rain-rate class boundaries of the three benchmark regions (mm/h).
KOREA_THRESHOLDS = ThresholdSpec(0.1, 10.0)
GERMANY_THRESHOLDS = ThresholdSpec(1e-5, 2.0)
CHINA_THRESHOLDS = ThresholdSpec(0.1, 2.0)

# Pooled pixel class proportions (no rain, rain, heavy rain) per region.
KOREA_PROPORTIONS = (0.8724, 0.1157, 0.0119)
GERMANY_PROPORTIONS = (0.8510, 0.1380, 0.0110)
CHINA_PROPORTIONS = (0.9175, 0.0381, 0.0444)


@dataclass
class NwpSample:
    tensor: np.ndarray  # (T, C, H, W) float32
    timestamp: str = ""
    lead_time_hours: int = 0
    sample_id: str = ""

    def __post_init__(self):
        if self.tensor.ndim != 4:
            raise ValidationError(
                f"NWP tensor must have rank 4 (T, C, H, W), got shape {self.tensor.shape}"
            )
        if self.lead_time_hours < 0:
            raise ValidationError("lead_time_hours must be non-negative")


@dataclass
class RainObservation:
    grid: np.ndarray  # (H, W) float32, mm/h
    timestamp: str = ""


@dataclass
class DatasetManifest:
    name: str
    shape: tuple[int, int, int, int]
    channel_names: list[str]
    thresholds: ThresholdSpec
    splits: dict[str, list[str]]
    normalization: tuple[np.ndarray, np.ndarray] | None = None
    samples: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) != 4:
            raise ValidationError(f"manifest shape must be (T, C, H, W), got {self.shape}")
        if len(self.channel_names) != self.shape[1]:
            raise ValidationError(
                f"{len(self.channel_names)} channel names for C={self.shape[1]} channels"
            )
        for s in SPLITS:
            self.splits.setdefault(s, [])
        seen: dict[str, str] = {}
        for s in SPLITS:
            for sid in self.splits[s]:
                if sid in seen:
                    raise ValidationError(
                        f"sample {sid!r} appears in both {seen[sid]!r} and {s!r} splits"
                    )
                seen[sid] = s
        if self.normalization is not None:
            mean, std = (np.asarray(a, dtype=np.float64) for a in self.normalization)
            if mean.shape != (self.shape[1],) or std.shape != (self.shape[1],):
                raise ValidationError("normalization mean/std must have one entry per channel")
            self.normalization = (mean, std)

    @property
    def sample_ids(self) -> list[str]:
        return [sid for s in SPLITS for sid in self.splits[s]]

    def to_json(self) -> dict:
        d = {
            "name": self.name,
            "shape": list(self.shape),
            "channel_names": list(self.channel_names),
            "thresholds": self.thresholds.to_json(),
            "splits": {s: list(self.splits[s]) for s in SPLITS},
        }
        if self.normalization is not None:
            d["normalization"] = {
                "mean": [float(v) for v in self.normalization[0]],
                "std": [float(v) for v in self.normalization[1]],
            }
        if self.samples:
            d["samples"] = self.samples
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        missing = {"name", "shape", "channel_names", "thresholds", "splits"} - set(d)
        if missing:
            raise LoadError(f"manifest.json is missing keys: {sorted(missing)}")
        norm = d.get("normalization")
        if norm is not None:
            norm = (np.asarray(norm["mean"], float), np.asarray(norm["std"], float))
        return cls(
            name=d["name"],
            shape=tuple(d["shape"]),
            channel_names=list(d["channel_names"]),
            thresholds=ThresholdSpec.from_json(d["thresholds"]),
            splits={k: list(v) for k, v in d["splits"].items()},
            normalization=norm,
            samples=dict(d.get("samples", {})),
        )


# --------------------------------------------------------------------------
# .prb binary format


def encode_prb(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise ValueError("rank too large for .prb")
    header = PRB_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_prb(buf: bytes, *, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 5 or buf[:4] != PRB_MAGIC:
        raise LoadError(f"{source}: bad magic bytes {buf[:4]!r}, expected {PRB_MAGIC!r}")
    rank = buf[4]
    head = 5 + 4 * rank
    if len(buf) < head:
        raise LoadError(f"{source}: truncated header")
    dims = struct.unpack(f"<{rank}I", buf[5:head])
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - head != 4 * n:
        raise LoadError(
            f"{source}: payload holds {len(buf) - head} bytes, dims {dims} need {4 * n}"
        )
    return np.frombuffer(buf, dtype="<f4", offset=head).reshape(dims).astype(np.float32)


def write_prb(path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_prb(array))


def read_prb(path) -> np.ndarray:
    path = Path(path)
    return decode_prb(path.read_bytes(), source=str(path))


# --------------------------------------------------------------------------
# grid operations


def _check_finite(arr: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(f"{what} contains a non-finite value at index {idx}")


def classify_rain(obs, spec: ThresholdSpec) -> np.ndarray:
    """Discretize a rain-rate grid (mm/h) into no-rain / rain / heavy-rain.

    Intervals are half-open: ``[0, rain)`` -> 0, ``[rain, heavy)`` -> 1 and
    ``[heavy, inf)`` -> 2.

    Parameters
    ----------
    obs : RainObservation or array_like
        Rain rate in mm/h.
    spec : ThresholdSpec

    Returns
    -------
    numpy.ndarray
        ``uint8`` class grid with the same shape as ``obs``.
    """
    grid = np.asarray(getattr(obs, "grid", obs))
    _check_finite(grid, "rain observation")
    neg = grid < 0
    if neg.any():
        idx = tuple(int(i) for i in np.argwhere(neg)[0])
        raise ValidationError(f"rain observation has negative value {grid[idx]} at index {idx}")
    out = np.zeros(grid.shape, dtype=np.uint8)
    out[grid >= spec.rain_threshold] = RAIN
    out[grid >= spec.heavy_threshold] = HEAVY_RAIN
    return out


def _align_corners_coords(n_src: int, n_dst: int) -> np.ndarray:
    if n_dst == 1:
        return np.zeros(1)
    return np.arange(n_dst, dtype=np.float64) * ((n_src - 1) / (n_dst - 1))


def resample_grid(grid: np.ndarray, target: Sequence[int], method: str = "bilinear") -> np.ndarray:
    """Resample a 2-D grid with the align-corners convention.

    Corner cells map exactly onto corner cells. ``nearest`` picks the closest
    source cell (halfway points round up) and preserves dtype, so it is the
    only method accepted for integer class grids.
    """
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValidationError(f"expected a 2-D grid, got shape {grid.shape}")
    h, w = grid.shape
    th, tw = (int(t) for t in target)
    if min(h, w, th, tw) < 2:
        raise ValidationError(f"grid and target dims must be >= 2, got {grid.shape} -> {(th, tw)}")
    _check_finite(grid.astype(np.float64), "grid")
    ys = _align_corners_coords(h, th)
    xs = _align_corners_coords(w, tw)

    if method == "nearest":
        iy = np.floor(ys + 0.5).astype(np.intp)
        ix = np.floor(xs + 0.5).astype(np.intp)
        return grid[np.ix_(iy, ix)].copy()
    if method != "bilinear":
        raise ValidationError(f"unknown resampling method {method!r}")
    if np.issubdtype(grid.dtype, np.integer) or grid.dtype == bool:
        raise ValidationError("bilinear resampling of class labels is not allowed; use 'nearest'")

    coords = np.meshgrid(ys, xs, indexing="ij")
    out = ndimage.map_coordinates(grid.astype(np.float64), coords, order=1, mode="nearest", prefilter=False)
    return out.astype(grid.dtype if np.issubdtype(grid.dtype, np.floating) else np.float64)


def prepare_observation(
    rain: np.ndarray,
    target: Sequence[int],
    spec: ThresholdSpec,
    order: str = "resample_then_classify",
) -> np.ndarray:
    """Bring an observation grid to ``target`` resolution as a class grid.

    ``resample_then_classify`` interpolates rain rates bilinearly before
    thresholding. ``classify_then_resample`` thresholds at native resolution
    and resamples labels with ``nearest``.
    """
    if order == "resample_then_classify":
        rr = np.maximum(resample_grid(rain, target, "bilinear"), 0.0)
        return classify_rain(rr, spec)
    if order == "classify_then_resample":
        return resample_grid(classify_rain(rain, spec), target, "nearest")
    raise ValidationError(f"unknown observation order {order!r}")


def compute_channel_stats(tensors) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std over (sample, T, H, W)."""
    total = None
    sq = None
    count = 0
    for t in tensors:
        t = np.asarray(getattr(t, "tensor", t), dtype=np.float64)
        s = t.sum(axis=(0, 2, 3))
        total = s if total is None else total + s
        count += t.shape[0] * t.shape[2] * t.shape[3]
    if total is None:
        raise ValidationError("cannot compute channel statistics of an empty split")
    mean = total / count
    for t in tensors:
        t = np.asarray(getattr(t, "tensor", t), dtype=np.float64)
        s = ((t - mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3))
        sq = s if sq is None else sq + s
    return mean, np.sqrt(sq / count)


def normalize_channels(sample, stats: tuple[np.ndarray, np.ndarray]):
    """Z-score every channel with frozen (mean, std) statistics.

    Accepts an :class:`NwpSample` (returns a new one) or a raw ``(T, C, H, W)``
    array (returns an array).
    """
    mean, std = (np.asarray(a, dtype=np.float64) for a in stats)
    tensor = np.asarray(getattr(sample, "tensor", sample))
    c = tensor.shape[1]
    if mean.shape != (c,) or std.shape != (c,):
        raise ValidationError(f"stats have {mean.shape}/{std.shape} entries for {c} channels")
    degenerate = np.flatnonzero(~(std > 0))
    if degenerate.size:
        raise ValidationError(f"channel {int(degenerate[0])} has non-positive std {std[degenerate[0]]}")
    out = ((tensor - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)
    if isinstance(sample, NwpSample):
        return NwpSample(out, sample.timestamp, sample.lead_time_hours, sample.sample_id)
    return out


# --------------------------------------------------------------------------
# loading


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise LoadError(f"{path} not found")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON ({exc})") from exc
    return DatasetManifest.from_json(d)


def write_manifest(root, manifest: DatasetManifest) -> None:
    path = Path(root) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")


def manifest_hash(root) -> str:
    """SHA-256 of the manifest bytes; identifies a dataset in run records."""
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()


def _load_array(path: Path, sid: str, expected: tuple, what: str) -> np.ndarray:
    if not path.is_file():
        raise LoadError(f"sample {sid!r}: missing {what} file {path}")
    try:
        arr = read_prb(path)
    except LoadError as exc:
        raise LoadError(f"sample {sid!r}: {exc}") from exc
    if arr.shape != tuple(expected):
        raise LoadError(
            f"sample {sid!r}: {what} shape mismatch, file has {arr.shape}, "
            f"manifest declares {tuple(expected)}"
        )
    if not np.isfinite(arr).all():
        raise LoadError(f"sample {sid!r}: {what} payload contains NaN/Inf")
    return arr


def load_sample(root, manifest: DatasetManifest, sid: str) -> tuple[NwpSample, RainObservation]:
    root = Path(root)
    t, c, h, w = manifest.shape
    x = _load_array(root / "tensors" / f"{sid}.prb", sid, (t, c, h, w), "tensor")
    y = _load_array(root / "obs" / f"{sid}.prb", sid, (h, w), "observation")
    if (y < 0).any():
        raise LoadError(f"sample {sid!r}: observation has negative rain rates")
    meta = manifest.samples.get(sid, {})
    ts = meta.get("timestamp", "")
    return (
        NwpSample(x, ts, int(meta.get("lead_time_hours", 0)), sid),
        RainObservation(y, ts),
    )


def load_dataset(root, split: str | None = None):
    """Open a dataset directory.

    Returns the manifest and an iterator of ``(NwpSample, RainObservation)``
    pairs in manifest order (train, val, test unless ``split`` is given).
    """
    manifest = read_manifest(root)
    ids = manifest.splits[split] if split else manifest.sample_ids

    def _iter() -> Iterator[tuple[NwpSample, RainObservation]]:
        for sid in ids:
            yield load_sample(root, manifest, sid)

    return manifest, _iter()


def load_split(root, split: str):
    """Load one split into memory as stacked arrays ``(ids, X, rain)``."""
    manifest, it = load_dataset(root, split)
    ids, xs, ys = [], [], []
    for s, o in it:
        ids.append(s.sample_id)
        xs.append(s.tensor)
        ys.append(o.grid)
    t, c, h, w = manifest.shape
    x = np.stack(xs) if xs else np.zeros((0, t, c, h, w), np.float32)
    y = np.stack(ys) if ys else np.zeros((0, h, w), np.float32)
    return ids, x, y


def validate_dataset(root) -> dict:
    """Load every sample; returns pooled class counts. Raises on the first problem."""
    manifest, it = load_dataset(root)
    counts = np.zeros(3, dtype=np.int64)
    n = 0
    for _, obs in it:
        counts += np.bincount(classify_rain(obs, manifest.thresholds).ravel(), minlength=3)
        n += 1
    return {"name": manifest.name, "samples": n, "class_counts": counts.tolist()}


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    class_proportions: tuple[float, float, float] = KOREA_PROPORTIONS
    grid_shape: tuple[int, int, int, int] = (1, 8, 64, 64)
    n_samples: dict[str, int] = field(default_factory=lambda: {"train": 200, "val": 30, "test": 30})
    correlation_strength: float = 0.8
    field_smoothness: float = 3.0
    seed: int = 0
    thresholds: ThresholdSpec = KOREA_THRESHOLDS
    name: str = "synthetic"
    lead_time_hours: int = 3

    def __post_init__(self):
        p = tuple(float(v) for v in self.class_proportions)
        if len(p) != 3 or min(p) < 0 or abs(sum(p) - 1.0) > 1e-9:
            raise ValidationError(f"class_proportions must be 3 non-negative values summing to 1, got {p}")
        self.class_proportions = p
        self.grid_shape = tuple(int(v) for v in self.grid_shape)
        if len(self.grid_shape) != 4 or min(self.grid_shape) < 1:
            raise ValidationError(f"grid_shape must be 4 positive ints, got {self.grid_shape}")
        if not 0.0 <= self.correlation_strength <= 1.0:
            raise ValidationError("correlation_strength must lie in [0, 1]")
        if not self.field_smoothness > 0:
            raise ValidationError("field_smoothness must be positive")
        if isinstance(self.thresholds, dict):
            self.thresholds = ThresholdSpec.from_json(self.thresholds)
        unknown = set(self.n_samples) - set(SPLITS)
        if unknown:
            raise ValidationError(f"unknown split names {sorted(unknown)}")
        if any(int(v) < 0 for v in self.n_samples.values()):
            raise ValidationError("n_samples must be non-negative")

    @property
    def total_samples(self) -> int:
        return sum(int(v) for v in self.n_samples.values())

    def to_json(self) -> dict:
        return {
            "class_proportions": list(self.class_proportions),
            "grid_shape": list(self.grid_shape),
            "n_samples": dict(self.n_samples),
            "correlation_strength": self.correlation_strength,
            "field_smoothness": self.field_smoothness,
            "seed": self.seed,
            "thresholds": self.thresholds.to_json(),
            "name": self.name,
            "lead_time_hours": self.lead_time_hours,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown synthetic spec keys {sorted(unknown)}")
        return cls(**d)


def _rain_from_latent(z: np.ndarray, q0: float, q1: float, spec: ThresholdSpec) -> np.ndarray:
    # Monotone map hitting rain_threshold at q0 and heavy_threshold at q1;
    # log-linear through the rain band, sub-threshold drizzle below, mild growth above.
    r, hv = spec.rain_threshold, spec.heavy_threshold
    span = max(q1 - q0, 1e-12)
    rain_lo = max(r, 1e-6)
    out = np.empty_like(z)
    lo = z < q0
    hi = z >= q1
    mid = ~(lo | hi)
    out[lo] = r * np.exp(np.minimum(z[lo] - q0, 0.0)) * (r > 0)
    out[mid] = rain_lo * (hv / rain_lo) ** ((z[mid] - q0) / span)
    out[hi] = hv * np.exp(0.5 * (z[hi] - q1))
    return out


_EPOCH = datetime(2020, 6, 1)

_CHANNEL_TRANSFORMS = (
    lambda z: z,
    lambda z: -z,
    np.tanh,
    lambda z: (z * z - 1.0) / math.sqrt(2.0),
)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write a synthetic imbalanced dataset to ``out_dir``.

    A smooth Gaussian random field per sample is the latent rain driver; its
    pooled quantiles calibrate a monotone rain-rate transform so that pooled
    class proportions follow ``spec.class_proportions``. Each NWP channel
    mixes a fixed transform of the latent field with independent noise.

    Returns a summary with the achieved class proportions.
    """
    n_total = spec.total_samples
    if n_total == 0:
        raise ValidationError("synthetic spec requests zero samples")
    t, c, h, w = spec.grid_shape
    n_pix = n_total * h * w
    for k, p in enumerate(spec.class_proportions):
        if p > 0 and round(p * n_pix) == 0:
            raise ValidationError(
                f"class {k} proportion {p} is unattainable with {n_pix} pixels"
            )
    if spec.thresholds.rain_threshold == 0 and spec.class_proportions[0] > 0:
        raise ValidationError("no-rain proportion must be 0 when rain_threshold is 0")

    rng = np.random.default_rng(spec.seed)
    latent = np.empty((n_total, h, w))
    for i in range(n_total):
        latent[i] = ndimage.gaussian_filter(
            rng.standard_normal((h, w)), sigma=spec.field_smoothness, mode="wrap"
        )
    latent = (latent - latent.mean()) / latent.std()

    flat = np.sort(latent, axis=None)
    n0 = int(round(spec.class_proportions[0] * n_pix))
    n1 = int(round((spec.class_proportions[0] + spec.class_proportions[1]) * n_pix))
    q0 = flat[n0] if n0 < n_pix else np.inf
    q1 = flat[n1] if n1 < n_pix else np.inf
    if n0 == 0:
        q0 = -np.inf if spec.thresholds.rain_threshold == 0 else flat[0]
    rain = _rain_from_latent(latent, q0, q1, spec.thresholds).astype(np.float32)

    a = spec.correlation_strength
    root = Path(out_dir)
    ids: dict[str, list[str]] = {}
    samples_meta: dict[str, dict] = {}
    k = 0
    tensors: dict[str, np.ndarray] = {}
    for split in SPLITS:
        ids[split] = []
        for j in range(int(spec.n_samples.get(split, 0))):
            sid = f"{split}_{j:05d}"
            x = np.empty((t, c, h, w))
            for ch in range(c):
                signal = _CHANNEL_TRANSFORMS[ch % len(_CHANNEL_TRANSFORMS)](latent[k])
                x[:, ch] = a * signal[None] + (1.0 - a) * rng.standard_normal((t, h, w))
            x = x.astype(np.float32)
            write_prb(root / "tensors" / f"{sid}.prb", x)
            write_prb(root / "obs" / f"{sid}.prb", rain[k])
            ids[split].append(sid)
            samples_meta[sid] = {
                "timestamp": (_EPOCH + timedelta(hours=3 * k)).strftime("%Y-%m-%dT%H:%M:%SZ"),
                "lead_time_hours": spec.lead_time_hours,
            }
            if split == "train":
                tensors[sid] = x
            k += 1

    norm = None
    if tensors:
        mean, std = compute_channel_stats(list(tensors.values()))
        if (std > 0).all():
            norm = (mean, std)
    manifest = DatasetManifest(
        name=spec.name,
        shape=spec.grid_shape,
        channel_names=[f"var{ch:03d}" for ch in range(c)],
        thresholds=spec.thresholds,
        splits=ids,
        normalization=norm,
        samples=samples_meta,
    )
    write_manifest(root, manifest)
    counts = np.bincount(classify_rain(rain, spec.thresholds).ravel(), minlength=3)
    return {
        "pixels": int(n_pix),
        "class_counts": counts.tolist(),
        "proportions": (counts / n_pix).tolist(),
    }
