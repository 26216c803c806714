"""Volumes on disk (RVF), dataset manifests, synthetic planted-signal data, batching.

RVF layout (little endian)::

    b"RVF1" | u32 c, d, h, w | u8 dtype (1 = float32) | float32 payload (row-major)
    | u32 label | u16 id length | UTF-8 id
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagicError, DimensionOverflowError, TruncatedFileError, UnsupportedDtypeError

RVF_MAGIC = b"RVF1"
DTYPE_FLOAT32 = 1
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
# declared payloads above 2**31 elements are rejected as corrupt
MAX_ELEMENTS = 2 ** 31


@dataclass
class Volume:
    id: str
    data: np.ndarray
    label: int
    signal_slices: tuple | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be [c, d, h, w], got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError(f"volume {self.id!r} contains non-finite values")


def write_volume(path, v):
    c, d, h, w = v.data.shape
    ident = v.id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(RVF_MAGIC)
        fh.write(struct.pack("<4IB", c, d, h, w, DTYPE_FLOAT32))
        fh.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
        fh.write(struct.pack("<IH", int(v.label), len(ident)))
        fh.write(ident)


def load_volume(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_volume(buf)


def parse_volume(buf):
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than the magic", len(buf))
    if buf[:4] != RVF_MAGIC:
        raise BadMagicError(f"bad volume magic {bytes(buf[:4])!r}, expected {RVF_MAGIC!r}", 0)
    if len(buf) < 21:
        raise TruncatedFileError("file ends inside the header", len(buf))
    c, d, h, w, dtype = struct.unpack_from("<4IB", buf, 4)
    if dtype != DTYPE_FLOAT32:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype}", 20)
    count = c * d * h * w
    if count > MAX_ELEMENTS:
        raise DimensionOverflowError(f"declared shape {(c, d, h, w)} has {count} elements", 4)
    off = 21
    end = off + 4 * count
    if end > len(buf):
        raise TruncatedFileError(f"payload needs {4 * count} bytes, {len(buf) - off} present", len(buf))
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(c, d, h, w)
    if end + 6 > len(buf):
        raise TruncatedFileError("file ends before label/id trailer", len(buf))
    label, n = struct.unpack_from("<IH", buf, end)
    if end + 6 + n > len(buf):
        raise TruncatedFileError(f"id needs {n} bytes", len(buf))
    ident = bytes(buf[end + 6:end + 6 + n]).decode("utf-8")
    return Volume(ident, data.astype(np.float32), int(label))


def clip_window(v, lo, hi, rescale_to_unit=False):
    """Clamp intensities to ``[lo, hi]``; optionally map that window onto ``[0, 1]``."""
    if not lo < hi:
        raise ValueError(f"window requires lo < hi, got ({lo}, {hi})")
    data = np.clip(v.data, lo, hi)
    if rescale_to_unit:
        data = (data - lo) / (hi - lo)
    return Volume(v.id, data, v.label, v.signal_slices)


# -- manifests -------------------------------------------------------------

@dataclass
class ManifestEntry:
    file: str
    label: int
    split: str
    signal_slices: tuple | None = None


@dataclass
class DatasetManifest:
    name: str
    n_classes: int
    entries: list
    generator: dict | None = None
    root: str = "."

    def split(self, split):
        return [e for e in self.entries if e.split == split]

    def to_dict(self):
        entries = []
        for e in self.entries:
            item = {"file": e.file, "label": e.label, "split": e.split}
            if e.signal_slices is not None:
                item["signal_slices"] = [list(s) for s in e.signal_slices]
            entries.append(item)
        out = {"version": MANIFEST_VERSION, "name": self.name, "n_classes": self.n_classes,
               "entries": entries}
        if self.generator is not None:
            out["generator"] = self.generator
        return out

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def load_manifest(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('version')!r}")
    entries = []
    for e in doc["entries"]:
        if e["split"] not in SPLITS:
            raise ValueError(f"unknown split {e['split']!r} for {e['file']}")
        if not 0 <= e["label"] < doc["n_classes"]:
            raise ValueError(f"label {e['label']} out of range for {e['file']}")
        sig = e.get("signal_slices")
        entries.append(ManifestEntry(e["file"], int(e["label"]), e["split"],
                                     None if sig is None else tuple(tuple(s) for s in sig)))
    files = [e.file for e in entries]
    if len(set(files)) != len(files):
        raise ValueError("manifest lists a file more than once")
    return DatasetManifest(doc["name"], int(doc["n_classes"]), entries, doc.get("generator"),
                           os.path.dirname(os.path.abspath(path)))


class Dataset:
    """All volumes of a manifest held in memory, stacked per split."""

    def __init__(self, manifest, volumes):
        self.manifest = manifest
        self.n_classes = manifest.n_classes
        self.splits = {}
        for split in SPLITS:
            idx = [i for i, e in enumerate(manifest.entries) if e.split == split]
            vols = [volumes[i] for i in idx]
            self.splits[split] = {
                "x": np.stack([v.data for v in vols]) if vols else np.zeros((0, 1, 1, 1, 1), np.float32),
                "y": np.array([v.label for v in vols], dtype=np.int64),
                "ids": [v.id for v in vols],
                "signal": [v.signal_slices for v in vols],
            }

    @classmethod
    def from_manifest(cls, path):
        manifest = load_manifest(path)
        volumes = []
        for e in manifest.entries:
            v = load_volume(os.path.join(manifest.root, e.file))
            if v.label != e.label:
                raise ValueError(f"{e.file}: label {v.label} disagrees with manifest label {e.label}")
            v.signal_slices = e.signal_slices
            volumes.append(v)
        return cls(manifest, volumes)

    def size(self, split):
        return len(self.splits[split]["y"])


def batch_iterator(dataset, split, batch_size, shuffle_seed=None, epoch=0):
    """Yield ``(x [b, c, d, h, w], labels)`` covering the split once.

    Without ``shuffle_seed`` the manifest order is kept; otherwise the order is
    a permutation drawn from ``(shuffle_seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    part = dataset.splits[split]
    n = len(part["y"])
    if n == 0:
        raise ValueError(f"split {split!r} is empty")
    order = np.arange(n)
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield part["x"][idx], part["y"][idx]


# -- synthetic data --------------------------------------------------------

def _blob_mask(shape, kind, size, rng):
    d, h, w = shape
    corner = [int(rng.integers(0, n - size + 1)) for n in shape]
    mask = np.zeros(shape, dtype=bool)
    if kind == "cube":
        mask[corner[0]:corner[0] + size, corner[1]:corner[1] + size, corner[2]:corner[2] + size] = True
    elif kind == "ball":
        zz, yy, xx = np.meshgrid(*(np.arange(n) for n in shape), indexing="ij")
        center = [c + (size - 1) / 2 for c in corner]
        r2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
        mask = r2 <= (size / 2) ** 2
    else:
        raise ValueError(f"unknown signal kind {kind!r}; expected 'cube' or 'ball'")
    return mask


def signal_slices_of(mask):
    """All (axis, position) slices that intersect a voxel mask, axial first."""
    out = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hit = mask.any(axis=other)
        out.extend((axis, int(p)) for p in np.flatnonzero(hit))
    return tuple(out)


def generate_synthetic(n_per_class, shape, signal_kind="cube", noise_sigma=0.1, seed=0,
                       amplitude=0.8, blob_size=4, background=0.1, name="planted"):
    """Two-class planted-signal volumes and their stratified 60/20/20 manifest.

    Class 0 is ``background + N(0, sigma^2)`` clipped to ``[0, 1]``; class 1 adds
    a bright blob of side ``blob_size`` at a random location. The slices
    crossing the blob are recorded as ``signal_slices``.
    Returns ``(manifest, volumes)`` with manifest entries in volume order.
    """
    if isinstance(shape, int):
        shape = (shape,) * 3
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 8:
        raise ValueError(f"synthetic volumes need >= 8 voxels per axis, got {shape}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if not 1 <= blob_size <= min(shape):
        raise ValueError(f"blob_size {blob_size} does not fit in {shape}")
    rng = np.random.default_rng(seed)
    volumes = []
    for label in (0, 1):
        for _ in range(n_per_class):
            noise = rng.normal(0.0, noise_sigma, size=shape) if noise_sigma > 0 else np.zeros(shape)
            data = background + noise
            signal = None
            if label == 1:
                mask = _blob_mask(shape, signal_kind, blob_size, rng)
                data = data + amplitude * mask
                signal = signal_slices_of(mask)
            data = np.clip(data, 0.0, 1.0)[None].astype(np.float32)
            volumes.append(Volume(f"{name}_{len(volumes):05d}", data, label, signal))

    splits = [None] * len(volumes)
    for label in (0, 1):
        idx = np.arange(label * n_per_class, (label + 1) * n_per_class)
        idx = rng.permutation(idx)
        n_train = int(round(0.6 * n_per_class))
        n_val = int(round(0.2 * n_per_class))
        for j, i in enumerate(idx):
            splits[i] = "train" if j < n_train else ("val" if j < n_train + n_val else "test")

    entries = [ManifestEntry(f"{v.id}.rvf", v.label, s, v.signal_slices) for v, s in zip(volumes, splits)]
    generator = {"n_per_class": n_per_class, "shape": list(shape), "signal_kind": signal_kind,
                 "noise_sigma": noise_sigma, "seed": seed, "amplitude": amplitude,
                 "blob_size": blob_size, "background": background}
    return DatasetManifest(name, 2, entries, generator), volumes


def write_dataset(manifest, volumes, out_dir):
    """Write every volume as RVF plus ``manifest.json``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    for e, v in zip(manifest.entries, volumes):
        write_volume(os.path.join(out_dir, e.file), v)
    path = os.path.join(out_dir, "manifest.json")
    manifest.save(path)
    manifest.root = os.path.abspath(out_dir)
    return path
