"""Synthetic occluded re-ID data, the binary tensor container, and attention export."""
from __future__ import annotations

import csv
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .backbone import DOWNSAMPLE
from .errors import ConfigError, DimensionError

MAGIC = b"MHSA"
FORMAT_VERSION = 1


# ---------------------------------------------------------------- container


class ContainerError(IOError):
    """Base class for container load failures."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedContainerError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


def encode_container(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"entry {name!r} exceeds container limits")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_container(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not an MHSA container (bad magic)")
    if len(buf) < 14:
        raise TruncatedContainerError("container shorter than its fixed header")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"container version {version}, expected {FORMAT_VERSION}")
    out: dict[str, np.ndarray] = {}
    pos = 10
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            if pos + nlen > len(body):
                raise struct.error("name runs past end")
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            nbytes = int(np.prod(dims, dtype=np.int64)) * 8
            if pos + nbytes > len(body):
                raise struct.error("payload runs past end")
            out[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).astype(np.float64)
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise TruncatedContainerError(f"container truncated or malformed: {exc}") from None
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch")
    if pos != len(body):
        raise TruncatedContainerError(f"{len(body) - pos} trailing bytes after the last entry")
    return out


def save_container(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_container(entries))


def load_container(path) -> dict[str, np.ndarray]:
    return decode_container(Path(path).read_bytes())


def pack_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def unpack_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_ids: int = 20
    samples_per_id: int = 10
    n_test_ids: int = 10
    query_per_id: int = 4
    gallery_per_id: int = 6
    Hf: int = 6
    Wf: int = 4
    C: int = 64
    prototype_std: float = 1.0
    within_id_std: float = 0.5
    occlusion_prob: float = 0.5
    query_occlusion_prob: float = 1.0
    occluder_area_frac: tuple[float, float] = (0.2, 0.4)
    occluder_std: float = 2.0
    occluder_offset: float = 3.0
    n_cameras: int = 2
    modality: str = "features"
    image_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "occluder_area_frac", tuple(float(v) for v in self.occluder_area_frac))
        lo, hi = self.occluder_area_frac
        if not (0 < lo <= hi < 1):
            raise ConfigError("occluder_area_frac must satisfy 0 < lo <= hi < 1")
        for name in ("occlusion_prob", "query_occlusion_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.n_ids < 4:
            raise ConfigError("n_ids must be >= 4")
        if self.samples_per_id < 2 or self.n_test_ids < 1 or self.query_per_id < 1 or self.gallery_per_id < 1:
            raise ConfigError("infeasible split sizes")
        if min(self.Hf, self.Wf, self.C, self.n_cameras) < 1:
            raise ConfigError("dimensions and camera count must be >= 1")
        if min(self.prototype_std, self.within_id_std, self.occluder_std) < 0:
            raise ConfigError("standard deviations must be >= 0")
        if self.modality not in ("features", "images"):
            raise ConfigError(f"unknown modality {self.modality!r}")

    @property
    def J(self) -> int:
        return self.Hf * self.Wf


@dataclass
class LabeledSample:
    feature_map: np.ndarray  # J x C, or the image when modality is "images"
    id: int
    cam: int
    occlusion_mask: np.ndarray  # J booleans


@dataclass
class Split:
    """Columnar storage for one split."""

    x: np.ndarray  # N x J x C features, or N x Hi x Wi x Ci images
    ids: np.ndarray
    cams: np.ndarray
    masks: np.ndarray  # N x J booleans
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.x[i], int(self.ids[i]), int(self.cams[i]), self.masks[i])

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.x[idx], self.ids[idx], self.cams[idx], self.masks[idx], dict(self.meta))

    def to_entries(self) -> dict[str, np.ndarray]:
        return {"x": self.x, "ids": self.ids.astype(np.float64), "cams": self.cams.astype(np.float64),
                "masks": self.masks.astype(np.float64)}

    @classmethod
    def from_entries(cls, entries: Mapping[str, np.ndarray]) -> "Split":
        return cls(entries["x"], entries["ids"].astype(np.int64), entries["cams"].astype(np.int64),
                   entries["masks"] > 0.5)


def _rect_shape(n: int, Hf: int, Wf: int, rng: np.random.Generator) -> tuple[int, int]:
    """A random ``h x w`` block of area ``n`` fitting the grid, else the closest feasible area."""
    for delta in range(Hf * Wf):
        for area in (n - delta, n + delta):
            if area < 1:
                continue
            shapes = [(h, area // h) for h in range(1, Hf + 1) if area % h == 0 and area // h <= Wf]
            if shapes:
                return shapes[rng.integers(len(shapes))]
    return 1, 1


def occlusion_block(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.occluder_area_frac
    frac = lo if lo == hi else rng.uniform(lo, hi)
    h, w = _rect_shape(int(round(frac * spec.J)), spec.Hf, spec.Wf, rng)
    y0 = rng.integers(spec.Hf - h + 1)
    x0 = rng.integers(spec.Wf - w + 1)
    grid = np.zeros((spec.Hf, spec.Wf), dtype=bool)
    grid[y0:y0 + h, x0:x0 + w] = True
    return grid.reshape(-1)


def _upsample_mask(mask: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    grid = mask.reshape(spec.Hf, spec.Wf)
    return np.kron(grid, np.ones((DOWNSAMPLE, DOWNSAMPLE), dtype=bool)).astype(bool)


def _make_split(spec, rng, prototypes, id_list, per_id, occ_prob, occluder_center) -> Split:
    xs, ids, cams, masks = [], [], [], []
    shape = prototypes.shape[1:]
    for pid, proto in zip(id_list, prototypes):
        for _ in range(per_id):
            x = proto + rng.normal(0.0, spec.within_id_std, shape)
            mask = occlusion_block(spec, rng) if rng.random() < occ_prob else np.zeros(spec.J, dtype=bool)
            if mask.any():
                if spec.modality == "features":
                    noise = occluder_center + rng.normal(0.0, spec.occluder_std, (int(mask.sum()), spec.C))
                    x[mask] = noise
                else:
                    big = _upsample_mask(mask, spec)
                    noise = occluder_center + rng.normal(0.0, spec.occluder_std, (int(big.sum()), spec.image_channels))
                    x[big] = noise
            xs.append(x)
            ids.append(pid)
            cams.append(rng.integers(spec.n_cameras))
            masks.append(mask)
    return Split(np.stack(xs), np.asarray(ids, dtype=np.int64), np.asarray(cams, dtype=np.int64),
                 np.stack(masks))


def generate_dataset(spec: SyntheticSpec) -> dict[str, Split]:
    """Train/query/gallery splits; test identities are disjoint from training ones.

    Occluded pixels are overwritten by draws from one occluder distribution
    shared by every identity (mean ``occluder_offset`` along a fixed random
    direction, spread ``occluder_std``), so they carry no identity evidence.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.modality == "features":
        shape = (spec.J, spec.C)
        depth = spec.C
    else:
        shape = (spec.Hf * DOWNSAMPLE, spec.Wf * DOWNSAMPLE, spec.image_channels)
        depth = spec.image_channels
    direction = rng.normal(size=depth)
    occluder_center = spec.occluder_offset * direction / np.linalg.norm(direction)
    n_total = spec.n_ids + spec.n_test_ids
    prototypes = rng.normal(0.0, spec.prototype_std, (n_total,) + shape)
    train_ids = np.arange(spec.n_ids)
    test_ids = np.arange(spec.n_ids, n_total)
    train = _make_split(spec, rng, prototypes[:spec.n_ids], train_ids, spec.samples_per_id,
                        spec.occlusion_prob, occluder_center)
    query = _make_split(spec, rng, prototypes[spec.n_ids:], test_ids, spec.query_per_id,
                        spec.query_occlusion_prob, occluder_center)
    gallery = _make_split(spec, rng, prototypes[spec.n_ids:], test_ids, spec.gallery_per_id, 0.0, occluder_center)
    return {"train": train, "query": query, "gallery": gallery}


def spec_dict(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    d["occluder_area_frac"] = list(spec.occluder_area_frac)
    return d


def save_splits(splits: Mapping[str, Split], out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {}
    for name, split in splits.items():
        paths[name] = out_dir / f"{name}.mhsa"
        save_container(paths[name], split.to_entries())
    return paths


def load_splits(data_dir, names=("train", "query", "gallery")) -> dict[str, Split]:
    data_dir = Path(data_dir)
    return {n: Split.from_entries(load_container(data_dir / f"{n}.mhsa")) for n in names}


# ---------------------------------------------------------------- attention export


def attention_occlusion_score(alpha, mask, head_weights=None) -> float:
    """Share of the attention mass that lands on occluded pixels.

    Pixel ``j`` carries mass ``w_j = sum_k h_k * alpha[j, k]`` with head
    weights ``h`` (uniform ``1/K`` by default, or e.g. the fusion weights of
    a trained model); the score is ``sum_{j occluded} w_j / sum_j w_j``.
    With uniform head weights and rows of ``alpha`` summing to one this is
    the occluded-pixel fraction, whatever ``alpha`` is.
    """
    a = np.asarray(alpha, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if a.ndim != 2 or mask.shape != (a.shape[0],):
        raise DimensionError(f"alpha {a.shape} and mask {mask.shape} disagree on J")
    if head_weights is None:
        h = np.full(a.shape[1], 1.0 / a.shape[1])
    else:
        h = np.asarray(head_weights, dtype=np.float64)
        if h.shape != (a.shape[1],):
            raise DimensionError(f"head_weights {h.shape} vs {a.shape[1]} heads")
    w = a @ h
    total = w.sum()
    if total <= 0:
        return 0.0
    return float(w[mask].sum() / total)


def _to_gray(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi - lo <= 1e-15 * max(abs(hi), 1.0):
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)


def export_attention(alpha, Hf: int, Wf: int, out_prefix) -> list[Path]:
    """Write one ``Hf x Wf`` grayscale PGM per head plus a ``pixel,head,weight`` CSV."""
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != Hf * Wf:
        raise DimensionError(f"alpha has {a.shape[0] if a.ndim else 0} pixels, grid is {Hf}x{Wf}")
    prefix = os.fspath(out_prefix)
    paths = []
    for k in range(a.shape[1]):
        path = Path(f"{prefix}_head{k}.pgm")
        write_pgm(path, _to_gray(a[:, k]).reshape(Hf, Wf))
        paths.append(path)
    csv_path = Path(f"{prefix}_attention.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pixel", "head", "weight"])
        for j in range(a.shape[0]):
            for k in range(a.shape[1]):
                writer.writerow([j, k, repr(float(a[j, k]))])
    paths.append(csv_path)
    return paths
