"""Wafer-map records, datasets, the native file format and preprocessing.

Native dataset file (all integers little-endian)::

    b"WFRD0001"  u32 record_count
    per record:  u16 H  u16 W  u8 label_mask  H*W bytes of grid values

A JSON sidecar ``<file>.meta.json`` records the seed, per-class counts and
generator version.
"""

from dataclasses import dataclass, field
import json
import logging
import math
import os
import struct
from typing import Dict, Iterator, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import generator
from .errors import ContractError, FormatError
from .generator import BACKGROUND, DEFECT_DIE, DISC, GRID, NORMAL_DIE
from .patterns import MASK_TO_INDEX, NUM_BASE, NUM_CLASSES, class_of, get_class, table3_counts

log = logging.getLogger(__name__)

MAGIC = b"WFRD0001"
_HEADER = struct.Struct("<8sI")
_RECORD = struct.Struct("<HHB")
GRID_VALUES = np.array([0.0, 0.5, 1.0])
ZOOM_RANGE = (0.9, 1.1)


@dataclass
class WaferMap:
    grid: np.ndarray            # uint8 [52, 52], values in {0, 1, 2}
    label_mask: int

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.uint8)
        self.label_mask = int(self.label_mask)

    @property
    def pattern(self):
        return class_of(self.label_mask)

    def defect_count(self) -> int:
        return int((self.grid == DEFECT_DIE).sum())

    def __eq__(self, other):
        return (isinstance(other, WaferMap) and self.label_mask == other.label_mask
                and np.array_equal(self.grid, other.grid))


def generate(class_id: int, seed) -> WaferMap:
    """Synthetic wafer map of the given class; deterministic per ``(class_id, seed)``."""
    pc = get_class(class_id)
    return WaferMap(generator.generate_grid(class_id, seed), pc.mask)


@dataclass
class Dataset:
    """Immutable-by-convention batch of wafer maps stored as dense arrays."""

    grids: np.ndarray                       # uint8 [n, 52, 52]
    masks: np.ndarray                       # uint8 [n]
    provenance: str = "synthetic"
    seed: Optional[int] = None
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.grids = np.ascontiguousarray(self.grids, dtype=np.uint8).reshape(-1, GRID, GRID)
        self.masks = np.ascontiguousarray(self.masks, dtype=np.uint8).reshape(-1)
        if len(self.grids) != len(self.masks):
            raise ContractError(f"{len(self.grids)} grids but {len(self.masks)} masks")

    @classmethod
    def from_records(cls, records: Sequence[WaferMap], **kw) -> "Dataset":
        grids = np.stack([r.grid for r in records]) if records else np.zeros((0, GRID, GRID), np.uint8)
        masks = np.array([r.label_mask for r in records], dtype=np.uint8)
        return cls(grids, masks, **kw)

    def __len__(self):
        return len(self.masks)

    def __getitem__(self, i) -> WaferMap:
        return WaferMap(self.grids[i].copy(), int(self.masks[i]))

    def __iter__(self) -> Iterator[WaferMap]:
        for i in range(len(self)):
            yield self[i]

    @property
    def records(self):
        return list(self)

    @property
    def class_indices(self) -> np.ndarray:
        """0-based class index per record, -1 for masks outside the table."""
        return np.array([MASK_TO_INDEX[m] for m in self.masks], dtype=np.int64)

    def class_counts(self) -> Dict[int, int]:
        idx = self.class_indices
        return {k + 1: int((idx == k).sum()) for k in range(NUM_CLASSES) if (idx == k).any()}

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.grids[indices], self.masks[indices], self.provenance, self.seed)

    def to_bytes(self) -> bytes:
        return dataset_to_bytes(self)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and np.array_equal(self.grids, other.grids)
                and np.array_equal(self.masks, other.masks))


def generate_dataset(per_class_counts: Optional[Mapping[int, int]] = None, seed: int = 0) -> Dataset:
    """Synthetic dataset; default counts mirror the WM-38k class amounts.

    Record ``i`` of class ``k`` is generated from the seed sequence
    ``[seed, k, i]``, then all records are shuffled with ``seed``.
    """
    counts = table3_counts() if per_class_counts is None else dict(per_class_counts)
    grids, masks = [], []
    for class_id in sorted(counts):
        n = int(counts[class_id])
        if n < 0:
            raise ContractError(f"negative count {n} for class C{class_id}")
        pc = get_class(class_id)
        for i in range(n):
            grids.append(generator.generate_grid(class_id, [seed, class_id, i]))
            masks.append(pc.mask)
    order = np.random.default_rng([seed, 0xD5]).permutation(len(masks))
    g = np.stack(grids)[order] if grids else np.zeros((0, GRID, GRID), np.uint8)
    m = np.array(masks, dtype=np.uint8)[order]
    meta = {"seed": seed, "per_class_counts": {f"C{k}": int(v) for k, v in sorted(counts.items())},
            "generator_version": generator.GENERATOR_VERSION}
    return Dataset(g, m, "synthetic", seed, meta)


# -- file format -----------------------------------------------------------

def dataset_to_bytes(ds: Dataset) -> bytes:
    n = len(ds)
    body = np.empty((n, _RECORD.size + GRID * GRID), dtype=np.uint8)
    head = np.frombuffer(_RECORD.pack(GRID, GRID, 0), dtype=np.uint8)
    body[:, :_RECORD.size] = head
    body[:, _RECORD.size - 1] = ds.masks
    body[:, _RECORD.size:] = ds.grids.reshape(n, GRID * GRID)
    return _HEADER.pack(MAGIC, n) + body.tobytes()


def dataset_from_bytes(buf: bytes, provenance: str = "imported") -> Dataset:
    if len(buf) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(buf)} bytes)")
    magic, n = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    grids = np.empty((n, GRID, GRID), dtype=np.uint8)
    masks = np.empty(n, dtype=np.uint8)
    off = _HEADER.size
    for i in range(n):
        if off + _RECORD.size > len(buf):
            raise FormatError("truncated record header", i)
        h, w, mask = _RECORD.unpack_from(buf, off)
        off += _RECORD.size
        if (h, w) != (GRID, GRID):
            raise FormatError(f"grid is {h}x{w}, only {GRID}x{GRID} is supported", i)
        if off + h * w > len(buf):
            raise FormatError("truncated grid payload", i)
        g = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=off)
        off += h * w
        if g.max(initial=0) > DEFECT_DIE:
            raise FormatError(f"grid value {int(g.max())} outside {{0,1,2}}", i)
        if class_of(mask) is None:
            raise FormatError(f"label mask {mask:#04x} is not one of the 38 patterns", i)
        grids[i] = g.reshape(GRID, GRID)
        masks[i] = mask
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after {n} records")
    return Dataset(grids, masks, provenance)


def meta_path(path) -> str:
    return os.fspath(path) + ".meta.json"


def save(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))
    meta = dict(ds.meta) or {"seed": ds.seed,
                             "per_class_counts": {f"C{k}": v for k, v in ds.class_counts().items()},
                             "generator_version": generator.GENERATOR_VERSION}
    meta.setdefault("records", len(ds))
    with open(meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    ds = dataset_from_bytes(buf)
    mp = meta_path(path)
    if os.path.exists(mp):
        with open(mp) as fh:
            ds.meta = json.load(fh)
        ds.seed = ds.meta.get("seed")
    return ds


# -- split ---------------------------------------------------------------

def split(ds: Dataset, ratio: float = 0.8, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Stratified train/test split; per class ``floor(ratio * n)`` go to train.

    Classes with a single record send it to train (with a warning).  Record
    order inside each side follows the input order.
    """
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng([seed, 0x5B])
    masks = ds.masks
    train_sel = np.zeros(len(ds), dtype=bool)
    for m in np.unique(masks):
        idx = np.flatnonzero(masks == m)
        n = len(idx)
        k = math.floor(ratio * n + 1e-9)
        if n == 1:
            log.warning("class mask %#04x has a single record; assigning it to train", m)
            k = 1
        train_sel[rng.permutation(idx)[:k]] = True
    return ds.subset(np.flatnonzero(train_sel)), ds.subset(np.flatnonzero(~train_sel))


# -- augmentation --------------------------------------------------------

def apply_augmentation(grid: np.ndarray, rotation: int = 0, hflip: bool = False,
                       vflip: bool = False, zoom: float = 1.0) -> np.ndarray:
    """Deterministic augmentation; ``rotation`` counts quarter turns."""
    g = np.rot90(grid, rotation % 4)
    if hflip:
        g = g[:, ::-1]
    if vflip:
        g = g[::-1, :]
    if zoom != 1.0:
        g = _zoom_nearest(g, zoom)
    return np.ascontiguousarray(g, dtype=np.uint8)


def _zoom_nearest(grid: np.ndarray, zoom: float) -> np.ndarray:
    coords = (np.arange(GRID) + 0.5 - GRID / 2.0) / zoom + GRID / 2.0
    src = np.floor(coords).astype(np.int64)
    ok = (src >= 0) & (src < GRID)
    srcc = np.clip(src, 0, GRID - 1)
    out = grid[np.ix_(srcc, srcc)].copy()
    out[~(ok[:, None] & ok[None, :])] = BACKGROUND
    # keep the fixed wafer footprint: dies outside it vanish, holes become normal dies
    out[~DISC] = BACKGROUND
    out[DISC & (out == BACKGROUND)] = NORMAL_DIE
    return out


def sample_augmentation(rng: np.random.Generator) -> dict:
    return dict(rotation=int(rng.integers(4)), hflip=bool(rng.random() < 0.5),
                vflip=bool(rng.random() < 0.5), zoom=float(rng.uniform(*ZOOM_RANGE)))


def augment(w: WaferMap, rng: np.random.Generator) -> WaferMap:
    return WaferMap(apply_augmentation(w.grid, **sample_augmentation(rng)), w.label_mask)


def augment_grids(grids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([apply_augmentation(g, **sample_augmentation(rng)) for g in grids])


# -- model input -----------------------------------------------------------

def bilinear_matrix(in_size: int, out_size: int) -> np.ndarray:
    """``[out, in]`` interpolation weights, half-pixel (align_corners=False) convention."""
    scale = in_size / out_size
    src = np.clip((np.arange(out_size) + 0.5) * scale - 0.5, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


_RESIZE_CACHE: Dict[Tuple[int, int], np.ndarray] = {}


def resize_bilinear(images: np.ndarray, out_size: int) -> np.ndarray:
    """Separable bilinear resize of ``[..., H, W]`` square images."""
    in_size = images.shape[-1]
    if in_size == out_size:
        return images.copy()
    key = (in_size, out_size)
    if key not in _RESIZE_CACHE:
        _RESIZE_CACHE[key] = bilinear_matrix(in_size, out_size)
    m = _RESIZE_CACHE[key]
    return np.clip(m @ images @ m.T, 0.0, 1.0)


def grid_values(grids: np.ndarray) -> np.ndarray:
    return GRID_VALUES[np.asarray(grids, dtype=np.int64)]


def to_model_input(w: Union[WaferMap, np.ndarray], image_size: int, dtype=np.float32) -> np.ndarray:
    """``[1, S, S]`` array: {0,1,2} -> {0, 0.5, 1} then bilinear resize."""
    grid = w.grid if isinstance(w, WaferMap) else w
    return to_model_batch(grid[None], image_size, dtype)[0]


def to_model_batch(grids: np.ndarray, image_size: int, dtype=np.float32) -> np.ndarray:
    """``[B, 1, S, S]`` model inputs for a stack of grids."""
    if image_size < 1:
        raise ContractError(f"image_size must be positive, got {image_size}")
    x = resize_bilinear(grid_values(grids), image_size)
    return x[:, None].astype(dtype)


def target_matrix(masks: np.ndarray) -> np.ndarray:
    """``[B, 8]`` 0/1 targets in canonical base-defect order."""
    masks = np.asarray(masks, dtype=np.int64)
    return ((masks[:, None] >> np.arange(NUM_BASE)) & 1).astype(np.float64)
