"""Synthetic multi-scale pyramids with planted fine-scale evidence.

A pyramid is a region tree: ``coarse_grid**2`` regions at scale 0 (the
coarsest), each split into ``branching`` children per scale step. Lesion
clusters are planted on the finest grid; coarser regions inherit a latent
type from their descendants. Features are produced lazily by a frozen
:class:`EncoderStub` and memoised in a :class:`FeatureCache` that counts
first-time encodings per scale.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

BACKGROUND = 0
BENIGN = 1
LESION_BASE = 2

MANIFEST_VERSION = "pathseek-manifest/1"
CACHE_MAGIC = b"PSFC"
CACHE_VERSION = 1


def type_name(latent_type: int) -> str:
    if latent_type == BACKGROUND:
        return "background"
    if latent_type == BENIGN:
        return "benign"
    k = latent_type - LESION_BASE
    return "lesion_" + (chr(ord("a") + k) if k < 26 else str(k))


def is_lesion(latent_type):
    return latent_type >= LESION_BASE


@dataclass(frozen=True)
class PyramidConfig:
    num_scales: int = 3
    coarse_grid: int = 8
    branching: int = 4
    feature_dim: int = 32
    num_classes: int = 3
    coarse_snr: float = 0.3
    lesion_fraction: float = 0.04
    noise_sigma: float = 0.6
    seed: int = 0
    # the frozen encoder is shared across datasets, so it has its own seed
    encoder_seed: int = 0
    num_clusters: int = 2
    benign_fraction: float = 0.3
    signal_scale: float = 2.0
    feature_norm_cap: float = 8.0

    def validate(self) -> None:
        def bad(name, why):
            raise ValueError(f"PyramidConfig.{name}: {why}")

        if self.num_scales < 2:
            bad("num_scales", "must be >= 2")
        if self.coarse_grid < 1:
            bad("coarse_grid", "must be >= 1")
        if self.branching < 2 or math.isqrt(self.branching) ** 2 != self.branching:
            bad("branching", "must be a perfect square >= 4")
        if self.feature_dim < 1:
            bad("feature_dim", "must be >= 1")
        if self.num_classes < 2:
            bad("num_classes", "must be >= 2")
        if not 0.0 <= self.coarse_snr <= 1.0:
            bad("coarse_snr", "must lie in [0, 1]")
        if not 0.0 < self.lesion_fraction <= 1.0:
            bad("lesion_fraction", "must lie in (0, 1]")
        if self.lesion_fraction * self.regions_at(self.num_scales - 1) < 1:
            bad("lesion_fraction", "leaves no finest region to plant evidence in")
        if self.noise_sigma <= 0:
            bad("noise_sigma", "must be > 0")
        if self.num_clusters < 1:
            bad("num_clusters", "must be >= 1")
        if not 0.0 <= self.benign_fraction <= 1.0:
            bad("benign_fraction", "must lie in [0, 1]")
        if self.feature_norm_cap <= 0:
            bad("feature_norm_cap", "must be > 0")

    @property
    def step(self) -> int:
        return math.isqrt(self.branching)

    def side(self, scale: int) -> int:
        return self.coarse_grid * self.step**scale

    def regions_at(self, scale: int) -> int:
        return self.coarse_grid**2 * self.branching**scale

    @property
    def total_regions(self) -> int:
        return sum(self.regions_at(s) for s in range(self.num_scales))

    def offset(self, scale: int) -> int:
        return sum(self.regions_at(s) for s in range(scale))

    def region_id(self, scale: int, row: int, col: int) -> int:
        return self.offset(scale) + row * self.side(scale) + col

    def locate(self, rid: int) -> tuple[int, int, int]:
        """Map a region id back to ``(scale, row, col)``."""
        if rid < 0:
            raise KeyError(f"unknown region id {rid}")
        base = 0
        for s in range(self.num_scales):
            n = self.regions_at(s)
            if rid < base + n:
                r, c = divmod(rid - base, self.side(s))
                return s, r, c
            base += n
        raise KeyError(f"unknown region id {rid}")

    @classmethod
    def from_dict(cls, d: dict) -> PyramidConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"PyramidConfig: unknown keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Region:
    id: int
    scale: int
    grid_coords: tuple[int, int]
    parent: int | None
    children: tuple[int, ...]
    latent_type: int


@dataclass
class PyramidInstance:
    config: PyramidConfig
    label: int
    generator_seed: int
    scale_types: list[np.ndarray]
    clusters: tuple[tuple[int, ...], ...]
    informative_set: frozenset[int]

    @property
    def num_scales(self) -> int:
        return self.config.num_scales

    def region_ids(self, scale: int) -> list[int]:
        off = self.config.offset(scale)
        return list(range(off, off + self.config.regions_at(scale)))

    def latent_type(self, rid: int) -> int:
        s, r, c = self.config.locate(rid)
        return int(self.scale_types[s][r, c])

    def parent_of(self, rid: int) -> int | None:
        s, r, c = self.config.locate(rid)
        if s == 0:
            return None
        k = self.config.step
        return self.config.region_id(s - 1, r // k, c // k)

    def children_of(self, rid: int) -> list[int]:
        return children_of(self, rid)

    def ancestor_at(self, rid: int, scale: int) -> int:
        s, r, c = self.config.locate(rid)
        if scale > s:
            raise ValueError(f"scale {scale} is finer than region {rid} (scale {s})")
        k = self.config.step ** (s - scale)
        return self.config.region_id(scale, r // k, c // k)

    def region(self, rid: int) -> Region:
        s, r, c = self.config.locate(rid)
        return Region(
            id=rid,
            scale=s,
            grid_coords=(r, c),
            parent=self.parent_of(rid),
            children=tuple(self.children_of(rid)),
            latent_type=int(self.scale_types[s][r, c]),
        )

    def regions(self) -> Iterator[Region]:
        for s in range(self.num_scales):
            for rid in self.region_ids(s):
                yield self.region(rid)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.label, self.generator_seed, [list(c) for c in self.clusters]]).encode())
        for grid in self.scale_types:
            h.update(np.ascontiguousarray(grid, dtype=np.int16).tobytes())
        return h.hexdigest()


def children_of(instance: PyramidInstance, region: int) -> list[int]:
    cfg = instance.config
    s, r, c = cfg.locate(region)
    if s == cfg.num_scales - 1:
        return []
    k = cfg.step
    return [cfg.region_id(s + 1, r * k + i, c * k + j) for i in range(k) for j in range(k)]


def _block_shape(size: int) -> tuple[int, int]:
    w = math.ceil(math.sqrt(size))
    return w, math.ceil(size / w)


def _block_cells(size: int, top: int, left: int) -> list[tuple[int, int]]:
    w, _ = _block_shape(size)
    return [(top + i // w, left + i % w) for i in range(size)]


def _cluster_sizes(total: int, k: int) -> list[int]:
    k = max(1, min(k, total))
    if k == 1:
        return [total]
    minor = max(1, (total // 3) // (k - 1))
    return [total - minor * (k - 1)] + [minor] * (k - 1)


def _place(sizes: list[int], side: int, rng: np.random.Generator, attempts: int = 200):
    occupied = np.zeros((side, side), dtype=bool)
    placed = []
    for size in sizes:
        w, h = _block_shape(size)
        if w > side or h > side:
            return None
        spot = None
        for halo in (1, 0):
            for _ in range(attempts):
                top = int(rng.integers(0, side - h + 1))
                left = int(rng.integers(0, side - w + 1))
                cells = _block_cells(size, top, left)
                if all(not _near(occupied, r, c, halo) for r, c in cells):
                    spot = cells
                    break
            if spot is not None:
                break
        if spot is None:
            return None
        for r, c in spot:
            occupied[r, c] = True
        placed.append(spot)
    return placed


def _near(occupied: np.ndarray, r: int, c: int, halo: int) -> bool:
    n = occupied.shape[0]
    return bool(occupied[max(r - halo, 0):min(r + halo + 1, n), max(c - halo, 0):min(c + halo + 1, n)].any())


def majority_label(lesion_types, num_classes: int) -> int:
    counts = np.bincount(np.asarray(list(lesion_types), dtype=int) - LESION_BASE, minlength=num_classes)
    return int(np.argmax(counts))


def _coarsen(finest: np.ndarray, block: int, num_classes: int) -> np.ndarray:
    side = finest.shape[0] // block
    blocks = finest.reshape(side, block, side, block).transpose(0, 2, 1, 3).reshape(side, side, -1)
    lesion_counts = np.stack([(blocks == LESION_BASE + k).sum(-1) for k in range(num_classes)], -1)
    has_lesion = lesion_counts.sum(-1) > 0
    lesion_type = LESION_BASE + np.argmax(lesion_counts, -1)
    benign = (blocks == BENIGN).sum(-1)
    background = (blocks == BACKGROUND).sum(-1)
    other = np.where(benign > background, BENIGN, BACKGROUND)
    return np.where(has_lesion, lesion_type, other).astype(np.int16)


def plant_instance(config: PyramidConfig, instance_seed: int) -> PyramidInstance:
    """Generate one instance; a pure function of ``(config, instance_seed)``."""
    config.validate()
    rng = np.random.default_rng(int(instance_seed))
    side = config.side(config.num_scales - 1)
    total = side * side
    n_lesion = min(total, max(1, int(round(config.lesion_fraction * total))))

    dominant = int(rng.integers(config.num_classes))
    k = min(config.num_clusters, n_lesion)
    while True:
        sizes = _cluster_sizes(n_lesion, k)
        types = [dominant] + [int(rng.integers(config.num_classes)) for _ in sizes[1:]]
        placed = _place(sizes, side, rng)
        if placed is not None:
            break
        k -= 1  # k == 1 always fits: the grid is empty and the block fits the side
    nuisance = np.where(rng.random((side, side)) < config.benign_fraction, BENIGN, BACKGROUND)
    finest = nuisance.astype(np.int16)
    clusters = []
    for cells, t in zip(placed, types):
        ids = []
        for r, c in cells:
            finest[r, c] = LESION_BASE + t
            ids.append(config.region_id(config.num_scales - 1, r, c))
        clusters.append(tuple(sorted(ids)))

    z = config.num_scales
    scale_types = [_coarsen(finest, config.step ** (z - 1 - s), config.num_classes) for s in range(z - 1)]
    scale_types.append(finest)
    informative = frozenset(i for cl in clusters for i in cl)
    label = majority_label((finest.flat[i - config.offset(z - 1)] for i in sorted(informative)), config.num_classes)
    return PyramidInstance(
        config=config,
        label=label,
        generator_seed=int(instance_seed),
        scale_types=scale_types,
        clusters=tuple(clusters),
        informative_set=informative,
    )


class EncoderStub:
    """Frozen feature map standing in for a pretrained patch encoder.

    Each latent type has a fixed embedding. Lesion embeddings are pulled
    toward their common centroid by ``(1 - coarse_snr) * depth / (num_scales - 1)``
    where depth counts steps above the finest scale, so coarse scales cannot
    tell lesion subtypes apart when ``coarse_snr`` is small. Per-region noise
    is keyed by ``(stub seed, instance seed, region id)``. Outputs are
    radially projected onto the ball of radius ``feature_norm_cap``.
    """

    def __init__(self, config: PyramidConfig, seed: int | None = None):
        config.validate()
        self.config = config
        self.seed = int(config.encoder_seed if seed is None else seed)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x5EED]))
        n_types = LESION_BASE + config.num_classes
        d = config.feature_dim
        raw = rng.standard_normal((max(d, n_types), n_types))
        q, _ = np.linalg.qr(raw)
        basis = q[:d, :n_types].T
        basis /= np.linalg.norm(basis, axis=1, keepdims=True)
        self.type_embeddings = config.signal_scale * basis
        self.scale_embeddings = 0.5 * rng.standard_normal((config.num_scales, d)) / math.sqrt(d)
        self.lesion_centroid = self.type_embeddings[LESION_BASE:].mean(0)

    def mixing_factor(self, scale: int) -> float:
        z = self.config.num_scales
        return (1.0 - self.config.coarse_snr) * (z - 1 - scale) / (z - 1)

    def centroid(self, latent_type: int, scale: int) -> np.ndarray:
        mu = self.type_embeddings[latent_type]
        if latent_type >= LESION_BASE:
            m = self.mixing_factor(scale)
            mu = (1.0 - m) * mu + m * self.lesion_centroid
        return mu + self.scale_embeddings[scale]

    def project(self, v: np.ndarray) -> np.ndarray:
        n = np.linalg.norm(v)
        cap = self.config.feature_norm_cap
        return v * (cap / n) if n > cap else v

    def __call__(self, instance: PyramidInstance, scale: int, region: int) -> np.ndarray:
        t = instance.latent_type(region)
        ss = np.random.SeedSequence([self.seed, instance.generator_seed, int(region)])
        noise = np.random.default_rng(ss).standard_normal(self.config.feature_dim)
        return self.project(self.centroid(t, scale) + self.config.noise_sigma * noise)


@dataclass
class FeatureCache:
    """Memoised region features of one instance with exact per-scale encoder-call counters.

    ``owner`` is the generator seed of the instance the cache belongs to; it
    is bound on first use so a cache can never leak features across instances.
    """

    store: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    encoder_calls: Counter = field(default_factory=Counter)
    owner: int | None = None

    def __post_init__(self):
        self._lock = threading.Lock()

    def __contains__(self, key) -> bool:
        return key in self.store

    def __len__(self) -> int:
        return len(self.store)

    def get_or_encode(self, scale: int, region: int, encode: Callable[[], np.ndarray]) -> np.ndarray:
        key = (int(scale), int(region))
        with self._lock:
            vec = self.store.get(key)
            if vec is None:
                vec = np.asarray(encode(), dtype=np.float64)
                vec.setflags(write=False)
                self.store[key] = vec
                self.encoder_calls[key[0]] += 1
            return vec

    def calls_per_scale(self, num_scales: int) -> list[int]:
        return [int(self.encoder_calls.get(s, 0)) for s in range(num_scales)]

    def merge(self, other: FeatureCache) -> None:
        if None not in (self.owner, other.owner) and self.owner != other.owner:
            raise ValueError("cannot merge feature caches of different instances")
        with self._lock:
            self.owner = self.owner if self.owner is not None else other.owner
            for key, vec in sorted(other.store.items()):
                if key not in self.store:
                    self.store[key] = vec
                    self.encoder_calls[key[0]] += 1

    def save(self, path) -> None:
        d = len(next(iter(self.store.values()))) if self.store else 0
        rec = np.dtype([("scale", "<u2"), ("rid", "<u8"), ("vec", "<f4", (d,))])
        keys = sorted(self.store)
        arr = np.zeros(len(keys), dtype=rec)
        for i, k in enumerate(keys):
            arr[i] = (k[0], k[1], self.store[k])
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sII", CACHE_MAGIC, CACHE_VERSION, d))
            fh.write(arr.tobytes())

    @classmethod
    def load(cls, path) -> FeatureCache:
        """Read a flat feature file; counters reflect the stored records."""
        raw = Path(path).read_bytes()
        if len(raw) < 12:
            raise ValueError("feature cache: truncated header")
        magic, version, d = struct.unpack_from("<4sII", raw)
        if magic != CACHE_MAGIC:
            raise ValueError(f"feature cache: bad magic {magic!r}")
        if version != CACHE_VERSION:
            raise ValueError(f"feature cache: unsupported version {version}")
        rec = np.dtype([("scale", "<u2"), ("rid", "<u8"), ("vec", "<f4", (d,))])
        body = raw[12:]
        if len(body) % rec.itemsize:
            raise ValueError("feature cache: truncated record")
        arr = np.frombuffer(body, dtype=rec)
        cache = cls()
        for s, rid, vec in arr:
            v = vec.astype(np.float64)
            v.setflags(write=False)
            cache.store[(int(s), int(rid))] = v
            cache.encoder_calls[int(s)] += 1
        return cache


def encode_region(instance: PyramidInstance, scale: int, region: int, cache: FeatureCache, stub: EncoderStub) -> np.ndarray:
    s, _, _ = instance.config.locate(region)
    if s != scale:
        raise KeyError(f"region {region} lives at scale {s}, not {scale}")
    if cache.owner is None:
        cache.owner = instance.generator_seed
    elif cache.owner != instance.generator_seed:
        raise ValueError("feature cache belongs to a different instance")
    return cache.get_or_encode(scale, region, lambda: stub(instance, scale, region))


class FeatureBank(dict):
    """One FeatureCache per instance, keyed by generator seed."""

    def for_instance(self, instance: PyramidInstance) -> FeatureCache:
        cache = self.get(instance.generator_seed)
        if cache is None:
            cache = self[instance.generator_seed] = FeatureCache(owner=instance.generator_seed)
        return cache


def encode_regions(instance, scale, regions, cache, stub) -> np.ndarray:
    return np.stack([encode_region(instance, scale, r, cache, stub) for r in regions])


class ManifestError(ValueError):
    pass


class ManifestChecksumError(ManifestError):
    pass


class ManifestVersionError(ManifestError):
    pass


SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    config: PyramidConfig
    splits: dict[str, list[int]]
    seeds: dict[int, int]
    labels: dict[int, int]
    version: str = MANIFEST_VERSION

    def __post_init__(self):
        seen: set[int] = set()
        for name in SPLITS:
            ids = self.splits.setdefault(name, [])
            if seen & set(ids):
                raise ManifestError(f"split {name!r} overlaps another split")
            seen |= set(ids)
        unknown = seen - set(self.seeds)
        if unknown:
            raise ManifestError(f"split ids without seeds: {sorted(unknown)[:5]}")

    def instance(self, iid: int) -> PyramidInstance:
        return plant_instance(self.config, self.seeds[iid])

    def instances(self, split: str) -> list[tuple[int, PyramidInstance]]:
        return [(i, self.instance(i)) for i in self.splits[split]]

    def payload(self) -> dict:
        return {
            "version": self.version,
            "config": asdict(self.config),
            "splits": {k: list(map(int, self.splits[k])) for k in SPLITS},
            "instances": [
                {"id": int(i), "seed": int(self.seeds[i]), "label": int(self.labels[i])}
                for i in sorted(self.seeds)
            ],
        }

    def checksum(self) -> str:
        canon = json.dumps(self.payload(), sort_keys=True, separators=(",", ":"))
        return "sha256:" + hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, DatasetManifest) and self.payload() == other.payload()


def instance_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0])


def make_manifest(config: PyramidConfig, num_instances: int, fractions=(0.6, 0.15, 0.25)) -> DatasetManifest:
    config.validate()
    seeds = {i: instance_seed(config.seed, i) for i in range(num_instances)}
    labels = {i: plant_instance(config, s).label for i, s in seeds.items()}
    order = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5917])).permutation(num_instances)
    n_train = int(round(fractions[0] * num_instances))
    n_val = int(round(fractions[1] * num_instances))
    splits = {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val:]),
    }
    return DatasetManifest(config=config, splits=splits, seeds=seeds, labels=labels)


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = manifest.payload()
    doc["checksum"] = manifest.checksum()
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    try:
        doc = json.loads(Path(path).read_bytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"malformed manifest: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError("malformed manifest: top level is not an object")
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestVersionError(f"manifest version {doc.get('version')!r} != {MANIFEST_VERSION!r}")
    try:
        manifest = DatasetManifest(
            config=PyramidConfig.from_dict(doc["config"]),
            splits={k: [int(i) for i in doc["splits"][k]] for k in SPLITS},
            seeds={int(e["id"]): int(e["seed"]) for e in doc["instances"]},
            labels={int(e["id"]): int(e["label"]) for e in doc["instances"]},
            version=doc["version"],
        )
        stored = doc["checksum"]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(f"malformed manifest: {exc}") from exc
    if stored != manifest.checksum():
        raise ManifestChecksumError("manifest checksum mismatch")
    return manifest
