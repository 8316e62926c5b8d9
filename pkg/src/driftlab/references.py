"""Latent cache of the encoded corpus and the reference samplers built on it.

The cache stores, per molecule, the posterior-mean latent, the decoder
feature of that latent, the four descriptors, its split and its canonical
hash. Scalar conditioning uses the first descriptor and 20 equal-width bins
over its train range; multi-property conditioning uses standardized
Euclidean kNN over all four descriptors.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .molecule import canonical_hash, descriptors
from .grammar import decode
from .models import VAE, token_ids

log = logging.getLogger(__name__)

MAGIC = b"DLLC"
VERSION = 1
N_BINS = 20
SPLITS = ("train", "val", "test")
_HEADER = struct.Struct("<4sIQIII")


class CacheError(ValueError):
    pass


def _record_dtype(d_z: int, d_phi: int, n_props: int) -> np.dtype:
    return np.dtype(
        [("z", "<f8", (d_z,)), ("phi", "<f8", (d_phi,)), ("props", "<f8", (n_props,)), ("split", "u1"), ("hash", "<u8")]
    )


def _rows(a, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a if a.ndim == 2 else a.reshape(n, -1 if n else 0)


@dataclass(frozen=True)
class RefDraw:
    """Selected reference ids plus where they came from."""

    ids: np.ndarray
    bin: int = -1
    fallback_from: int | None = None


@dataclass
class LatentCache:
    z: np.ndarray
    phi: np.ndarray
    props: np.ndarray
    split: np.ndarray
    hashes: np.ndarray
    n_bins: int = N_BINS
    skipped: int = 0
    _bins: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        n = len(self.z)
        self.z, self.phi, self.props = (_rows(a, n) for a in (self.z, self.phi, self.props))
        self.split = np.asarray(self.split, dtype=np.uint8).reshape(n)
        self.hashes = np.asarray(self.hashes, dtype=np.uint64).reshape(n)
        self.train_ids = np.flatnonzero(self.split == 0)
        if len(self.train_ids):
            p = self.props[self.train_ids, 0]
            self.prop_range = (float(p.min()), float(p.max()))
            stats = self.props[self.train_ids]
            self.prop_mean = stats.mean(axis=0)
            std = stats.std(axis=0)
            self.prop_std = np.where(std > 0, std, 1.0)
            bins = self.bin_of(p)
            self._bins = [self.train_ids[bins == b] for b in range(self.n_bins)]
        else:
            self.prop_range = (0.0, 0.0)
            self.prop_mean = np.zeros(self.props.shape[1])
            self.prop_std = np.ones(self.props.shape[1])
            self._bins = [np.zeros(0, dtype=np.int64) for _ in range(self.n_bins)]

    def __len__(self) -> int:
        return len(self.z)

    @property
    def d_z(self) -> int:
        return self.z.shape[1]

    def bin_of(self, value):
        """Bin index of a property value; values outside the train range clamp to the end bins."""
        lo, hi = self.prop_range
        if hi <= lo:
            return np.zeros_like(np.asarray(value), dtype=np.int64)
        idx = np.floor((np.asarray(value, dtype=np.float64) - lo) / (hi - lo) * self.n_bins).astype(np.int64)
        return np.clip(idx, 0, self.n_bins - 1)

    def bin_members(self, b: int) -> np.ndarray:
        return self._bins[b]

    def train_hash_set(self) -> set[int]:
        return {int(h) for h in self.hashes[self.train_ids]}

    # -- persistence ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        rec = np.zeros(len(self), dtype=_record_dtype(self.z.shape[1], self.phi.shape[1], self.props.shape[1]))
        rec["z"], rec["phi"], rec["props"] = self.z, self.phi, self.props
        rec["split"], rec["hash"] = self.split, self.hashes
        header = _HEADER.pack(MAGIC, VERSION, len(self), self.z.shape[1], self.phi.shape[1], self.props.shape[1])
        return header + rec.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "LatentCache":
        if len(data) < _HEADER.size:
            raise CacheError("cache file truncated")
        magic, version, n, d_z, d_phi, n_props = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CacheError("not a latent cache (bad magic)")
        if version != VERSION:
            raise CacheError(f"unsupported cache version {version}")
        dt = _record_dtype(d_z, d_phi, n_props)
        if len(data) != _HEADER.size + n * dt.itemsize:
            raise CacheError("cache size does not match its header")
        rec = np.frombuffer(data, dtype=dt, offset=_HEADER.size, count=n)
        return cls(rec["z"].copy(), rec["phi"].copy(), rec["props"].copy(), rec["split"].copy(), rec["hash"].copy())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, vae: VAE | None = None, n_check: int = 8) -> "LatentCache":
        """Read a cache; with a VAE, re-derive features for a few entries and compare."""
        cache = cls.from_bytes(Path(path).read_bytes())
        if vae is not None:
            cache.verify(vae, n_check)
        return cache

    def verify(self, vae: VAE, n_check: int = 8, atol: float = 1e-12) -> None:
        ids = np.arange(min(n_check, len(self)))
        if len(ids) == 0:
            return
        phi = vae.decoder.features(self.z[ids]).value
        err = float(np.abs(phi - self.phi[ids]).max())
        if err > atol:
            raise CacheError(f"cached features disagree with the decoder (max error {err:.3g})")


def build_cache(vae: VAE, corpus: Sequence[tuple[Sequence[str], str]], batch_size: int = 256) -> LatentCache:
    """Encode a ``(tokens, split)`` corpus once: posterior means, features, descriptors, hashes."""
    L = vae.dims.seq_len
    kept = [(list(t), s) for t, s in corpus if len(t) <= L]
    skipped = len(corpus) - len(kept)
    if skipped:
        log.warning("skipped %d corpus entries longer than %d tokens", skipped, L)
    n = len(kept)
    z = np.zeros((n, vae.dims.d_z))
    phi = np.zeros((n, vae.dims.d_phi))
    for start in range(0, n, batch_size):
        ids = token_ids([t for t, _ in kept[start : start + batch_size]], L)
        mu, _ = vae.encoder(ids)
        z[start : start + len(ids)] = mu.value
        phi[start : start + len(ids)] = vae.decoder.features(mu.value).value
    graphs = [decode(t) for t, _ in kept]
    props = np.array([descriptors(g) for g in graphs]).reshape(n, 4)
    split = np.array([SPLITS.index(s) for _, s in kept], dtype=np.uint8)
    hashes = np.array([canonical_hash(g) for g in graphs], dtype=np.uint64)
    return LatentCache(z, phi, props, split, hashes, skipped=skipped)


def _nearest(points: np.ndarray, query: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """The k ids closest to ``query``; ties go to the smaller id."""
    d = np.sqrt(((points - query) ** 2).sum(axis=1))
    order = np.lexsort((ids, d))
    return ids[order[:k]]


def _resolve_bin(cache: LatentCache, b: int) -> tuple[int, int | None]:
    if len(cache.bin_members(b)):
        return b, None
    candidates = [c for c in range(cache.n_bins) if len(cache.bin_members(c))]
    if not candidates:
        raise CacheError("no training entries to sample references from")
    best = min(candidates, key=lambda c: (abs(c - b), c))
    log.info("bin %d is empty; using nearest non-empty bin %d", b, best)
    return best, b


def sample_positives_binned_hybrid(
    cache: LatentCache,
    target: float,
    n_pos: int,
    group_mean_feature: np.ndarray,
    rng: np.random.Generator,
    mode: str = "hybrid",
) -> RefDraw:
    """Half random same-bin entries, half nearest same-bin entries.

    In ``hybrid`` mode the nearest half is ranked by decoder-feature distance
    to the generated group mean; in ``property`` mode it is ranked by
    distance to the target property value.
    """
    if mode not in ("hybrid", "property"):
        raise ValueError(f"unknown positive sampling mode {mode!r}")
    b, fallback = _resolve_bin(cache, int(cache.bin_of(target)))
    members = cache.bin_members(b)
    n_rand, n_near = (n_pos + 1) // 2, n_pos // 2
    rand = rng.choice(members, size=n_rand, replace=n_rand > len(members))
    if mode == "hybrid":
        near = _nearest(cache.phi[members], np.asarray(group_mean_feature), members, n_near)
    else:
        near = _nearest(cache.props[members, :1], np.array([target]), members, n_near)
    if len(near) < n_near:
        near = np.resize(near, n_near)
    return RefDraw(np.concatenate([rand, near]).astype(np.int64), b, fallback)


def sample_positives_v2(cache: LatentCache, targets: np.ndarray, n_pos: int) -> RefDraw:
    """The n_pos train entries nearest to ``targets`` in standardized descriptor space."""
    ids = cache.train_ids
    if len(ids) == 0:
        raise CacheError("no training entries to sample references from")
    scaled = (cache.props[ids] - cache.prop_mean) / cache.prop_std
    query = (np.asarray(targets, dtype=np.float64) - cache.prop_mean) / cache.prop_std
    return RefDraw(_nearest(scaled, query, ids, n_pos).astype(np.int64))


def sample_uncond(cache: LatentCache, n_unc: int, rng: np.random.Generator) -> RefDraw:
    """Uniform train entries, without replacement unless more are requested than exist."""
    ids = cache.train_ids
    if n_unc == 0:
        return RefDraw(np.zeros(0, dtype=np.int64))
    if len(ids) == 0:
        raise CacheError("no training entries to sample references from")
    return RefDraw(rng.choice(ids, size=n_unc, replace=n_unc > len(ids)).astype(np.int64))
