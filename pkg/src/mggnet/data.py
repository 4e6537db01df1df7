"""Synthetic multi-attribute images with region-localized cues.

Each group owns a horizontal band of the image; each attribute owns a
disjoint sub-area of its group's band and brightens it when positive. All
sub-areas are mirror-symmetric, so a horizontal flip keeps every label valid.
Labels come from a Gaussian copula: correlated standard normals thresholded
at the per-attribute positive rate.
"""

from __future__ import annotations

import csv
import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np

from .gal import read_pgm, write_pgm
from .groups import AttributeCatalog, GroupAssignment

PATTERNS = ("sides", "center", "bar")


class DataError(Exception):
    pass


@dataclass
class GroupRegion:
    name: str
    rows: tuple[int, int]  # [top, bottom) band in image rows
    cols: tuple[int, int] = (0, 0)  # [left, right); (0, 0) means full width


@dataclass
class AttributeRule:
    name: str
    group: int
    pattern: str
    rate: float


@dataclass
class SyntheticSpec:
    image_size: int
    groups: list[GroupRegion]
    attributes: list[AttributeRule]
    correlations: list[tuple[int, int, float]] = field(default_factory=list)  # 1-based attribute indices
    noise: float = 0.15
    amplitude: float = 0.5
    background: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        self.groups = [g if isinstance(g, GroupRegion) else GroupRegion(**g) for g in self.groups]
        self.attributes = [a if isinstance(a, AttributeRule) else AttributeRule(**a) for a in self.attributes]
        self.correlations = [tuple(c) for c in self.correlations]
        for g in self.groups:
            g.rows, g.cols = tuple(g.rows), tuple(g.cols)
        self.validate()

    @property
    def N(self) -> int:
        return len(self.attributes)

    @property
    def K(self) -> int:
        return len(self.groups)

    def validate(self) -> None:
        s = self.image_size
        for g in self.groups:
            r0, r1 = g.rows
            c0, c1 = self.col_range(g)
            if not (0 <= r0 < r1 <= s and 0 <= c0 < c1 <= s):
                raise ValueError(f"region {g.name!r} lies outside the {s}x{s} image")
        for a in self.attributes:
            if not 0 <= a.group < len(self.groups):
                raise ValueError(f"attribute {a.name!r} refers to unknown group {a.group}")
            if a.pattern not in PATTERNS:
                raise ValueError(f"attribute {a.name!r}: unknown pattern {a.pattern!r}")
            if not 0.0 < a.rate < 1.0:
                raise ValueError(f"attribute {a.name!r}: positive rate must lie in (0, 1)")
        for u, v, rho in self.correlations:
            if not (1 <= u <= self.N and 1 <= v <= self.N and u != v):
                raise ValueError(f"bad correlation pair ({u}, {v})")
            if not -1.0 < rho < 1.0:
                raise ValueError("correlation strength must lie in (-1, 1)")
        np.linalg.cholesky(self.latent_correlation())

    def col_range(self, g: GroupRegion) -> tuple[int, int]:
        return (0, self.image_size) if g.cols == (0, 0) else g.cols

    @classmethod
    def default(cls, seed: int = 0) -> "SyntheticSpec":
        """12 attributes in 4 bands of a 32x32 image; three rare attributes, two correlated pairs."""
        groups = [
            GroupRegion("Top", (0, 8)),
            GroupRegion("Upper", (8, 16)),
            GroupRegion("Lower", (16, 24)),
            GroupRegion("Bottom", (24, 32)),
        ]
        rates = [0.5, 0.1, 0.4, 0.35, 0.5, 0.1, 0.45, 0.3, 0.5, 0.4, 0.1, 0.5]
        attrs = [
            AttributeRule(f"{groups[k // 3].name.lower()}_{PATTERNS[k % 3]}", k // 3, PATTERNS[k % 3], rates[k])
            for k in range(12)
        ]
        return cls(32, groups, attrs, [(1, 5, 0.9), (8, 12, 0.9)], seed=seed)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def assignment(self) -> GroupAssignment:
        catalog = AttributeCatalog(tuple(a.name for a in self.attributes))
        groups = [(g.name, [k + 1 for k, a in enumerate(self.attributes) if a.group == gi]) for gi, g in enumerate(self.groups)]
        return GroupAssignment.from_groups(groups, catalog)

    def latent_correlation(self) -> np.ndarray:
        sigma = np.eye(self.N)
        for u, v, rho in self.correlations:
            sigma[u - 1, v - 1] = sigma[v - 1, u - 1] = rho
        return sigma

    def attribute_area(self, k: int) -> np.ndarray:
        """Boolean [S, S] mask of the pixels attribute ``k`` (0-based) brightens."""
        a = self.attributes[k]
        g = self.groups[a.group]
        r0, r1 = g.rows
        c0, c1 = self.col_range(g)
        h, w = r1 - r0, c1 - c0
        mid = r0 + h // 2
        m = np.zeros((self.image_size, self.image_size), dtype=bool)
        top = slice(r0 + max(1, h // 8), mid)
        if a.pattern == "sides":
            side = max(1, w // 5)
            m[top, c0 + 1 : c0 + 1 + side] = True
            m[top, c1 - 1 - side : c1 - 1] = True
        elif a.pattern == "center":
            half = max(1, w // 8)
            cc = c0 + w // 2
            m[top, cc - half : cc + half] = True
        else:  # bar
            m[mid + 1 : r1 - max(1, h // 8), c0 + w // 8 : c1 - w // 8] = True
        return m


def sample_labels(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    L = np.linalg.cholesky(spec.latent_correlation())
    z = L @ rng.standard_normal(spec.N)
    cut = np.array([NormalDist().inv_cdf(a.rate) for a in spec.attributes])
    return (z < cut).astype(np.int64)


def render(spec: SyntheticSpec, labels: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Single-channel image in [0, 1]; ``rng=None`` renders without noise."""
    img = np.full((spec.image_size, spec.image_size), spec.background)
    for k, on in enumerate(labels):
        if on:
            img[spec.attribute_area(k)] += spec.amplitude
    if rng is not None and spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def sample_rng(spec: SyntheticSpec, sample_id: int) -> np.random.Generator:
    return np.random.default_rng(spec.seed ^ sample_id)


@dataclass
class Dataset:
    ids: list[str]
    images: np.ndarray  # [n, 3, S, S] in [0, 1]
    labels: np.ndarray  # [n, N] of 0/1
    paths: list[str] = field(default_factory=list)
    split_tag: str = ""

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx: Sequence[int], tag: str = "") -> "Dataset":
        idx = list(idx)
        return Dataset(
            [self.ids[i] for i in idx],
            self.images[idx],
            self.labels[idx],
            [self.paths[i] for i in idx] if self.paths else [],
            tag,
        )

    def index_of(self, sample_id: str) -> int:
        try:
            return self.ids.index(str(sample_id))
        except ValueError:
            raise DataError(f"unknown sample id {sample_id!r}") from None


def generate_dataset(spec: SyntheticSpec, count: int, out_dir: os.PathLike) -> Path:
    """Render ``count`` samples to ``out_dir/images`` and write ``manifest.csv``.

    Output is assembled in a temporary directory and renamed into place.
    Returns the manifest path.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    out_dir = Path(out_dir)
    try:
        out_dir.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    except OSError as exc:
        raise DataError(f"cannot write to {out_dir}: {exc}") from exc
    try:
        (tmp / "images").mkdir()
        rows = []
        for sid in range(count):
            rng = sample_rng(spec, sid)
            labels = sample_labels(spec, rng)
            img = render(spec, labels, rng)
            rel = f"images/{sid:06d}.pgm"
            write_pgm(tmp / rel, img)
            rows.append([str(sid), rel, *map(str, labels)])
        with open(tmp / "manifest.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "image_path", *(f"bit{k}" for k in range(spec.N))])
            w.writerows(rows)
        (tmp / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir / "manifest.csv"


def write_manifest(path: os.PathLike, ds: Dataset, root: os.PathLike) -> None:
    """Write a manifest for ``ds`` whose image paths are relative to ``path``'s directory."""
    path = Path(path)
    rows = []
    for sid, p, lab in zip(ds.ids, ds.paths, ds.labels):
        rel = os.path.relpath(Path(root) / p, path.parent)
        rows.append([sid, rel, *map(str, lab)])
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "image_path", *(f"bit{k}" for k in range(ds.labels.shape[1]))])
        w.writerows(rows)
    os.replace(tmp, path)


def load_dataset(manifest: os.PathLike, channels: int = 3) -> Dataset:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DataError(f"manifest {manifest} does not exist")
    root = manifest.parent
    with open(manifest, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["sample_id", "image_path"]:
        raise DataError(f"{manifest}: missing 'sample_id,image_path,...' header")
    n_bits = len(rows[0]) - 2
    ids, paths, labels, images = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != n_bits + 2:
            raise DataError(f"{manifest}:{lineno}: expected {n_bits} label bits, got {len(row) - 2}")
        bits = row[2:]
        if any(b not in ("0", "1") for b in bits):
            raise DataError(f"{manifest}:{lineno}: malformed label row {bits}")
        img_path = root / row[1]
        if not img_path.is_file():
            raise DataError(f"{manifest}:{lineno}: image file {img_path} is missing")
        try:
            px = read_pgm(img_path)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        ids.append(row[0])
        paths.append(row[1])
        labels.append([int(b) for b in bits])
        images.append(px)
    if not ids:
        raise DataError(f"{manifest}: no samples")
    if len({p.shape for p in images}) != 1:
        raise DataError(f"{manifest}: images have differing sizes")
    arr = np.stack(images).astype(np.float64) / 255.0
    arr = np.repeat(arr[:, None], channels, axis=1)
    return Dataset(ids, arr, np.array(labels, dtype=np.int64), paths)


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be nonnegative and sum to 1")
    sizes = [int(round(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        raise ValueError("split fractions round past the dataset size")
    return sizes


def split(ds: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, ...]:
    """Disjoint, exhaustive, seed-deterministic random partition."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    out, start = [], 0
    tags = ("train", "val", "test")
    for k, size in enumerate(split_sizes(len(ds), fractions)):
        idx = np.sort(perm[start : start + size])
        out.append(ds.subset(idx, tags[k] if k < len(tags) else f"split{k}"))
        start += size
    return tuple(out)


def augment_flip(image: np.ndarray, p: float = 0.5, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Mirror the last (width) axis with probability ``p``."""
    if p <= 0.0:
        return image
    rng = rng if rng is not None else np.random.default_rng()
    return image[..., ::-1].copy() if rng.random() < p else image


def augment_batch(images: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Independent flip decision per sample of a [batch, C, H, W] array."""
    flips = rng.random(images.shape[0]) < p
    if not flips.any():
        return images
    out = images.copy()
    out[flips] = out[flips][..., ::-1]
    return out
