"""Dataset manifests, deterministic stratified splits, few-shot sampling,
and the class-overlap proxy used to compare pre-training and downstream sets.

On-disk datasets are directory-per-class under a root, described by a YAML
sidecar manifest (name, image_size, resolution range, class table). Reference
manifests without a `root` are catalog-only: usable for similarity analysis
and stats, not for loading pixels.
"""

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import torch
import yaml
from PIL import Image

from .augment import to_chw
from .errors import ConfigurationError, DegenerateInputError, ManifestError
from .rng import generator

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}

_MANIFEST_KEYS = {"name", "image_size", "resolution_min_m", "resolution_max_m", "root", "classes"}
_CLASS_KEYS = {"name", "aliases", "count"}

SPLIT_NAMES = ("train", "val", "test")


def canonicalize(name: str) -> str:
    """lowercase, punctuation/whitespace to underscores: 'Baseball Field' ->
    'baseball_field'."""
    s = name.strip().lower()
    s = re.sub(r"[\s\-/&.]+", "_", s)
    s = re.sub(r"[^a-z0-9_]", "", s)
    s = re.sub(r"_+", "_", s).strip("_")
    return s


@dataclass(frozen=True)
class ClassEntry:
    name: str
    canonical: str
    aliases: tuple[str, ...] = ()
    count: int | None = None


@dataclass(frozen=True)
class ClassCatalog:
    entries: tuple[ClassEntry, ...]

    def __len__(self):
        return len(self.entries)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def canonical_names(self) -> list[str]:
        return [e.canonical for e in self.entries]


class Sample(NamedTuple):
    class_index: int
    class_name: str
    key: str


@dataclass
class DatasetManifest:
    name: str
    root: Path | None
    image_size: int
    classes: ClassCatalog
    resolution_range: tuple[float, float]
    samples: list[Sample]

    @property
    def num_images(self) -> int | None:
        counts = [e.count for e in self.classes.entries]
        if any(c is None for c in counts):
            return None
        return sum(counts)

    def class_names(self) -> list[str]:
        return self.classes.names()

    def sample_path(self, sample: Sample) -> Path:
        if self.root is None:
            raise ManifestError(f"manifest {self.name!r} is catalog-only (no root)")
        return self.root / sample.class_name / sample.key


def _build_catalog(raw_classes) -> ClassCatalog:
    entries = []
    seen = {}
    for i, item in enumerate(raw_classes):
        if not isinstance(item, dict):
            raise ManifestError(f"classes[{i}] must be a mapping")
        unknown = set(item) - _CLASS_KEYS
        if unknown:
            raise ManifestError(f"classes[{i}]: unknown keys {sorted(unknown)}")
        if "name" not in item:
            raise ManifestError(f"classes[{i}]: missing name")
        name = str(item["name"])
        canon = canonicalize(name)
        if not canon:
            raise ManifestError(f"classes[{i}]: name {name!r} canonicalizes to nothing")
        if canon in seen:
            raise ManifestError(
                f"duplicate class {name!r}: canonical {canon!r} already used by {seen[canon]!r}"
            )
        seen[canon] = name
        aliases = tuple(str(a) for a in item.get("aliases", []) or ())
        count = item.get("count")
        if count is not None:
            count = int(count)
            if count < 0:
                raise ManifestError(f"class {name!r}: count must be >= 0")
        entries.append(ClassEntry(name=name, canonical=canon, aliases=aliases, count=count))

    alias_owner = {}
    for e in entries:
        for a in e.aliases:
            ca = canonicalize(a)
            if ca in seen and ca != e.canonical:
                raise ManifestError(
                    f"alias {a!r} of class {e.name!r} collides with class {seen[ca]!r}"
                )
            if ca in alias_owner and alias_owner[ca] != e.canonical:
                raise ManifestError(
                    f"alias {a!r} maps to both {alias_owner[ca]!r} and {e.canonical!r}"
                )
            alias_owner[ca] = e.canonical
    return ClassCatalog(entries=tuple(entries))


def _scan_class_dir(root: Path, class_name: str) -> list[str]:
    d = root / class_name
    if not d.is_dir():
        raise ManifestError(f"missing class directory: {d}")
    files = sorted(p.name for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    return files


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file. With `check_files` (and a root
    present) the directory-per-class layout is verified: every class needs its
    directory and exactly its declared image count."""
    path = Path(path)
    with open(path) as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: manifest must be a mapping")
    unknown = set(raw) - _MANIFEST_KEYS
    if unknown:
        raise ManifestError(f"{path}: unknown keys {sorted(unknown)}")
    for key in ("name", "image_size", "resolution_min_m", "resolution_max_m", "classes"):
        if key not in raw:
            raise ManifestError(f"{path}: missing key {key!r}")

    res_min, res_max = float(raw["resolution_min_m"]), float(raw["resolution_max_m"])
    if res_min > res_max:
        raise ManifestError(f"{path}: resolution_min_m {res_min} > resolution_max_m {res_max}")
    catalog = _build_catalog(raw["classes"])

    root = None
    if raw.get("root") is not None:
        root = Path(raw["root"])
        if not root.is_absolute():
            root = path.parent / root

    samples: list[Sample] = []
    if root is not None and check_files:
        if not root.is_dir():
            raise ManifestError(f"{path}: root directory not found: {root}")
        for ci, entry in enumerate(catalog.entries):
            files = _scan_class_dir(root, entry.name)
            if entry.count is None:
                raise ManifestError(
                    f"{path}: class {entry.name!r} needs an explicit count to "
                    "validate against the directory layout"
                )
            if len(files) != entry.count:
                raise ManifestError(
                    f"{path}: class {entry.name!r} declares {entry.count} images "
                    f"but {len(files)} were found under {root / entry.name}"
                )
            samples.extend(Sample(ci, entry.name, fname) for fname in files)
    else:
        for ci, entry in enumerate(catalog.entries):
            n = entry.count or 0
            samples.extend(Sample(ci, entry.name, f"{k:06d}") for k in range(n))

    return DatasetManifest(
        name=str(raw["name"]),
        root=root,
        image_size=int(raw["image_size"]),
        classes=catalog,
        resolution_range=(res_min, res_max),
        samples=samples,
    )


@dataclass
class DatasetStats:
    name: str
    num_classes: int
    num_images: int | None
    resolution_range: tuple[float, float]
    per_class: dict[str, int | None]


def dataset_stats(manifest: DatasetManifest) -> DatasetStats:
    return DatasetStats(
        name=manifest.name,
        num_classes=len(manifest.classes),
        num_images=manifest.num_images,
        resolution_range=manifest.resolution_range,
        per_class={e.name: e.count for e in manifest.classes.entries},
    )


# --- splits ---------------------------------------------------------------


def largest_remainder_counts(n: int, ratios: tuple[float, ...]) -> tuple[int, ...]:
    """Apportion n items to the ratios: floor the ideal shares, then hand the
    leftover seats to the largest fractional remainders (ties favor the
    earlier split, i.e. train before val before test)."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise ConfigurationError(f"split ratios must be >= 0, got {ratios}")
    ideal = [r * n for r in ratios]
    base = [math.floor(x) for x in ideal]
    leftover = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(ideal[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return tuple(base)


@dataclass
class SplitSpec:
    """Per-sample split labels for one dataset, stratified per class and
    fully determined by (samples, ratios, seed)."""

    ratios: tuple[float, float, float]
    seed: int
    assignment: list[str]
    class_names: list[str]  # class of each sample, parallel to assignment

    def indices(self, split: str) -> list[int]:
        if split not in SPLIT_NAMES:
            raise ConfigurationError(f"unknown split {split!r}")
        return [i for i, s in enumerate(self.assignment) if s == split]

    @property
    def train(self) -> list[int]:
        return self.indices("train")

    @property
    def val(self) -> list[int]:
        return self.indices("val")

    @property
    def test(self) -> list[int]:
        return self.indices("test")

    def per_class_counts(self, split: str) -> dict[str, int]:
        out: dict[str, int] = {}
        for cls, s in zip(self.class_names, self.assignment):
            if s == split:
                out[cls] = out.get(cls, 0) + 1
        return out


def _split_from_class_names(class_names: list[str], ratios, seed: int) -> SplitSpec:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ConfigurationError("ratios must be (train, val, test)")
    by_class: dict[str, list[int]] = {}
    for i, cls in enumerate(class_names):
        by_class.setdefault(cls, []).append(i)

    assignment = [""] * len(class_names)
    for cls, idxs in by_class.items():
        if len(idxs) < 3:
            raise ConfigurationError(
                f"class {cls!r} has {len(idxs)} samples; stratified split needs >= 3"
            )
        counts = largest_remainder_counts(len(idxs), ratios)
        perm = torch.randperm(len(idxs), generator=generator("split", seed, cls)).tolist()
        shuffled = [idxs[p] for p in perm]
        cursor = 0
        for split, c in zip(SPLIT_NAMES, counts):
            for j in shuffled[cursor : cursor + c]:
                assignment[j] = split
            cursor += c
    return SplitSpec(ratios=ratios, seed=seed, assignment=assignment, class_names=list(class_names))


def stratified_split(manifest: DatasetManifest, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitSpec:
    return _split_from_class_names([s.class_name for s in manifest.samples], ratios, seed)


def split_from_labels(labels, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitSpec:
    """Stratified split over an in-memory labeled dataset (labels by index)."""
    return _split_from_class_names([str(l) for l in labels], ratios, seed)


@dataclass
class FewShotSpec:
    """A without-replacement draw of exactly n train samples per class."""

    shots_per_class: int
    seed: int
    indices: list[int]
    by_class: dict[str, list[int]]


def few_shot_sample(split: SplitSpec, n: int, seed: int) -> FewShotSpec:
    if n <= 0:
        raise ConfigurationError("shots_per_class must be positive")
    train_by_class: dict[str, list[int]] = {}
    for i in split.train:
        train_by_class.setdefault(split.class_names[i], []).append(i)
    by_class: dict[str, list[int]] = {}
    for cls in sorted(train_by_class):
        pool = train_by_class[cls]
        if len(pool) < n:
            raise ConfigurationError(
                f"class {cls!r} has only {len(pool)} train samples, needs {n}"
            )
        perm = torch.randperm(len(pool), generator=generator("fewshot", seed, cls)).tolist()
        by_class[cls] = sorted(pool[p] for p in perm[:n])
    indices = sorted(i for idxs in by_class.values() for i in idxs)
    return FewShotSpec(shots_per_class=n, seed=seed, indices=indices, by_class=by_class)


# --- class similarity ------------------------------------------------------


def load_alias_map(path) -> dict[str, str]:
    """Two-column text file mapping alias -> canonical class name; '#' starts
    a comment. Both columns are canonicalized on load."""
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise ManifestError(f"{path}:{lineno}: expected 'alias canonical'")
            alias, canon = canonicalize(parts[0]), canonicalize(parts[1])
            if alias in out and out[alias] != canon:
                raise ManifestError(
                    f"{path}:{lineno}: alias {parts[0]!r} maps to both "
                    f"{out[alias]!r} and {canon!r}"
                )
            out[alias] = canon
    return out


def _resolved_names(entry: ClassEntry, alias_map: dict[str, str]) -> set[str]:
    names = {entry.canonical} | {canonicalize(a) for a in entry.aliases}
    return {alias_map.get(n, n) for n in names}


def class_similarity(
    pretrain: ClassCatalog, downstream: ClassCatalog, alias_map: dict[str, str] | None = None
) -> float:
    """Fraction of downstream classes that also appear in the pre-training
    catalog after alias resolution. Asymmetric on purpose: the denominator is
    the downstream class count."""
    if len(downstream) == 0:
        raise DegenerateInputError("downstream catalog is empty")
    if len(pretrain) == 0:
        raise DegenerateInputError("pretrain catalog is empty")
    alias_map = alias_map or {}
    pool: set[str] = set()
    for e in pretrain.entries:
        pool |= _resolved_names(e, alias_map)
    matched = sum(1 for e in downstream.entries if _resolved_names(e, alias_map) & pool)
    return matched / len(downstream)


# --- image access ----------------------------------------------------------


class ImageFolderDataset:
    """Images from a manifest-described directory layout. Items are
    ((3, H, W) float tensor in [0, 1], class index)."""

    def __init__(self, manifest: DatasetManifest):
        if manifest.root is None:
            raise ManifestError(f"manifest {manifest.name!r} has no root; cannot load images")
        self.manifest = manifest
        self.class_names = manifest.class_names()

    def __len__(self):
        return len(self.manifest.samples)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def labels(self) -> list[int]:
        return [s.class_index for s in self.manifest.samples]

    def __getitem__(self, i: int):
        sample = self.manifest.samples[i]
        with Image.open(self.manifest.sample_path(sample)) as img:
            return to_chw(img), sample.class_index


class InMemoryDataset:
    """Tensor-backed dataset with the same item contract as
    ImageFolderDataset; used for synthetic data and smoke runs."""

    def __init__(self, images, labels, class_names=None):
        if len(images) != len(labels):
            raise ConfigurationError("images and labels lengths differ")
        self.images = images
        self.labels = [int(l) for l in labels]
        n = (max(self.labels) + 1) if self.labels else 0
        self.class_names = list(class_names) if class_names else [str(i) for i in range(n)]

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self):
        return len(self.class_names)

    def __getitem__(self, i: int):
        return to_chw(self.images[i]), self.labels[i]


# --- bundled reference catalogs ---------------------------------------------


def bundled_catalog_path(name: str) -> Path:
    """Path to a reference manifest shipped with the package (aid, eurosat,
    mlrsnet, patternnet, resisc45, ucm), or to 'aliases.txt'."""
    base = resources.files("rssl") / "catalogs"
    fname = name if "." in name else f"{name.lower()}.yaml"
    p = Path(str(base / fname))
    if not p.exists():
        raise ConfigurationError(f"no bundled catalog named {name!r}")
    return p


def bundled_alias_map() -> dict[str, str]:
    return load_alias_map(bundled_catalog_path("aliases.txt"))
