"""Dataset indexing, image preprocessing and episodic sampling."""

from __future__ import annotations

import json
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
SPLITS = ("base", "val", "novel")
DEFAULT_FRACTIONS = (0.5, 0.25, 0.25)


class DatasetError(ValueError):
    pass


@dataclass
class DatasetIndex:
    root: Path
    entries: List[Tuple[str, int]]
    split_assignment: Dict[int, str]
    class_names: List[str]
    split_seed: int = 0
    image_size: int = 84
    mean: Optional[List[float]] = None
    std: Optional[List[float]] = None
    _by_class: Dict[int, List[str]] = field(default=None, init=False, repr=False, compare=False)
    _class_of: Dict[str, int] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.root = Path(self.root)
        by_class: Dict[int, List[str]] = {c: [] for c in range(len(self.class_names))}
        for rel, cid in self.entries:
            by_class.setdefault(cid, []).append(rel)
        for paths in by_class.values():
            paths.sort()
        self._by_class = by_class
        self._class_of = {rel: cid for rel, cid in self.entries}

    def classes(self, split: str) -> List[int]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
        return sorted(c for c, s in self.split_assignment.items() if s == split)

    def images_of(self, class_id: int) -> List[str]:
        return self._by_class[class_id]

    def class_of(self, rel_path: str) -> int:
        return self._class_of[rel_path]

    def split_of(self, rel_path: str) -> str:
        return self.split_assignment[self.class_of(rel_path)]

    def summary(self) -> str:
        return " ".join(f"{s}={len(self.classes(s))}" for s in SPLITS)

    def has_norm(self) -> bool:
        return self.mean is not None and self.std is not None

    # persistence: <name>.tsv plus a <name>.meta.json sidecar

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_tsv())
        meta_path(path).write_text(self.meta_json())

    def to_tsv(self) -> str:
        lines = [f"{rel}\t{cid}\t{self.split_assignment[cid]}" for rel, cid in self.entries]
        return "\n".join(lines) + "\n"

    def meta_json(self) -> str:
        meta = {
            "root": str(self.root),
            "class_names": self.class_names,
            "split_seed": self.split_seed,
            "image_size": self.image_size,
            "mean": self.mean,
            "std": self.std,
        }
        return json.dumps(meta, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "DatasetIndex":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"index file not found: {path}")
        mpath = meta_path(path)
        if not mpath.is_file():
            raise FileNotFoundError(f"index metadata not found: {mpath}")
        meta = json.loads(mpath.read_text())
        entries = []
        split_assignment: Dict[int, str] = {}
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in SPLITS:
                raise DatasetError(f"{path}:{lineno}: malformed index line {line!r}")
            rel, cid, split = parts[0], int(parts[1]), parts[2]
            entries.append((rel, cid))
            if split_assignment.setdefault(cid, split) != split:
                raise DatasetError(f"{path}:{lineno}: class {cid} assigned to two splits")
        return cls(
            root=Path(meta["root"]),
            entries=entries,
            split_assignment=split_assignment,
            class_names=list(meta["class_names"]),
            split_seed=int(meta["split_seed"]),
            image_size=int(meta["image_size"]),
            mean=meta.get("mean"),
            std=meta.get("std"),
        )


def meta_path(index_path) -> Path:
    index_path = Path(index_path)
    return index_path.with_name(index_path.stem + ".meta.json")


def split_sizes(n_classes: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Tuple[int, int, int]:
    """Number of (base, val, novel) classes; novel takes the rounding remainder."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise DatasetError(f"invalid split fractions {fractions}")
    n_base = math.floor(n_classes * fractions[0] + 1e-9)
    n_val = math.floor(n_classes * fractions[1] + 1e-9)
    return n_base, n_val, n_classes - n_base - n_val


def build_index(
    dataset_root,
    split_seed: int = 0,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    image_size: int = 84,
) -> DatasetIndex:
    """Scan ``root/<class_name>/<image>`` and assign each class to one split.

    Classes are sorted by name, shuffled with ``split_seed`` and partitioned
    50/25/25 by default (100/50/50 for a 200-class dataset).
    """
    root = Path(dataset_root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root is missing or not a directory: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class directories under {root}")

    entries: List[Tuple[str, int]] = []
    class_names = []
    for cid, cdir in enumerate(class_dirs):
        files = sorted(
            p for p in cdir.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise DatasetError(f"class directory has no images: {cdir}")
        class_names.append(cdir.name)
        entries.extend((p.relative_to(root).as_posix(), cid) for p in files)

    order = list(range(len(class_names)))
    random.Random(split_seed).shuffle(order)
    n_base, n_val, _ = split_sizes(len(order), fractions)
    assignment = {}
    for pos, cid in enumerate(order):
        assignment[cid] = "base" if pos < n_base else "val" if pos < n_base + n_val else "novel"

    return DatasetIndex(
        root=root.resolve(),
        entries=entries,
        split_assignment=assignment,
        class_names=class_names,
        split_seed=split_seed,
        image_size=image_size,
    )


def resize_bilinear(image: torch.Tensor, height: int, width: Optional[int] = None) -> torch.Tensor:
    """Bilinear resize of a C×H×W tensor (half-pixel centres, no antialiasing)."""
    width = height if width is None else width
    if image.shape[-2:] == (height, width):
        return image.clone()
    out = F.interpolate(image[None], size=(height, width), mode="bilinear", align_corners=False)
    return out[0]


def load_image(path, size: int = 84) -> torch.Tensor:
    """Decode an RGB image to a float tensor 3×size×size with values in [0, 1]."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            w, h = img.size
            arr = np.asarray(img, dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    if w == 0 or h == 0:
        raise DatasetError(f"zero-area image: {path}")
    tensor = torch.from_numpy(arr / 255.0).permute(2, 0, 1).contiguous()
    return resize_bilinear(tensor, size)


def normalize(image: torch.Tensor, mean, std) -> torch.Tensor:
    mean = torch.as_tensor(mean, dtype=image.dtype).view(-1, 1, 1)
    std = torch.as_tensor(std, dtype=image.dtype).view(-1, 1, 1)
    return (image - mean) / std


def compute_norm_stats(index: DatasetIndex, workers: int = 1) -> Tuple[List[float], List[float]]:
    """Per-channel mean/std over every base-split image at the index's image size."""
    paths = [index.root / rel for cid in index.classes("base") for rel in index.images_of(cid)]
    if not paths:
        raise DatasetError("base split is empty; cannot compute normalization statistics")
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for img in pool.map(lambda p: load_image(p, index.image_size), paths):
            x = img.double().reshape(3, -1).numpy()
            total += x.sum(1)
            total_sq += (x ** 2).sum(1)
            count += x.shape[1]
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean ** 2, 0.0))
    std = np.where(std < 1e-6, 1.0, std)
    return mean.tolist(), std.tolist()


class ImageBank:
    """In-memory cache of normalized image tensors keyed by path."""

    def __init__(self, size: int = 84, mean=None, std=None):
        self.size = size
        self.mean = mean if mean is not None else [0.0, 0.0, 0.0]
        self.std = std if std is not None else [1.0, 1.0, 1.0]
        self._cache: Dict[str, torch.Tensor] = {}

    @classmethod
    def for_index(cls, index: DatasetIndex) -> "ImageBank":
        return cls(index.image_size, index.mean, index.std)

    def get(self, path) -> torch.Tensor:
        key = str(path)
        if key not in self._cache:
            self._cache[key] = normalize(load_image(path, self.size), self.mean, self.std)
        return self._cache[key]

    def stack(self, paths: Sequence) -> torch.Tensor:
        return torch.stack([self.get(p) for p in paths])

    def preload(self, paths: Sequence, workers: int = 1) -> None:
        todo = [p for p in paths if str(p) not in self._cache]
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for p, img in zip(todo, pool.map(lambda q: load_image(q, self.size), todo)):
                self._cache[str(p)] = normalize(img, self.mean, self.std)


@dataclass(frozen=True)
class Episode:
    """One C-way K-shot task; paths are relative to the index root."""

    split: str
    c_way: int
    k_shot: int
    classes: Tuple[int, ...]
    support: Tuple[Tuple[str, int], ...]
    query: Tuple[Tuple[str, int], ...]

    @property
    def support_labels(self) -> torch.Tensor:
        return torch.tensor([lab for _, lab in self.support], dtype=torch.long)

    @property
    def query_labels(self) -> torch.Tensor:
        return torch.tensor([lab for _, lab in self.query], dtype=torch.long)

    @property
    def support_paths(self) -> List[str]:
        return [p for p, _ in self.support]

    @property
    def query_paths(self) -> List[str]:
        return [p for p, _ in self.query]


def queries_per_class(n_query: int, c_way: int) -> List[int]:
    """Even split of the query budget; the remainder goes to the lowest local labels."""
    base, rem = divmod(n_query, c_way)
    return [base + (1 if j < rem else 0) for j in range(c_way)]


def sample_episode(
    index: DatasetIndex,
    split: str,
    c_way: int,
    k_shot: int,
    n_query: int,
    rng: np.random.Generator,
) -> Episode:
    if c_way < 1 or k_shot < 1 or n_query < 0:
        raise DatasetError(f"invalid episode shape c_way={c_way} k_shot={k_shot} n_query={n_query}")
    per_class = queries_per_class(n_query, c_way)
    need = k_shot + max(per_class)
    split_classes = index.classes(split)
    eligible = [c for c in split_classes if len(index.images_of(c)) >= need]
    if len(eligible) < c_way:
        raise DatasetError(
            f"split {split!r} has {len(eligible)} classes with >= {need} images "
            f"({len(split_classes)} total); {c_way}-way episode impossible"
        )
    chosen = rng.choice(len(eligible), size=c_way, replace=False)
    classes = tuple(eligible[i] for i in chosen)

    support, query = [], []
    for label, cid in enumerate(classes):
        paths = index.images_of(cid)
        picks = rng.permutation(len(paths))[: k_shot + per_class[label]]
        support.extend((paths[i], label) for i in picks[:k_shot])
        query.extend((paths[i], label) for i in picks[k_shot:])
    return Episode(split, c_way, k_shot, classes, tuple(support), tuple(query))


def episode_rng(seed: int, stream: int, counter: int) -> np.random.Generator:
    """Independent generator for episode ``counter`` of a given stream."""
    return np.random.default_rng([seed, stream, counter])
