"""Base classifier, Grad-CAM heatmaps and object-region extraction.

The base classifier is trained once on the base split and is used only to
locate the object in each image. Each image is cropped to the largest
connected hot region of its heatmap, and the crop is resized back to the
input size. Images from classes the classifier never saw use the class
with the highest logit.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image, ImageDraw
from scipy import ndimage

from . import checkpoint as ckpt_io
from .data import DatasetError, DatasetIndex, ImageBank, load_image, normalize, resize_bilinear
from .encoder import Conv4, gap

log = logging.getLogger(__name__)

CROPS_META = "crops.meta.json"


class BaseClassifier(nn.Module):
    """Conv-4 backbone + GAP + linear layer over the base classes."""

    feature_layer_id = "backbone.blocks.3"

    def __init__(self, num_classes, class_ids=None, image_size=84, mean=None, std=None, width=64):
        super().__init__()
        self.num_classes = num_classes
        self.class_ids = list(class_ids) if class_ids is not None else list(range(num_classes))
        self.image_size = image_size
        self.mean = mean if mean is not None else [0.0, 0.0, 0.0]
        self.std = std if std is not None else [1.0, 1.0, 1.0]
        self.backbone = Conv4(3, width)
        self.fc = nn.Linear(width, num_classes)

    def features(self, x):
        """Feature maps A^k of the last conv layer."""
        return self.backbone(x)

    def classify(self, feature_maps):
        """Raw class scores y^c (pre-softmax) from the last feature maps."""
        return self.fc(gap(feature_maps))

    def forward(self, x):
        return self.classify(self.features(x))

    def logit_index(self, class_id: int) -> Optional[int]:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            return None

    def to_checkpoint(self, **extra) -> dict:
        meta = {
            "num_classes": self.num_classes,
            "class_ids": self.class_ids,
            "image_size": self.image_size,
            "mean": self.mean,
            "std": self.std,
            "width": self.backbone.width,
        }
        return {"kind": "base_classifier", "meta": meta, "fingerprint": ckpt_io.fingerprint(meta),
                "state_dict": self.state_dict(), **extra}

    @classmethod
    def from_checkpoint(cls, path) -> "BaseClassifier":
        ckpt = ckpt_io.load(path)
        if ckpt.get("kind") != "base_classifier":
            raise ckpt_io.CheckpointMismatch(f"{path} is not a base-classifier checkpoint")
        meta = ckpt["meta"]
        if ckpt["fingerprint"] != ckpt_io.fingerprint(meta):
            raise ckpt_io.CheckpointMismatch(f"{path}: corrupt fingerprint")
        model = cls(meta["num_classes"], meta["class_ids"], meta["image_size"],
                    meta["mean"], meta["std"], meta["width"])
        model.load_state_dict(ckpt["state_dict"])
        model.eval()
        return model


@dataclass
class TrainedClassifier:
    model: BaseClassifier
    loss_trace: List[float]
    train_accuracy: float


def train_base_classifier(
    index: DatasetIndex,
    steps: int = 2000,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    bank: Optional[ImageBank] = None,
    checkpoint_path=None,
    workers: int = 1,
) -> TrainedClassifier:
    """Cross-entropy training of the localizer's classifier on the base split."""
    base_classes = index.classes("base")
    if not base_classes:
        raise DatasetError("base split is empty")
    bank = bank or ImageBank.for_index(index)
    paths, labels = [], []
    for logit_idx, cid in enumerate(base_classes):
        for rel in index.images_of(cid):
            paths.append(index.root / rel)
            labels.append(logit_idx)
    bank.preload(paths, workers)
    images = bank.stack(paths)
    targets = torch.tensor(labels, dtype=torch.long)

    torch.manual_seed(seed)
    model = BaseClassifier(len(base_classes), base_classes, index.image_size, index.mean, index.std)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    trace = []
    model.train()
    for step in range(steps):
        batch = torch.from_numpy(rng.integers(0, len(paths), size=min(batch_size, len(paths))))
        loss = F.cross_entropy(model(images[batch]), targets[batch])
        if not torch.isfinite(loss):
            raise FloatingPointError(
                f"base classifier diverged at step {step}: loss={loss.item()} (lr={lr})"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
        if (step + 1) % 100 == 0:
            log.info("localizer step %d/%d loss %.4f", step + 1, steps, trace[-1])

    model.eval()
    with torch.no_grad():
        preds = torch.cat([model(images[i:i + 256]).argmax(1) for i in range(0, len(paths), 256)])
    acc = (preds == targets).float().mean().item()
    if checkpoint_path is not None:
        ckpt_io.save(model.to_checkpoint(loss_trace=trace, train_accuracy=acc), checkpoint_path)
    return TrainedClassifier(model, trace, acc)


@dataclass
class CamWeights:
    alpha: torch.Tensor  # one weight per feature map


@dataclass
class Heatmap:
    values: torch.Tensor  # H' × W', nonnegative
    source_class: int


def _maps_and_grads(classifier, images: torch.Tensor, classes: torch.Tensor):
    classifier.eval()
    with torch.enable_grad():
        maps = classifier.features(images).detach().requires_grad_(True)
        scores = classifier.classify(maps)
        if not scores.requires_grad:
            raise RuntimeError("class scores are not differentiable w.r.t. the feature maps")
        # samples are independent in eval mode, so one backward gives every per-sample gradient
        chosen = scores.gather(1, classes.view(-1, 1)).sum()
        (grads,) = torch.autograd.grad(chosen, maps)
    return maps.detach(), grads


def _check_class(classifier, class_index):
    if not 0 <= class_index < classifier.num_classes:
        raise ValueError(f"class index {class_index} outside [0, {classifier.num_classes})")


def cam_weights(classifier, image: torch.Tensor, class_index: int) -> CamWeights:
    """alpha_k: spatial mean of d y^c / d A^k over the Z positions of map k."""
    _check_class(classifier, class_index)
    _, grads = _maps_and_grads(classifier, image[None], torch.tensor([class_index]))
    return CamWeights(grads[0].mean(dim=(-2, -1)))


def cam_from_weights(maps: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """ReLU of the alpha-weighted sum of feature maps (K×H×W, K) -> H×W."""
    return F.relu((alpha.view(-1, 1, 1) * maps).sum(0))


def gradcam(classifier, image: torch.Tensor, class_index: int) -> Heatmap:
    _check_class(classifier, class_index)
    maps, grads = _maps_and_grads(classifier, image[None], torch.tensor([class_index]))
    return Heatmap(cam_from_weights(maps[0], grads[0].mean(dim=(-2, -1))), class_index)


def gradcam_batch(classifier, images: torch.Tensor, classes: Sequence[int]) -> List[Heatmap]:
    classes = torch.as_tensor(list(classes), dtype=torch.long)
    for c in classes.tolist():
        _check_class(classifier, c)
    maps, grads = _maps_and_grads(classifier, images, classes)
    alphas = grads.mean(dim=(-2, -1))
    return [Heatmap(cam_from_weights(m, a), int(c)) for m, a, c in zip(maps, alphas, classes)]


def closest_base_class(logits) -> int:
    """Index of the largest logit; the first one wins ties."""
    return int(np.argmax(np.asarray(logits, dtype=np.float64)))


def pick_class_for_novel(classifier, image: torch.Tensor) -> int:
    classifier.eval()
    with torch.no_grad():
        logits = classifier(image[None])[0]
    return closest_base_class(logits.numpy())


def region_box(heatmap, threshold_frac: float, height: int, width: int) -> Optional[Tuple[int, int, int, int]]:
    """Bounding box (top, left, bottom, right), exclusive ends, of the largest
    4-connected component of ``heat >= threshold_frac * max(heat)`` after
    bilinear upsampling to ``height × width``. None for an all-zero heatmap.
    """
    if not 0 < threshold_frac < 1:
        raise ValueError(f"threshold_frac must lie in (0, 1), got {threshold_frac}")
    values = heatmap.values if isinstance(heatmap, Heatmap) else torch.as_tensor(heatmap)
    heat = resize_bilinear(values.float()[None], height, width)[0].numpy()
    peak = heat.max()
    if not peak > 0:
        return None
    mask = heat >= threshold_frac * peak
    labels, n = ndimage.label(mask)
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    largest = int(np.argmax(sizes))
    rows, cols = ndimage.find_objects(labels)[largest]
    return rows.start, cols.start, rows.stop, cols.stop


def extract_region(image: torch.Tensor, heatmap, threshold_frac: float = 0.2,
                   out_size: Optional[int] = None) -> torch.Tensor:
    """Crop ``image`` (3×H×W) to the heatmap's hot region and resize it back."""
    _, h, w = image.shape
    out_h, out_w = (h, w) if out_size is None else (out_size, out_size)
    box = region_box(heatmap, threshold_frac, h, w)
    if box is None:
        return resize_bilinear(image, out_h, out_w)
    top, left, bottom, right = box
    return resize_bilinear(image[:, top:bottom, left:right], out_h, out_w)


def to_pil(image: torch.Tensor) -> Image.Image:
    arr = (image.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    return Image.fromarray(arr)


def overlay(image: torch.Tensor, heatmap: Heatmap, threshold_frac: float = 0.2, alpha=0.5) -> Image.Image:
    """Side-by-side composite: input, heatmap blended over input with the crop box, crop."""
    from matplotlib import colormaps

    _, h, w = image.shape
    heat = resize_bilinear(heatmap.values.float()[None], h, w)[0]
    peak = heat.max()
    heat = heat / peak if peak > 0 else heat
    colored = torch.from_numpy(colormaps["jet"](heat.numpy())[..., :3]).permute(2, 0, 1).float()
    blend = to_pil((1 - alpha) * image + alpha * colored)
    box = region_box(heatmap, threshold_frac, h, w)
    if box is not None:
        top, left, bottom, right = box
        ImageDraw.Draw(blend).rectangle([left, top, right - 1, bottom - 1], outline=(255, 255, 255))
    crop = to_pil(extract_region(image, heatmap, threshold_frac))
    canvas = Image.new("RGB", (3 * w, h))
    for i, part in enumerate([to_pil(image), blend, crop]):
        canvas.paste(part, (i * w, 0))
    return canvas


def crop_path(crops_dir, rel_path: str) -> Path:
    return Path(crops_dir) / Path(rel_path).with_suffix(".png")


class CropCacheMismatch(RuntimeError):
    pass


def cache_key(classifier: BaseClassifier, threshold: float) -> dict:
    return {"classifier": ckpt_io.param_hash(classifier), "threshold": threshold,
            "image_size": classifier.image_size}


def localize_images(
    classifier: BaseClassifier,
    src_root,
    items: Iterable[Tuple[str, Optional[int]]],
    out_dir,
    threshold: float = 0.2,
    batch_size: int = 32,
    overlay_dir=None,
    force: bool = False,
) -> int:
    """Write one crop per ``(relative path, logit index or None)`` under ``out_dir``.

    A ``None`` class means the image's class is unknown to the classifier and
    the closest base class is used. Existing crops with a matching cache key
    are kept. Returns the number of crops written.
    """
    out_dir = Path(out_dir)
    key = cache_key(classifier, threshold)
    meta_file = out_dir / CROPS_META
    if meta_file.is_file():
        old = json.loads(meta_file.read_text())
        if old != key:
            if not force:
                raise CropCacheMismatch(
                    f"{out_dir} holds crops for another classifier/threshold; use force to rebuild"
                )
            for p in out_dir.rglob("*.png"):
                p.unlink()
    ckpt_io.atomic_write_text(meta_file, json.dumps(key, indent=2, sort_keys=True) + "\n")

    todo = [(rel, c) for rel, c in items
            if overlay_dir is not None or not crop_path(out_dir, rel).is_file()]
    written = 0
    size = classifier.image_size
    for start in range(0, len(todo), batch_size):
        chunk = todo[start:start + batch_size]
        raw = torch.stack([load_image(Path(src_root) / rel, size) for rel, _ in chunk])
        inputs = normalize(raw, classifier.mean, classifier.std)
        classes = []
        for img, (_, c) in zip(inputs, chunk):
            classes.append(c if c is not None else pick_class_for_novel(classifier, img))
        heatmaps = gradcam_batch(classifier, inputs, classes)
        for img, heat, (rel, _) in zip(raw, heatmaps, chunk):
            target = crop_path(out_dir, rel)
            if not target.is_file():
                target.parent.mkdir(parents=True, exist_ok=True)
                _save_png(to_pil(extract_region(img, heat, threshold)), target)
                written += 1
            if overlay_dir is not None:
                opath = crop_path(overlay_dir, rel)
                opath.parent.mkdir(parents=True, exist_ok=True)
                _save_png(overlay(img, heat, threshold), opath)
    return written


def _save_png(img: Image.Image, path: Path) -> None:
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    ckpt_io.atomic_write_bytes(path, buf.getvalue())


def index_items(index: DatasetIndex, classifier: BaseClassifier, splits=("base", "val", "novel")):
    """(relative path, logit index or None) for every image in ``splits``."""
    items = []
    for split in splits:
        for cid in index.classes(split):
            logit = classifier.logit_index(cid) if split == "base" else None
            items.extend((rel, logit) for rel in index.images_of(cid))
    return items


class CropStore:
    """Maps index images to their cached crops.

    In strict mode a missing crop raises; otherwise the full image stands in.
    """

    def __init__(self, crops_dir, root, strict=True):
        self.crops_dir = Path(crops_dir) if crops_dir is not None else None
        self.root = Path(root)
        self.strict = strict
        self.misses = 0

    def path_for(self, rel_path: str) -> Path:
        if self.crops_dir is not None:
            p = crop_path(self.crops_dir, rel_path)
            if p.is_file():
                return p
        if self.strict:
            raise FileNotFoundError(
                f"no object crop for {rel_path} under {self.crops_dir}; run `mlsm localize` first"
            )
        self.misses += 1
        return self.root / rel_path
