"""Similarity head, support averaging, episode scoring and loss."""

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import LEVELS, Conv4, MapAdjuster, MultiLevelEncoder, encode

ABLATIONS = {
    "I": ("image",),
    "I+G": ("image", "global"),
    "I+G+O": ("image", "object", "global"),
}


class SimilarityHead(nn.Module):
    """FC(2D -> H) -> ReLU -> FC(H -> 1) -> sigmoid."""

    def __init__(self, dim=64, hidden=64):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(2 * dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, pair):
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pair)))).squeeze(-1)


class PairRelation(nn.Module):
    """Relation module over a depth-concatenated pair of feature maps.

    The image-level adjuster with 128 input channels, followed by the same
    FC-ReLU-FC-sigmoid readout as :class:`SimilarityHead`.
    """

    def __init__(self, map_size, dim=64, hidden=64, width=64):
        super().__init__()
        self.adjuster = MapAdjuster(2 * width, map_size, dim, width)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, pair_maps):
        z = F.relu(self.adjuster(pair_maps))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(z)))).squeeze(-1)


def average_support(vectors, k: Optional[int] = None) -> torch.Tensor:
    """Mean of the K support representations of one class."""
    if isinstance(vectors, (list, tuple)):
        if not vectors:
            raise ValueError("average_support needs at least one vector")
        vectors = torch.stack(list(vectors))
    if vectors.shape[0] == 0:
        raise ValueError("average_support needs at least one vector")
    if k is not None and vectors.shape[0] != k:
        raise ValueError(f"expected {k} support vectors, got {vectors.shape[0]}")
    return vectors.mean(dim=0)


def relation_score(head: SimilarityHead, rep_a: torch.Tensor, rep_b: torch.Tensor) -> torch.Tensor:
    """Score of (support class representation, query) pairs; order is fixed."""
    if rep_a.shape[-1] != head.dim or rep_b.shape[-1] != head.dim:
        raise ValueError(
            f"relation_score expects length-{head.dim} vectors, got "
            f"{tuple(rep_a.shape)} and {tuple(rep_b.shape)}"
        )
    return head(torch.cat([rep_a, rep_b], dim=-1))


def image_level_pair_concat(i_a: torch.Tensor, i_b: torch.Tensor) -> torch.Tensor:
    """Depth concatenation: channels of ``i_a`` first, then ``i_b``."""
    if i_a.shape != i_b.shape:
        raise ValueError(f"pair concat needs equal shapes, got {tuple(i_a.shape)} and {tuple(i_b.shape)}")
    return torch.cat([i_a, i_b], dim=-3)


class MLSM(nn.Module):
    """Multi-level similarity model.

    ``ablation`` selects which levels are fused: ``"I+G+O"`` (full model),
    ``"I+G"`` or ``"I"``. The image-only variant compares raw feature maps
    through :class:`PairRelation`, the other two compare fused vectors through
    :class:`SimilarityHead`.
    """

    def __init__(self, ablation="I+G+O", dim=64, hidden=64, image_size=84,
                 share_encoder=True, width=64):
        super().__init__()
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation mode {ablation!r}; expected one of {list(ABLATIONS)}")
        self.ablation = ablation
        self.levels = ABLATIONS[ablation]
        self.dim = dim
        self.image_size = image_size
        if ablation == "I":
            self.encoder = Conv4(3, width)
            self.relation = PairRelation(Conv4.output_size(image_size), dim, hidden, width)
        else:
            self.multilevel = MultiLevelEncoder(dim, image_size, self.levels, share_encoder, width)
            self.head = SimilarityHead(dim, hidden)

    @property
    def uses_crops(self) -> bool:
        return "object" in self.levels

    def embed(self, images, crops=None):
        """Per-image representation: a feature map for "I", a fused vector otherwise."""
        if self.ablation == "I":
            return encode(self.encoder, images)
        return self.multilevel(images, crops if self.uses_crops else None)

    def class_representations(self, support_feats, support_labels, c_way):
        reps = []
        for c in range(c_way):
            members = support_feats[support_labels == c]
            if members.shape[0] == 0:
                raise ValueError(f"no support samples for local label {c}")
            reps.append(average_support(members))
        return torch.stack(reps)

    def score_pairs(self, reps, query_feats):
        """Matrix n_query × c_way of relation scores."""
        n, c = query_feats.shape[0], reps.shape[0]
        q = query_feats.unsqueeze(1).expand(n, c, *query_feats.shape[1:])
        r = reps.unsqueeze(0).expand(n, c, *reps.shape[1:])
        if self.ablation == "I":
            pairs = image_level_pair_concat(r.reshape(n * c, *reps.shape[1:]),
                                            q.reshape(n * c, *query_feats.shape[1:]))
            return self.relation(pairs).view(n, c)
        return relation_score(self.head, r, q)

    def forward(self, support_images, support_labels, query_images, c_way,
                support_crops=None, query_crops=None):
        n_s = support_images.shape[0]
        images = torch.cat([support_images, query_images])
        crops = None
        if self.uses_crops:
            if support_crops is None or query_crops is None:
                raise ValueError("object level enabled but crops missing")
            crops = torch.cat([support_crops, query_crops])
        # one forward pass so batch norm sees support and query together
        feats = self.embed(images, crops)
        reps = self.class_representations(feats[:n_s], support_labels, c_way)
        return self.score_pairs(reps, feats[n_s:])


def episode_scores(model: MLSM, support_images, support_labels, query_images, c_way,
                   support_crops=None, query_crops=None) -> torch.Tensor:
    return model(support_images, support_labels, query_images, c_way, support_crops, query_crops)


def one_hot_targets(labels: torch.Tensor, c_way: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= c_way):
        raise ValueError(f"labels must lie in [0, {c_way})")
    return F.one_hot(labels, c_way)


def episode_loss(scores: torch.Tensor, labels, kind: str = "mse") -> torch.Tensor:
    """Mean over all query-class entries of the error against one-hot targets."""
    target = one_hot_targets(labels, scores.shape[1]).to(scores.dtype)
    if kind == "mse":
        return ((scores - target) ** 2).mean()
    if kind == "bce":
        return F.binary_cross_entropy(scores, target)
    raise ValueError(f"unknown loss {kind!r}")


def predict(scores) -> torch.Tensor:
    """Row-wise argmax; torch returns the first maximal index on ties."""
    scores = torch.as_tensor(scores)
    if scores.numel() == 0:
        raise ValueError("empty score matrix")
    return scores.argmax(dim=1)


__all__ = [
    "ABLATIONS", "LEVELS", "MLSM", "PairRelation", "SimilarityHead", "average_support",
    "episode_loss", "episode_scores", "image_level_pair_concat", "predict", "relation_score",
]
