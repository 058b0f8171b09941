"""Episodic training, evaluation protocol and the level ablation grid."""

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .data import DatasetError, DatasetIndex, Episode, ImageBank, episode_rng, sample_episode
from .localizer import CropStore
from .relation import ABLATIONS, MLSM, episode_loss, predict

log = logging.getLogger(__name__)

TRAIN_STREAM = 0
EVAL_STREAM = 1
QUERY_INTERPRETATION = "total per episode"

ModelSpec = Union[MLSM, str, Path]


@dataclass
class TrainConfig:
    c_way: int = 5
    k_shot: int = 1
    n_query_train: int = 75
    max_episodes: int = 500_000
    lr0: float = 0.001
    lr_half_period: int = 100_000
    seed: int = 0
    ablation_mode: str = "I+G+O"
    loss: str = "mse"
    dim: int = 64
    hidden: int = 64
    share_encoder: bool = True
    eval_interval: int = 1000
    val_episodes: int = 100
    val_n_query: int = 75
    checkpoint_interval: int = 1000
    strict_crops: bool = True
    deterministic: bool = True

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not self.lr_half_period > 0:
            raise ValueError(f"lr_half_period must be positive, got {self.lr_half_period}")
        if self.ablation_mode not in ABLATIONS:
            raise ValueError(f"unknown ablation mode {self.ablation_mode!r}")
        if self.loss not in ("mse", "bce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.max_episodes < 0:
            raise ValueError("max_episodes must be >= 0")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def lr_schedule(episode: int, config: TrainConfig) -> float:
    """Step decay: halve the learning rate every ``lr_half_period`` episodes."""
    if episode < 0:
        raise ValueError("episode must be >= 0")
    return config.lr0 * 0.5 ** (episode // config.lr_half_period)


def set_deterministic(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def model_config(config: TrainConfig, image_size: int) -> dict:
    return {
        "ablation": config.ablation_mode,
        "dim": config.dim,
        "hidden": config.hidden,
        "share_encoder": config.share_encoder,
        "image_size": image_size,
        "width": 64,
        "pooling": "max2x2 after blocks 1,2",
        "normalization": "per-channel mean/std over base split",
    }


def build_model(mcfg: dict) -> MLSM:
    model = MLSM(mcfg["ablation"], mcfg["dim"], mcfg["hidden"], mcfg["image_size"],
                 mcfg["share_encoder"], mcfg["width"])
    model.model_config = dict(mcfg)
    return model


def load_model(path, expected: Optional[dict] = None) -> Tuple[MLSM, dict]:
    want = ckpt_io.fingerprint(expected) if expected is not None else None
    ckpt = ckpt_io.load(path, want)
    if ckpt.get("kind") != "mlsm":
        raise ckpt_io.CheckpointMismatch(f"{path} is not an MLSM checkpoint")
    if ckpt["fingerprint"] != ckpt_io.fingerprint(ckpt["model_config"]):
        raise ckpt_io.CheckpointMismatch(f"{path}: fingerprint does not match its model config")
    model = build_model(ckpt["model_config"])
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt


def episode_tensors(episode: Episode, index: DatasetIndex, bank: ImageBank,
                    crops: Optional[CropStore]):
    """(support images, support crops, query images, query crops) for an episode."""
    def stack(paths):
        return bank.stack([index.root / p for p in paths])

    def stack_crops(paths):
        return bank.stack([crops.path_for(p) for p in paths])

    s_paths, q_paths = episode.support_paths, episode.query_paths
    s_crops = q_crops = None
    if crops is not None:
        s_crops, q_crops = stack_crops(s_paths), stack_crops(q_paths)
    return stack(s_paths), s_crops, stack(q_paths), q_crops


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    per_episode_acc: List[float]
    mean_acc: float
    ci95: float
    n_episodes: int
    n_query_eval: int
    c_way: int
    k_shot: int
    split: str
    seed: int
    ablation_mode: str = "none"
    fingerprint: str = "none"
    param_hash: str = "none"
    query_interpretation: str = QUERY_INTERPRETATION

    @classmethod
    def from_accuracies(cls, accs: Sequence[float], **kw) -> "EvalReport":
        accs = [float(a) for a in accs]
        mean, ci = summarize(accs)
        return cls(per_episode_acc=accs, mean_acc=mean, ci95=ci, n_episodes=len(accs), **kw)

    def to_text(self) -> str:
        lines = ["# mlsm evaluation report"]
        for f in fields(self):
            if f.name != "per_episode_acc":
                lines.append(f"{f.name}: {getattr(self, f.name)!r}")
        lines.append("")
        lines.append("episode\taccuracy")
        lines.extend(f"{i}\t{a!r}" for i, a in enumerate(self.per_episode_acc))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        import ast

        header, _, body = text.partition("\nepisode\taccuracy\n")
        values = {}
        for line in header.splitlines():
            if line and not line.startswith("#"):
                key, _, raw = line.partition(": ")
                values[key] = ast.literal_eval(raw)
        values["per_episode_acc"] = [float(l.split("\t")[1]) for l in body.splitlines() if l]
        return cls(**values)

    def save(self, path) -> None:
        ckpt_io.atomic_write_text(path, self.to_text())


def summarize(accs: Sequence[float]) -> Tuple[float, float]:
    """Mean accuracy and 1.96 * std / sqrt(n) (population std)."""
    arr = np.asarray(accs, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(1.96 * arr.std() / math.sqrt(arr.size))


class FeatureCache:
    """Per-image representations under a frozen model, computed once per path."""

    def __init__(self, model: MLSM, index: DatasetIndex, bank: ImageBank,
                 crops: Optional[CropStore], batch_size: int = 64):
        self.model = model
        self.index = index
        self.bank = bank
        self.crops = crops if model.uses_crops else None
        self.batch_size = batch_size
        self._feats: Dict[str, torch.Tensor] = {}

    def ensure(self, rel_paths: Sequence[str]) -> None:
        todo = sorted(set(p for p in rel_paths if p not in self._feats))
        with torch.no_grad():
            for i in range(0, len(todo), self.batch_size):
                chunk = todo[i:i + self.batch_size]
                images = self.bank.stack([self.index.root / p for p in chunk])
                crops = None
                if self.crops is not None:
                    crops = self.bank.stack([self.crops.path_for(p) for p in chunk])
                for p, f in zip(chunk, self.model.embed(images, crops)):
                    self._feats[p] = f

    def stack(self, rel_paths: Sequence[str]) -> torch.Tensor:
        self.ensure(rel_paths)
        return torch.stack([self._feats[p] for p in rel_paths])


def model_scorer(model: MLSM, cache: FeatureCache) -> Callable[[Episode], torch.Tensor]:
    def score(episode: Episode) -> torch.Tensor:
        with torch.no_grad():
            support = cache.stack(episode.support_paths)
            query = cache.stack(episode.query_paths)
            reps = model.class_representations(support, episode.support_labels, episode.c_way)
            return model.score_pairs(reps, query)
    return score


def evaluate(
    model: Optional[ModelSpec],
    index: DatasetIndex,
    split: str = "novel",
    n_episodes: int = 100,
    c_way: int = 5,
    k_shot: int = 1,
    n_query_eval: int = 200,
    seed: int = 0,
    crops: Optional[CropStore] = None,
    bank: Optional[ImageBank] = None,
    scorer: Optional[Callable[[Episode], torch.Tensor]] = None,
) -> EvalReport:
    """Mean accuracy over ``n_episodes`` episodes sampled from ``split``.

    ``n_query_eval`` is the total number of queries per episode. Episode ``i``
    is drawn from a generator seeded with ``(seed, i)``, so reports are
    reproducible and episodes independent. The model is never updated.
    """
    ablation, fp, phash = "none", "none", "none"
    if model is not None:
        if not isinstance(model, MLSM):
            model, ck = load_model(model)
        was_training = model.training
        model.eval()
        ablation = model.ablation
        phash = ckpt_io.param_hash(model)
        mcfg = getattr(model, "model_config", None)
        fp = ckpt_io.fingerprint(mcfg) if mcfg else "none"
        if scorer is None:
            bank = bank or ImageBank.for_index(index)
            scorer = model_scorer(model, FeatureCache(model, index, bank, crops))
    elif scorer is None:
        raise ValueError("evaluate needs a model or a scorer")

    accs = []
    for i in range(n_episodes):
        ep = sample_episode(index, split, c_way, k_shot, n_query_eval,
                            episode_rng(seed, EVAL_STREAM, i))
        scores = torch.as_tensor(scorer(ep))
        if scores.shape != (len(ep.query), c_way):
            raise ValueError(f"scorer returned shape {tuple(scores.shape)}, "
                             f"expected {(len(ep.query), c_way)}")
        accs.append((predict(scores) == ep.query_labels).double().mean().item())

    if model is not None and was_training:
        model.train()
    return EvalReport.from_accuracies(
        accs, n_query_eval=n_query_eval, c_way=c_way, k_shot=k_shot, split=split, seed=seed,
        ablation_mode=ablation, fingerprint=fp, param_hash=phash,
    )


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    checkpoint: Path
    loss_trace: List[float]
    best_val_acc: Optional[float]
    episodes: int
    val_history: List[Tuple[int, float]] = field(default_factory=list)


def _can_validate(index: DatasetIndex, config: TrainConfig) -> bool:
    try:
        sample_episode(index, "val", config.c_way, config.k_shot, config.val_n_query,
                       episode_rng(0, EVAL_STREAM, 0))
    except DatasetError:
        return False
    return True


def _write_trace(run_dir: Path, trace: Sequence[float]) -> None:
    text = "".join(f"{i}\t{v!r}\n" for i, v in enumerate(trace))
    ckpt_io.atomic_write_text(run_dir / "loss_trace.txt", text)


def train(
    config: TrainConfig,
    index: DatasetIndex,
    crops_dir,
    run_dir,
    resume: bool = False,
    bank: Optional[ImageBank] = None,
) -> TrainResult:
    """Episodic training on the base split with validation-based selection.

    Writes ``last.pt`` (full state, resumable), ``best.pt`` (best validation
    accuracy), ``loss_trace.txt`` and ``val_history.tsv`` into ``run_dir``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if not index.has_norm():
        raise DatasetError("index has no normalization statistics; run `mlsm prepare`")
    set_deterministic(config.seed, config.deterministic)
    mcfg = model_config(config, index.image_size)
    fp = ckpt_io.fingerprint(mcfg)
    bank = bank or ImageBank.for_index(index)
    model = build_model(mcfg)
    crops = None
    if model.uses_crops:
        crops = CropStore(crops_dir, index.root, strict=config.strict_crops)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr0, betas=(0.9, 0.999), eps=1e-8)

    start, trace, history = 0, [], []
    best_acc, best_ep = None, None
    last_path, best_path = run_dir / "last.pt", run_dir / "best.pt"
    if resume and last_path.is_file():
        ck = ckpt_io.load(last_path, fp)
        model.load_state_dict(ck["state_dict"])
        opt.load_state_dict(ck["optimizer"])
        start, trace = ck["episode"], list(ck["loss_trace"])
        history = [tuple(h) for h in ck["val_history"]]
        best_acc, best_ep = ck["best_val_acc"], ck["best_episode"]
        log.info("resumed from %s at episode %d", last_path, start)

    def snapshot(episode):
        return {
            "kind": "mlsm", "model_config": mcfg, "fingerprint": fp,
            "state_dict": model.state_dict(), "optimizer": opt.state_dict(),
            "episode": episode, "loss_trace": list(trace), "val_history": list(history),
            "best_val_acc": best_acc, "best_episode": best_ep,
            "train_config": asdict(config), "mean": index.mean, "std": index.std,
        }

    def checkpoint(episode):
        ckpt_io.save(snapshot(episode), last_path)
        _write_trace(run_dir, trace)
        rows = "".join(f"{e}\t{a!r}\n" for e, a in history)
        ckpt_io.atomic_write_text(run_dir / "val_history.tsv", "episode\tval_acc\n" + rows)

    validate = _can_validate(index, config)
    if not validate:
        log.warning("val split cannot host a %d-way episode; keeping the last checkpoint",
                    config.c_way)

    def run_validation(episode):
        nonlocal best_acc, best_ep
        rep = evaluate(model, index, "val", config.val_episodes, config.c_way, config.k_shot,
                       config.val_n_query, config.seed, crops, bank)
        history.append((episode, rep.mean_acc))
        log.info("episode %d val acc %.4f +- %.4f", episode, rep.mean_acc, rep.ci95)
        if best_acc is None or rep.mean_acc > best_acc:
            best_acc, best_ep = rep.mean_acc, episode
            ckpt_io.save(snapshot(episode), best_path)

    if start == 0:
        if best_path.is_file():
            best_path.unlink()
        checkpoint(0)

    model.train()
    last_val = history[-1][0] if history else 0
    for ep in range(start, config.max_episodes):
        for group in opt.param_groups:
            group["lr"] = lr_schedule(ep, config)
        episode = sample_episode(index, "base", config.c_way, config.k_shot,
                                 config.n_query_train, episode_rng(config.seed, TRAIN_STREAM, ep))
        s_img, s_crop, q_img, q_crop = episode_tensors(episode, index, bank, crops)
        scores = model(s_img, episode.support_labels, q_img, config.c_way, s_crop, q_crop)
        loss = episode_loss(scores, episode.query_labels, config.loss)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss.item()} at episode {ep}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
        done = ep + 1
        if validate and done % config.eval_interval == 0:
            run_validation(done)
            last_val = done
        if done % config.checkpoint_interval == 0:
            checkpoint(done)
        if done % 100 == 0:
            log.info("episode %d loss %.5f lr %.2e", done, trace[-1], lr_schedule(ep, config))

    end = max(start, config.max_episodes)
    if validate and end > last_val and end > 0:
        run_validation(end)
    checkpoint(end)
    chosen = best_path if best_path.is_file() else last_path
    return TrainResult(chosen, trace, best_acc, end, history)


# ------------------------------------------------------------------ ablation

ABLATION_ORDER = ("I", "I+G", "I+G+O")
SHOTS = (1, 5)


def cell_dir(runs_root, mode: str, k_shot: int) -> Path:
    return Path(runs_root) / f"{mode.replace('+', '_')}-{k_shot}shot"


@dataclass
class AblationTable:
    reports: Dict[Tuple[str, int], EvalReport]

    def render(self) -> str:
        head = f"{'Level':<8}| " + " | ".join(f"{k}-shot (%)".center(16) for k in SHOTS)
        lines = [head, "-" * len(head)]
        for mode in ABLATION_ORDER:
            cells = []
            for k in SHOTS:
                rep = self.reports.get((mode, k))
                cells.append((f"{100 * rep.mean_acc:6.2f} ± {100 * rep.ci95:5.2f}"
                              if rep else "-").center(16))
            lines.append(f"{mode:<8}| " + " | ".join(cells))
        return "\n".join(lines) + "\n"


def ablation_grid(
    checkpoints: Dict[Tuple[str, int], Path],
    index: DatasetIndex,
    crops_dir,
    split: str = "novel",
    n_episodes: int = 100,
    c_way: int = 5,
    n_query_eval: int = 200,
    seed: int = 0,
    strict_crops: bool = True,
) -> AblationTable:
    """Evaluate one checkpoint per (level set, shot) cell."""
    bank = ImageBank.for_index(index)
    reports = {}
    for mode in ABLATION_ORDER:
        for k in SHOTS:
            path = checkpoints.get((mode, k))
            if path is None or not Path(path).is_file():
                raise FileNotFoundError(f"missing checkpoint for ablation cell {mode} {k}-shot: {path}")
            model, ck = load_model(path)
            if model.ablation != mode:
                raise ckpt_io.CheckpointMismatch(f"{path} was trained as {model.ablation}, not {mode}")
            crops = CropStore(crops_dir, index.root, strict_crops) if model.uses_crops else None
            reports[(mode, k)] = evaluate(model, index, split, n_episodes, c_way, k,
                                          n_query_eval, seed, crops, bank)
    return AblationTable(reports)


def train_ablation_grid(base: TrainConfig, index: DatasetIndex, crops_dir, runs_root,
                        force: bool = False) -> Dict[Tuple[str, int], Path]:
    """Train every missing cell of the grid; returns the selected checkpoints."""
    out = {}
    for mode in ABLATION_ORDER:
        for k in SHOTS:
            run = cell_dir(runs_root, mode, k)
            last = run / "last.pt"
            done = last.is_file() and ckpt_io.load(last)["episode"] >= base.max_episodes
            if force or not done:
                cfg = TrainConfig.from_dict({**asdict(base), "ablation_mode": mode, "k_shot": k})
                train(cfg, index, crops_dir, run, resume=not force)
            out[(mode, k)] = run / "best.pt" if (run / "best.pt").is_file() else last
    return out
