"""End-to-end toy run through the command line: prepare, localizer, crops, train, eval."""

import time
from pathlib import Path

import yaml

from mlsm.cli import main
from mlsm.toy import make_toy_dataset

# 10 classes cannot host disjoint 5-way base, val and novel splits, so the
# toy run trains on 5 base classes and evaluates on the 5 novel ones.
TOY_CONFIG = {
    "data.image_size": 32,
    "data.split_fractions": [0.5, 0.0, 0.5],
    "localizer.steps": 150,
    "train.n_query": 25,
    "train.max_episodes": 2000,
    "eval.n_episodes": 100,
    "eval.n_query": 200,
    "seed": 0,
}


def run_toy_pipeline(workdir, episodes=None) -> dict:
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfg = dict(TOY_CONFIG)
    if episodes is not None:
        cfg["train.max_episodes"] = episodes
    cfg_path = workdir / "toy.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    images = make_toy_dataset(workdir / "images", n_classes=10, per_class=60, size=84, seed=0)
    common = ["--config", str(cfg_path), "--deterministic"]
    index = str(workdir / "prep" / "index.tsv")
    steps = [
        ["prepare", "--root", str(images), "--out", str(workdir / "prep")],
        ["train-localizer", "--index", index, "--out", str(workdir / "loc")],
        ["localize", "--checkpoint", str(workdir / "loc" / "classifier.pt"), "--images",
         str(images), "--index", index, "--out", str(workdir / "crops")],
        ["train", "--index", index, "--crops", str(workdir / "crops"), "--out",
         str(workdir / "run")],
        ["eval", "--checkpoint", str(workdir / "run" / "last.pt"), "--index", index, "--crops",
         str(workdir / "crops"), "--way", "5", "--shot", "1", "--out", str(workdir / "eval")],
    ]
    start = time.perf_counter()
    for argv in steps:
        code = main([argv[0], *common, *argv[1:]])
        if code != 0:
            raise RuntimeError(f"mlsm {argv[0]} exited with {code}")
    return {
        "seconds": time.perf_counter() - start,
        "loss_trace": workdir / "run" / "loss_trace.txt",
        "report": workdir / "eval" / "report.txt",
    }
