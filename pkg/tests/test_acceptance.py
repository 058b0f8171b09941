"""Acceptance criteria, one test each, at the stated tolerances.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import itertools
import time

import numpy as np
import pytest
import torch

from mlsm import checkpoint as ckpt_io
from mlsm.data import DatasetIndex, ImageBank, build_index, compute_norm_stats
from mlsm.encoder import MapAdjuster, VectorAdjuster, fuse, gap
from mlsm.engine import EvalReport, TrainConfig, evaluate, load_model, lr_schedule, set_deterministic
from mlsm.localizer import CropStore, cam_weights, gradcam
from mlsm.relation import MLSM, PairRelation, SimilarityHead, average_support, episode_loss, relation_score
from mlsm.toy import make_toy_dataset

from conftest import synthetic_index
from oracles import check_module_gradients, fd_cam_weights, max_relative_error, naive_gradcam, small_classifier
from toy_pipeline import run_toy_pipeline


def criterion(name):
    def mark(fn):
        fn.criterion = name
        return fn
    return mark


def report(name, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@criterion("Grad-CAM correctness")
def test_gradcam_correctness():
    start = time.perf_counter()
    worst_alpha, worst_heat = 0.0, 0.0
    for seed in range(20):
        model = small_classifier(seed, curved=seed % 2 == 1)
        g = torch.Generator().manual_seed(1000 + seed)
        image = torch.randn(3, 32, 32, dtype=torch.float64, generator=g)
        c = seed % model.num_classes
        alpha = cam_weights(model, image, c).alpha
        with torch.no_grad():
            maps = model.features(image[None])[0]
        worst_alpha = max(worst_alpha, max_relative_error(alpha, fd_cam_weights(model.classify, maps, c)))
        heat = gradcam(model, image, c).values
        worst_heat = max(worst_heat, (heat - naive_gradcam(maps, alpha)).abs().max().item())
    elapsed = time.perf_counter() - start
    ok = worst_alpha <= 1e-3 and worst_heat <= 1e-6 and elapsed < 60
    report("Grad-CAM correctness", ok,
           f"alpha rel err {worst_alpha:.2e}, heatmap err {worst_heat:.2e}, {elapsed:.1f}s")
    assert ok


@criterion("GAP oracle")
def test_gap_oracle():
    rng = np.random.default_rng(0)
    worst, spent = 0.0, 0.0
    for _ in range(100):
        fmap = rng.standard_normal((64, 21, 21))
        t = time.perf_counter()
        got = gap(torch.from_numpy(fmap)).numpy()
        spent += time.perf_counter() - t
        rows = fmap.tolist()
        for c in range(64):
            acc = 0.0
            for y in range(21):
                for x in range(21):
                    acc += rows[c][y][x]
            worst = max(worst, abs(got[c] - acc / 441))
    ok = worst <= 1e-6 and spent < 5
    report("GAP oracle", ok, f"max err {worst:.2e}, gap time {spent:.3f}s")
    assert ok


@criterion("Gradient integrity")
def test_gradient_integrity():
    start = time.perf_counter()
    worst = {}
    for seed in range(3):
        torch.manual_seed(seed)
        x_map = torch.randn(3, 4, 8, 8, dtype=torch.float64)
        x_pair = torch.randn(3, 8, 8, 8, dtype=torch.float64)
        x_vec = torch.randn(3, 6, dtype=torch.float64)
        map_adj = MapAdjuster(4, 8, dim=5, width=4).double().eval()
        pair_rel = PairRelation(8, dim=5, hidden=4, width=4).double().eval()
        for module in (map_adj, pair_rel):
            with torch.no_grad():
                for m in module.modules():
                    if isinstance(m, torch.nn.BatchNorm2d):
                        m.running_mean.uniform_(-0.5, 0.5)
                        m.running_var.uniform_(0.5, 2.0)
        vec_adj = VectorAdjuster(6, 5).double()
        head = SimilarityHead(5, 4).double()
        w = torch.randn(3, 5, dtype=torch.float64)
        t = (torch.rand(3, dtype=torch.float64) > 0.5).double()
        cases = {
            "map adjuster": (map_adj, lambda: (map_adj(x_map) * w).sum()),
            "vector adjuster": (vec_adj, lambda: (torch.tanh(vec_adj(x_vec)) * w).sum()),
            "similarity head": (head, lambda: ((relation_score(head, w, torch.tanh(w.flip(0))) - t) ** 2).mean()),
            "pair relation": (pair_rel, lambda: ((pair_rel(x_pair) - t) ** 2).mean()),
        }
        for name, (module, fn) in cases.items():
            errs = check_module_gradients(module, fn)
            worst[name] = max(worst.get(name, 0.0), max(errs.values()))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-2 and elapsed < 120
    report("Gradient integrity", ok,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")
    assert ok


@criterion("Fusion identities")
def test_fusion_identities():
    g = torch.Generator().manual_seed(0)
    ok = True
    z = torch.zeros(64)
    for _ in range(200):
        a, b, c = (torch.randn(64, generator=g) * 10 ** torch.randint(-3, 4, (1,), generator=g).item()
                   for _ in range(3))
        ok &= torch.equal(fuse(a, z, z), a) and torch.equal(fuse(z, a, z), a) and torch.equal(fuse(z, z, a), a)
        ref = fuse(a, b, c)
        ok &= all(torch.equal(ref, fuse(*p)) for p in itertools.permutations((a, b, c)))
        ok &= torch.equal(average_support(a[None]), a) and torch.equal(average_support(a[None], k=1), a)
    report("Fusion identities", ok, "zero identities, all 6 permutations, K=1 averaging over 200 draws")
    assert ok


@pytest.fixture(scope="module")
def toy_images(tmp_path_factory):
    root = make_toy_dataset(tmp_path_factory.mktemp("overfit") / "images", 5, 4, size=84, seed=1)
    index = build_index(root, fractions=(1.0, 0.0, 0.0), image_size=32)
    index.mean, index.std = compute_norm_stats(index)
    return index


@criterion("Optimization sanity")
def test_overfit_single_episode(toy_images):
    index = toy_images
    bank = ImageBank.for_index(index)
    classes = index.classes("base")
    support = bank.stack([index.root / index.images_of(c)[0] for c in classes])
    query = bank.stack([index.root / index.images_of(c)[j] for c in classes for j in (1, 2, 3)])
    s_lab = torch.arange(5)
    q_lab = torch.arange(5).repeat_interleave(3)
    set_deterministic(0)
    cfg = TrainConfig()
    model = MLSM(cfg.ablation_mode, cfg.dim, cfg.hidden, image_size=32)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr0)
    start = time.perf_counter()
    loss, steps = None, 0
    for steps in range(1, 501):
        scores = model(support, s_lab, query, 5, support.flip(-1), query.flip(-1))
        loss = episode_loss(scores, q_lab)
        if loss.item() < 0.01:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    elapsed = time.perf_counter() - start
    ok = loss.item() < 0.01 and elapsed < 120
    report("Optimization sanity", ok, f"loss {loss.item():.4f} after {steps} steps, {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    return run_toy_pipeline(tmp_path_factory.mktemp("toy_a"))


@criterion("Toy end-to-end")
@pytest.mark.slow
def test_toy_end_to_end(toy_run):
    rep = EvalReport.from_text(toy_run["report"].read_text())
    ok = rep.mean_acc >= 0.95 and toy_run["seconds"] <= 15 * 60 and rep.n_episodes == 100
    report("Toy end-to-end", ok, f"5-way 1-shot acc {rep.mean_acc:.4f} ± {rep.ci95:.4f} "
           f"over {rep.n_episodes} episodes, {toy_run['seconds']:.0f}s")
    assert ok


@criterion("Random-baseline calibration")
def test_random_baseline():
    index = synthetic_index(20, 60)
    gen = torch.Generator().manual_seed(0)
    rep = evaluate(None, index, "novel", 1000, 5, 1, 200,
                   scorer=lambda ep: torch.rand(len(ep.query), 5, generator=gen))
    ok = abs(rep.mean_acc - 0.20) <= 0.03
    report("Random-baseline calibration", ok, f"mean acc {rep.mean_acc:.4f} over 1000 episodes")
    assert ok


@criterion("Schedule exactness")
def test_schedule_exactness():
    cfg = TrainConfig()
    got = [lr_schedule(e, cfg) for e in (0, 100_000, 250_000)]
    ok = got == [0.001, 0.0005, 0.00025]
    report("Schedule exactness", ok, f"{got}")
    assert ok


@criterion("Protocol conformance")
@pytest.mark.slow
def test_protocol_conformance(toy_run):
    workdir = toy_run["report"].parent.parent
    rep_file = EvalReport.from_text(toy_run["report"].read_text())
    ckpt_file = workdir / "run" / "last.pt"
    model, _ = load_model(ckpt_file)
    index = DatasetIndex.load(workdir / "prep" / "index.tsv")
    before = ckpt_io.param_hash(model)
    rep = evaluate(model, index, "novel", 100, 5, 1, 200, 0,
                   CropStore(workdir / "crops", index.root), ImageBank.for_index(index))
    after = ckpt_io.param_hash(model)
    on_disk = ckpt_io.param_hash(ckpt_io.load(ckpt_file)["state_dict"])
    ok = (rep_file.n_episodes == 100 and rep_file.c_way == 5 and rep_file.n_query_eval == 200
          and rep_file.query_interpretation == "total per episode"
          and before == after == on_disk == rep.param_hash == rep_file.param_hash
          and rep.to_text() == rep_file.to_text())
    report("Protocol conformance", ok, f"episodes={rep_file.n_episodes} way={rep_file.c_way} "
           f"queries={rep_file.n_query_eval} hash {before[:12]} before/after equal={before == after}")
    assert ok


@criterion("Determinism")
@pytest.mark.slow
def test_determinism(toy_run, tmp_path_factory):
    again = run_toy_pipeline(tmp_path_factory.mktemp("toy_b"))
    same_trace = toy_run["loss_trace"].read_bytes() == again["loss_trace"].read_bytes()
    same_report = toy_run["report"].read_bytes() == again["report"].read_bytes()
    ok = same_trace and same_report
    report("Determinism", ok, f"loss traces identical={same_trace}, reports identical={same_report}")
    assert ok
