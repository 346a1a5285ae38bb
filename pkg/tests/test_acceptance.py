"""Acceptance criteria 1-12, one test each; every test prints a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` (criteria 8 and 9
train three models and take roughly half an hour on one CPU core).
"""

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from dadiff import cli
from dadiff.config import RunConfig
from dadiff.diag import alignment_gap
from dadiff.diffusion import make_schedule, predict_x0, q_sample, sample
from dadiff.evaluate import (
    cle,
    iou,
    metric_report,
    norm_precision_auc,
    percent_delta,
    precision_at,
    success_auc,
)
from dadiff.model import build
from dadiff.networks import AlignmentEncoder, Discriminator, TrackingOrientedLayer
from dadiff.synth import (
    BoundingBox,
    TrackSequence,
    dump_features,
    gen_pair,
    load_dataset,
    load_features,
    write_sequence,
)
from dadiff.tracker import CorrelationHead, SiameseBackbone, track_sequence, trc_loss
from dadiff.train import adv_gen_loss, fit, poly_lr

from gradcheck import TOL, fd_check

SEEDS = (0, 1, 2)
DESK_STEPS = 2000


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str, elapsed: float):
        with capsys.disabled():
            print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  ({elapsed:.1f}s)  {detail}")
        assert ok, detail
    return report


# ---------------------------------------------------------------- 1-4 diffusion

def test_criterion_01_schedule_identity(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for T in (1, 10, 100, 1000):
        for lo, hi in ((1e-4, 0.02), (1e-5, 0.05), (0.01, 0.01), (1e-3, 0.5)):
            for S in sorted({1, min(5, T), T}):
                s = make_schedule("linear", T, lo, hi, S)
                ab = s.alpha_bar
                worst = max(worst, max(abs(s.beta[t - 1] - (1 - ab[t] / ab[t - 1])) for t in range(1, T + 1)))
    dt = time.perf_counter() - t0
    verdict(1, worst <= 1e-12 and dt < 1, f"max |beta - (1 - ab_t/ab_t-1)| = {worst:.2e}", dt)


def test_criterion_02_forward_moments(verdict):
    t0 = time.perf_counter()
    sched = make_schedule("linear", 100, 1e-4, 0.02, 5)
    g = torch.Generator().manual_seed(0)
    # positive signal so a wrong signal coefficient cannot cancel in the pooled mean
    x0 = torch.rand(4, 4, 4, generator=g, dtype=torch.float64) * 1.5 + 0.5
    n, lines, ok = 10_000, [], True
    for t in (1, 50, 100):
        eps = torch.randn(n, *x0.shape, generator=g, dtype=torch.float64)
        xt = q_sample(x0.expand(n, *x0.shape), t, eps, sched)
        ab = sched.alpha_bar[t]
        z = (xt - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
        mean_err = abs(z.mean().item()) * math.sqrt(z.numel())  # in standard errors
        var_err = abs(xt.var(0).mean().item() / (1 - ab) - 1)
        ok &= mean_err <= 3 and var_err <= 0.02
        lines.append(f"t={t}: mean {mean_err:.2f} SE, var {100 * var_err:.2f}%")
    dt = time.perf_counter() - t0
    verdict(2, ok and dt < 30, "; ".join(lines), dt)


def test_criterion_03_exact_inversion(verdict):
    t0 = time.perf_counter()
    sched = make_schedule("linear", 100, 1e-4, 0.02, 5)
    g = torch.Generator().manual_seed(1)
    worst = 0.0
    for _ in range(100):
        x0 = torch.randn(2, 8, 6, 6, generator=g, dtype=torch.float64)
        eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
        t = int(torch.randint(1, sched.T + 1, (1,), generator=g))
        rec = predict_x0(q_sample(x0, t, eps, sched), eps, t, sched)
        worst = max(worst, ((rec - x0).norm() / x0.norm()).item())
    dt = time.perf_counter() - t0
    verdict(3, worst <= 1e-5 and dt < 5, f"max relative error {worst:.2e}", dt)


def test_criterion_04_ddim_determinism(verdict):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    cfg = RunConfig()
    sched = make_schedule("linear", cfg.T, cfg.beta_start, cfg.beta_end, cfg.S)
    enc = AlignmentEncoder(cfg.C)
    with torch.no_grad():
        enc.out.weight.normal_(0, 0.1)
    cond, xT = torch.randn(2, cfg.C, cfg.H, cfg.W), torch.randn(2, cfg.C, cfg.H, cfg.W)
    with torch.no_grad():
        a, b = sample(enc, cond, xT, sched), sample(enc, cond, xT, sched)
    diff = max((xa - xb).abs().max().item() for (_, xa), (_, xb) in zip(a.states, b.states))
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        with torch.no_grad():
            c, d = sample(enc, cond, xT, sched), sample(enc, cond, xT, sched)
    finally:
        torch.use_deterministic_algorithms(prev)
    identical = all(xc.numpy().tobytes() == xd.numpy().tobytes()
                    for (_, xc), (_, xd) in zip(c.states, d.states))
    dt = time.perf_counter() - t0
    verdict(4, diff <= 1e-6 and identical and dt < 10,
            f"max elementwise difference {diff:.1e}; byte-identical under toggle: {identical}", dt)


# ---------------------------------------------------------------- 5-7 networks and losses

def test_criterion_05_gradient_suite(verdict):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    d = torch.float64
    errs = {}

    enc = AlignmentEncoder(4).double()
    with torch.no_grad():
        enc.out.weight.normal_(0, 0.1)
    x, c = torch.randn(2, 4, 8, 8, dtype=d), torch.randn(2, 4, 8, 8, dtype=d)
    errs["alignment encoder"] = fd_check(enc, lambda: (enc(x, c, torch.tensor([7, 63])) ** 2).mean())

    tol = TrackingOrientedLayer(8, 2, 4, 4).double()
    with torch.no_grad():
        tol.gamma1.fill_(0.3)
    xl, proj = torch.randn(2, 8, 4, 4, dtype=d), torch.randn(2, 8, 4, 4, dtype=d)
    errs["tracking-oriented layer"] = fd_check(tol, lambda: (tol(xl) * proj).sum())

    disc = Discriminator(4).double()
    xd = torch.randn(2, 4, 16, 16, dtype=d)
    errs["discriminator"] = fd_check(disc, lambda: (disc(xd) ** 2).mean())

    bb = SiameseBackbone(4).double()
    img = torch.rand(2, 3, 32, 32, dtype=d)
    wb = torch.linspace(-1, 1, 16, dtype=d).reshape(4, 4)
    errs["backbone"] = fd_check(bb, lambda: (bb(img) * wb).sum())

    head = CorrelationHead(4).double()
    ft, fs = torch.randn(2, 4, 8, 8, dtype=d), torch.randn(2, 4, 16, 16, dtype=d)
    centers = torch.tensor([[3.0, 5.5], [4.0, 4.0]], dtype=d)
    errs["head"] = fd_check(head, lambda: trc_loss(head(ft, fs), centers))

    worst = {k: max(v.values()) for k, v in errs.items()}
    dt = time.perf_counter() - t0
    verdict(5, max(worst.values()) <= TOL and dt < 300,
            ", ".join(f"{k} {v:.1e}" for k, v in worst.items()), dt)


def test_criterion_06_gate_structure(verdict):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    bitwise, shapes = True, True
    for h in (4, 8, 16):
        for w in (4, 8, 16):
            layer = TrackingOrientedLayer(16, 4, h, w)
            x = torch.randn(2, 16, h, w)
            out, mid = layer(x, return_intermediates=True)
            bitwise &= layer.gamma1.item() == 0.0 and torch.equal(mid["xd"], mid["xc"])
            shapes &= out.shape == x.shape
    dt = time.perf_counter() - t0
    verdict(6, bitwise and shapes and dt < 10,
            f"gamma1=0 gives X_d == X_c bitwise: {bitwise}; shapes preserved for 9 sizes: {shapes}", dt)


class _ConstDisc(torch.nn.Module):
    temb = None

    def __init__(self, value):
        super().__init__()
        self.value = value
        self.w = torch.nn.Parameter(torch.zeros(()))

    def forward(self, x, t=None):
        return torch.full((x.shape[0], 1, 1, 1), self.value, dtype=x.dtype) + 0 * self.w


def test_criterion_07_adversarial_zero_case(verdict):
    t0 = time.perf_counter()
    cfg = RunConfig()
    model, _ = build(cfg)
    with torch.no_grad():
        traj = model.aligner.trajectory(torch.randn(2, cfg.C, cfg.H, cfg.W))
    zero = adv_gen_loss(_ConstDisc(1.0), traj).item()
    count = adv_gen_loss(_ConstDisc(0.0), traj).item()
    dt = time.perf_counter() - t0
    verdict(7, zero == 0.0 and count == len(traj) and dt < 5,
            f"D = l_d gives {zero}; D = 0 gives {count} for {len(traj)} states", dt)


# ---------------------------------------------------------------- 8-9 desk-scale reproduction

def _held_out(cfg, n, base):
    return [gen_pair(cfg, base + i, f"ho{i:02d}") for i in range(n)]


@pytest.fixture(scope="module")
def desk_runs():
    """Train one model per seed on paired synthetic data; measure the feature gap."""
    runs = {}
    start = time.perf_counter()
    for seed in SEEDS:
        cfg = RunConfig(seed=seed)
        pairs = [gen_pair(cfg, 10_000 * (seed + 1) + i, f"tr{i:02d}") for i in range(cfg.sequences)]
        state = fit(cfg, [p[0] for p in pairs], [p[1] for p in pairs], steps=DESK_STEPS)
        held = _held_out(cfg, 4, 800_000)
        gap = alignment_gap(state.model, [p[0] for p in held], [p[1] for p in held], seed)
        runs[seed] = {"model": state.model, "cfg": cfg, "gap": gap, "steps": state.step}
    return {"runs": runs, "seconds": time.perf_counter() - start}


def test_criterion_08_alignment_gap(desk_runs, verdict):
    runs = desk_runs["runs"]
    ratios = [runs[s]["gap"]["ratio"] for s in SEEDS]
    vs_raw_day = [runs[s]["gap"]["night_vs_raw_day"] / runs[s]["gap"]["raw"] for s in SEEDS]
    med = float(np.median(ratios))
    dt = desk_runs["seconds"]
    steps_ok = all(runs[s]["steps"] == DESK_STEPS for s in SEEDS)
    detail = (f"median aligned/raw discrepancy {med:.3f} (per seed {', '.join(f'{r:.3f}' for r in ratios)}); "
              f"denoised night vs raw day {', '.join(f'{r:.2f}' for r in vs_raw_day)}")
    verdict(8, med <= 0.5 and steps_ok and dt <= 1800, detail, dt)


def _mean_auc(model, seqs, align, seed):
    return float(np.mean([metric_report(track_sequence(model, s, align, seed), s.boxes).success_auc
                          for s in seqs]))


def test_criterion_09_tracking_gain(desk_runs, verdict):
    t0 = time.perf_counter()
    night = [p[1] for p in _held_out(RunConfig(), 20, 900_000)]
    diffs, parts = [], []
    for seed in SEEDS:
        model = desk_runs["runs"][seed]["model"]
        base = _mean_auc(model, night, False, seed)
        aligned = _mean_auc(model, night, True, seed)
        diffs.append(aligned - base)
        parts.append(f"seed {seed}: {base:.3f} -> {aligned:.3f}")
    dt = time.perf_counter() - t0
    verdict(9, all(d > 0 for d in diffs), "; ".join(parts), dt)


# ---------------------------------------------------------------- 10-12 metrics, schedule, I/O

def _ref_iou(a, b):
    x1, y1 = max(a[0], b[0]), max(a[1], b[1])
    x2, y2 = min(a[0] + a[2], b[0] + b[2]), min(a[1] + a[3], b[1] + b[3])
    inter = max(0.0, x2 - x1) * max(0.0, y2 - y1)
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def _ref_center(a):
    return a[0] + a[2] / 2, a[1] + a[3] / 2


def _ref_metrics(preds, gts):
    ious = [_ref_iou(p, g) for p, g in zip(preds, gts)]
    cles, nerr = [], []
    for p, g in zip(preds, gts):
        (px, py), (gx, gy) = _ref_center(p), _ref_center(g)
        cles.append(math.sqrt((px - gx) ** 2 + (py - gy) ** 2))
        nerr.append(math.sqrt(((px - gx) / g[2]) ** 2 + ((py - gy) / g[3]) ** 2))
    succ = sum(sum(1 for v in ious if v > k / 20) / len(ious) for k in range(21)) / 21
    prec = sum(1 for v in cles if v <= 20) / len(cles)
    nprec = sum(sum(1 for v in nerr if v <= k / 40) / len(nerr) for k in range(21)) / 21
    return ious, cles, succ, prec, nprec


def test_criterion_10_metric_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 40))
        gts = [(rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(4, 30), rng.uniform(4, 30))
               for _ in range(n)]
        preds = [(g[0] + rng.normal(0, 8), g[1] + rng.normal(0, 8), g[2] * rng.uniform(0.5, 1.5),
                  g[3] * rng.uniform(0.5, 1.5)) for g in gts]
        pb, gb = [BoundingBox(*p) for p in preds], [BoundingBox(*g) for g in gts]
        r_ious, r_cles, r_succ, r_prec, r_nprec = _ref_metrics(preds, gts)
        ious = [iou(p, g) for p, g in zip(pb, gb)]
        cles = [cle(p, g) for p, g in zip(pb, gb)]
        worst = max(worst, max(abs(a - b) for a, b in zip(ious, r_ious)),
                    max(abs(a - b) for a, b in zip(cles, r_cles)),
                    abs(success_auc(ious) - r_succ), abs(precision_at(cles) - r_prec),
                    abs(norm_precision_auc(pb, gb) - r_nprec))
    table = {(0.507, 0.538): 6.1, (0.640, 0.677): 5.8, (0.426, 0.452): 6.1}
    deltas = {k: percent_delta(*k) for k in table}
    delta_ok = all(abs(deltas[k] - v) <= 0.05 for k, v in table.items())
    dt = time.perf_counter() - t0
    verdict(10, worst <= 1e-9 and delta_ok and dt < 10,
            f"max oracle deviation {worst:.1e}; deltas {list(deltas.values())}", dt)


def test_criterion_11_poly_schedule(verdict):
    t0 = time.perf_counter()
    base, mx = 0.005, 100
    lrs = [poly_lr(base, i, mx, 0.8) for i in range(mx + 1)]
    ends = lrs[0] == base and lrs[-1] == 0.0
    decreasing = all(a > b for a, b in zip(lrs, lrs[1:]))
    spot = abs(poly_lr(0.005, 50, 100, 0.8) - 0.005 * 0.5 ** 0.8)
    dt = time.perf_counter() - t0
    verdict(11, ends and decreasing and spot <= 1e-12 and dt < 1,
            f"endpoints {ends}, strictly decreasing {decreasing}, spot-value error {spot:.1e}", dt)


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix != ".json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_12_io_round_trips(tmp_path, verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(12)
    boxes = [BoundingBox(*rng.uniform(1, 50, 4).round(3)) for _ in range(5)]
    img = [rng.integers(0, 256, (8, 8, 3), dtype=np.uint8) for _ in range(5)]
    seq = TrackSequence("rt_night", boxes, "night", frozenset({"LR", "IV"}), images=img)
    write_sequence(seq, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")[0]
    dataset_ok = (back.boxes == boxes and back.attributes == seq.attributes
                  and all(np.array_equal(back.frame_array(i), img[i]) for i in range(5)))

    maps = torch.randn(6, 32, 16, 16)
    labels = ["day", "night"] * 3
    dump_features(maps, labels, tmp_path / "f.bin")
    arr, lab = load_features(tmp_path / "f.bin")
    dump_ok = np.array_equal(arr, maps.numpy()) and lab == labels

    argv = ["gen-data", "--sequences", "2", "--frames", "8", "--seed", "7", "--out"]
    assert cli.main(argv + [str(tmp_path / "a")]) == 0 and cli.main(argv + [str(tmp_path / "b")]) == 0
    gen_ok = _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    dt = time.perf_counter() - t0
    verdict(12, dataset_ok and dump_ok and gen_ok and dt < 30,
            f"dataset lossless {dataset_ok}, feature dump identical {dump_ok}, "
            f"gen-data byte-identical {gen_ok}",
            dt)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
