"""End-to-end acceptance checks on LeNet/MNIST.

The module fixture runs the real CLI pipeline (train-clean, invert-key,
finetune-tail, eval) into a temporary directory, then each test measures one
criterion and records a PASS/FAIL line before asserting.  Attack criteria use
a fixed 2000-image test subset to keep the whole module near 10 minutes on a
single core.  Skip with ``-m "not slow"``.
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from authnet import attacks as A
from authnet import certify as C
from authnet.cli import AUTH, CLEAN, KEY, Run, main, refuse_analysis
from authnet.config import load_config
from authnet.dataio import load_checkpoint, load_key, read_csv
from authnet.nncore import AvgPool2d, Conv2d, Flatten, Linear, ReLU, SequentialModel, accuracy, forward
from authnet.pipeline import gate_activation_deltas, split_model

from conftest import ACCEPTANCE, FD_TOL, fd_check, small_conv_net, small_relu_net

ROOT = Path(__file__).resolve().parents[1]
LENET_CFG = ROOT / "configs" / "lenet.cfg"
SMOKE_CFG = ROOT / "configs" / "smoke.cfg"
MNIST = ROOT / "data" / "mnist"

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(not (MNIST / "train-images-idx3-ubyte.gz").exists(), reason="MNIST files not present"),
]


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def lenet(tmp_path_factory):
    out = tmp_path_factory.mktemp("lenet")
    argv = ["--config", str(LENET_CFG), "--out-dir", str(out), "--set", f"data_dir={MNIST}"]
    t0 = time.perf_counter()
    for cmd in ("train-clean", "invert-key", "finetune-tail", "eval"):
        assert main([cmd, *argv]) == 0, cmd
    elapsed = time.perf_counter() - t0
    cfg = load_config(LENET_CFG, [f"out_dir={out}", f"data_dir={MNIST}"])
    run = Run(cfg)
    te = run.data("test")
    sub = np.sort(np.random.default_rng(0).permutation(len(te.labels))[:2000])
    protected, seg = load_checkpoint(out / AUTH)
    return {
        "out": out,
        "cfg": cfg,
        "elapsed": elapsed,
        "clean": load_checkpoint(out / CLEAN)[0],
        "protected": protected,
        "seg": int(seg["seg_index"]),
        "key": load_key(out / KEY),
        "train": run.data("train"),
        "test": te,
        "x": te.images[sub],
        "y": te.labels[sub],
    }


def test_criterion_1_effectiveness(lenet):
    row = read_csv(lenet["out"] / "eval.csv")[0]
    base, leg, ill = float(row["baseline"]), float(row["acc_leg"]), float(row["acc_ill"])
    gap, cc = leg - ill, float(row["cc"])
    minutes = lenet["elapsed"] / 60
    checks = [base >= 0.97, leg >= base - 0.03, ill <= 0.35, gap >= 0.50, cc <= 0.10, minutes <= 30]
    ok = record(1, all(checks), f"baseline {base:.4f} acc_leg {leg:.4f} acc_ill {ill:.4f} gap {gap:.4f} "
                                f"cc {cc:.4f} pipeline {minutes:.1f} min")
    assert ok


def test_criterion_2_certified_sensitivity(lenet):
    te, cfg = lenet["test"], lenet["cfg"]
    x, y = te.images[:20], te.labels[:20]
    kw = dict(eps_hi=cfg.cert_eps_hi, tol=cfg.cert_tol, method="crown")
    mean_p, _ = C.mean_auth_radius(lenet["protected"], x, y, lenet["key"], **kw)
    mean_c, _ = C.mean_auth_radius(lenet["clean"], x, y, None, **kw)
    ratio = mean_p / mean_c
    ok = record(2, ratio <= 0.5, f"mean eps_m protected {mean_p:.6f} clean {mean_c:.6f} ratio {ratio:.3f} "
                                 f"(need <= 0.5, 20 points)")
    assert ok


def test_criterion_3_bound_soundness():
    rng = np.random.default_rng(2024)
    violations, looser = 0, 0
    for i in range(50):
        seed = int(rng.integers(1 << 30))
        model = small_relu_net(seed, hidden=8) if i % 2 else small_conv_net(seed)
        x0 = rng.uniform(0, 1, model.input_shape)
        eps = float(rng.uniform(0.001, 0.3))
        xs = x0[None] + rng.uniform(-eps, eps, (1000,) + x0.shape)
        f = forward(model, xs)
        ibp, crown = C.interval_bounds(model, x0, eps), C.crown_bounds(model, x0, eps)
        for b in (ibp, crown):
            violations += int(np.sum((f < b.lower - 1e-9) | (f > b.upper + 1e-9)))
        looser += int(np.sum(crown.lower < ibp.lower - 1e-12) + np.sum(crown.upper > ibp.upper + 1e-12))
    ok = record(3, violations == 0 and looser == 0,
                f"50 configs x 1000 samples: {violations} violations, {looser} coords where crown looser than ibp")
    assert ok


def test_criterion_4_refuse_domain(lenet):
    cfg = lenet["cfg"].replace(refuse_keys=20, refuse_points=100)
    te = lenet["test"]
    r = refuse_analysis(lenet["protected"], lenet["key"], te.images[:20], te.labels[:20], cfg)
    prof, auth, occ = r["domain"].profile, r["auth_profile"], r["occupancy"]
    checks = [prof.overall <= 0.30, prof.max_ball <= 0.60, auth.overall >= 0.90, occ.refuse_fraction >= 0.6]
    ok = record(4, all(checks), f"{len(r['domain'].radii)} balls: refuse acc {prof.overall:.4f} max ball "
                                f"{prof.max_ball:.4f} auth acc {auth.overall:.4f} "
                                f"occupancy {occ.refuse_fraction:.3f} (need >= 0.6)")
    assert ok


def test_criterion_5_pruning(lenet):
    x, y = lenet["x"], lenet["y"]
    prot = A.pruning_sweep(lenet["protected"], lenet["key"], x, y)
    clean = A.pruning_sweep(lenet["clean"], None, x, y)
    worst_ill = max(r["acc_ill"] for r in prot)
    base = clean[0]["acc"]
    worst_drop = max(base - r["acc"] for r in clean if r["rate"] <= 0.4)
    ok = record(5, worst_ill < 0.5 and worst_drop <= 0.05,
                f"max acc_ill {worst_ill:.4f} over {len(prot)} rates; clean drop at rate <= 0.4 {worst_drop:.4f}")
    assert ok


def test_criterion_6_differential(lenet):
    x, y, tr = lenet["x"], lenet["y"], lenet["train"]
    plain = A.differential_attack(lenet["protected"], lenet["key"], tr.images, x, y, n=100, seed=0)
    noised = A.differential_attack(lenet["protected"], lenet["key"], tr.images, x, y, n=100,
                                   defense_strength=lenet["cfg"].defense_strength, seed=0)
    checks = [plain.acc_attacked <= plain.acc_leg - 0.20, noised.acc_attacked < plain.acc_attacked,
              noised.acc_leg >= plain.acc_leg - 0.02]
    ok = record(6, all(checks), f"acc_diff {plain.acc_attacked:.4f} vs acc_leg {plain.acc_leg:.4f}; with defense "
                                f"acc_diff {noised.acc_attacked:.4f} acc_leg {noised.acc_leg:.4f}")
    assert ok


def test_criterion_7_offsetting(lenet):
    tr = lenet["train"]
    rep = A.offset_attack(lenet["protected"], tr.images, tr.labels, lenet["x"], lenet["y"], data_fraction=0.2,
                          rounds=10000, lr=1e-3, seed=0, key=lenet["key"])
    ok = record(7, rep.acc_attacked <= 0.35, f"offset attack accuracy on raw inputs {rep.acc_attacked:.4f}")
    assert ok


def test_criterion_8_extraction(lenet):
    tr, x, y = lenet["train"], lenet["x"], lenet["y"]
    queries = tr.images[np.sort(np.random.default_rng(3).permutation(len(tr.labels))[:10000])]
    ecfg = A.ExtractionConfig("in-domain", "mse-soft-label", "lenet", epochs=5, lr=1e-3)
    rep_p, _ = A.extract_model(A.soft_label_oracle(lenet["protected"]), queries, ecfg, x, y)
    rep_c, _ = A.extract_model(A.soft_label_oracle(lenet["clean"]), queries, ecfg, x, y)
    victim = accuracy(lenet["clean"], x, y)
    ok = record(8, rep_p.acc_attacked <= 0.35 and rep_c.acc_attacked >= victim - 0.05,
                f"substitute vs protected {rep_p.acc_attacked:.4f}; vs clean {rep_c.acc_attacked:.4f} "
                f"(victim {victim:.4f})")
    assert ok


def _digests(out):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.iterdir())
            if p.suffix != ".config"}


def test_criterion_9_numerics(tmp_path):
    rng = np.random.default_rng(9)
    lenet_like = SequentialModel([Conv2d(2, 3, 1, 1), ReLU(), AvgPool2d(2), Conv2d(3, 3), ReLU(), Flatten(),
                                  Linear(5), ReLU(), Linear(3)], (1, 8, 8), 3, seed=4)
    worst = max(
        fd_check(small_conv_net(1), rng.uniform(0.05, 1, (2, 1, 6, 6))),
        fd_check(small_relu_net(2), rng.standard_normal((2, 1, 1, 4))),
        fd_check(lenet_like, rng.uniform(0.05, 1, (2, 1, 8, 8))),
    )
    hashes = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in ("train-clean", "invert-key", "finetune-tail", "eval"):
            assert main([cmd, "--config", str(SMOKE_CFG), "--out-dir", str(out)]) == 0
        hashes.append(_digests(out))
    same = hashes[0] == hashes[1]
    ok = record(9, worst <= FD_TOL and same,
                f"max FD relative error {worst:.2e}; {len(hashes[0])} output files identical across runs: {same}")
    assert ok


def test_inversion_invariants(lenet):
    # squeezed gate activations on raw vs keyed test images
    head = split_model(lenet["protected"], lenet["seg"]).head
    d = gate_activation_deltas(head, lenet["x"][:1000], lenet["key"])
    ratio = d["mean_abs_delta_ab"] / max(d["mean_abs_delta_rest"], 1e-12)
    ok = d["mean_delta_ab"] > 0 and ratio >= 5
    line = (f"invariant auth-bit delta: {'PASS' if ok else 'FAIL'}  mean Ab delta {d['mean_delta_ab']:.4f}, "
            f"Ab/rest magnitude ratio {ratio:.2f} (need > 0 and >= 5)")
    ACCEPTANCE.append(line)
    print(line)
    assert ok
