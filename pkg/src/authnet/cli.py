"""Command-line entry point: ``authnet <subcommand> [--config FILE] [--set key=value ...]``.

Exit codes
    0  success
    1  unexpected error
    2  invalid configuration or arguments
    3  missing prerequisite artifact
    4  malformed data or artifact file
    5  numerical failure during training
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from authnet import attacks as A
from authnet import certify as C
from authnet import pipeline as P
from authnet.config import ConfigError, RunConfig, load_config
from authnet.dataio import (
    DataFormatError,
    export_csv,
    export_matrix,
    gen_synthetic,
    load_checkpoint,
    load_key,
    load_mnist,
    save_checkpoint,
    save_key,
)
from authnet.nncore import TrainConfig, accuracy, build_model, train_clean
from authnet.nncore.training import TrainingError

log = logging.getLogger("authnet")

OUT_ENV = "AUTHNET_OUT_DIR"
EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5

CLEAN, KEY, AUTH = "clean.ckpt", "key.akey", "authnet.ckpt"
ATTACKS = ("differential", "mask-opt", "finetune", "prune", "offset", "extract")
SWEEPS = {"auth-bits": (1, 5, 10, 15), "gate": (1, 2, 3, 4), "gamma": (1.0, 2.0, 3.0, 4.0, 5.0)}


class MissingArtifactError(FileNotFoundError):
    pass


# --- shared helpers ----------------------------------------------------------

class Run:
    """Resolved config plus lazily loaded datasets and artifacts."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._data = {}

    def path(self, name):
        return self.out / name

    def need(self, name):
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(f"missing prerequisite artifact {p}")
        return p

    def data(self, split):
        if split not in self._data:
            cfg = self.cfg
            if cfg.dataset == "mnist":
                try:
                    ds = load_mnist(cfg.data_dir, split)
                except FileNotFoundError as exc:
                    raise MissingArtifactError(str(exc)) from None
            else:
                seed = cfg.seed if split == "train" else cfg.seed + 1
                n = cfg.synth_per_class if split == "train" else max(1, cfg.synth_per_class // 2)
                ds = gen_synthetic(cfg.synth_k, n, separation=cfg.synth_separation, seed=seed)
            limit = cfg.train_subset if split == "train" else cfg.test_subset
            if 0 < limit < len(ds.labels):
                idx = np.sort(np.random.default_rng(cfg.seed).permutation(len(ds.labels))[:limit])
                ds = ds.subset(idx)
            self._data[split] = ds
        return self._data[split]

    def clean(self):
        return load_checkpoint(self.need(CLEAN))[0]

    def key(self):
        return load_key(self.need(KEY))

    def protected(self):
        model, manifest = load_checkpoint(self.need(AUTH))
        return model, int(manifest["seg_index"])

    def seg_index(self, model, stage=None):
        cfg = self.cfg
        if cfg.seg_index >= 0 and stage is None:
            return cfg.seg_index
        if not model.stages:
            raise ConfigError(f"architecture {model.arch} has no stages; set seg_index explicitly")
        return P.stage_to_seg_index(model, cfg.seg_stage if stage is None else stage)

    def echo(self, command):
        self.cfg.dump(self.path(f"{command.replace(' ', '_')}.config"))


def _ft_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(learning_rate=cfg.ft_lr, epochs=cfg.ft_epochs, batch_size=cfg.ft_batch,
                       lr_decay_factor=cfg.ft_decay, lr_decay_period=cfg.ft_decay_period, rng_seed=cfg.seed)


# --- pipeline steps ----------------------------------------------------------

def step_train_clean(run: Run) -> str:
    cfg = run.cfg
    tr, te = run.data("train"), run.data("test")
    k = int(tr.labels.max()) + 1 if cfg.dataset == "mnist" else cfg.synth_k
    model = build_model(cfg.arch, seed=cfg.seed, num_classes=k, input_shape=tr.images.shape[1:])
    tc = TrainConfig(learning_rate=cfg.clean_lr, epochs=cfg.clean_epochs, batch_size=cfg.clean_batch,
                     rng_seed=cfg.seed)
    model, hist = train_clean(model, tr.images, tr.labels, tc)
    save_checkpoint(run.path(CLEAN), model, seed=cfg.seed)
    acc = accuracy(model, te.images, te.labels)
    rows = [{"epoch": h["epoch"], "loss": h["loss"], "acc_leg": h["acc"]} for h in hist]
    export_csv(run.path("clean_history.csv"), rows, "metrics")
    return f"train-clean: test accuracy {acc:.4f} -> {run.path(CLEAN)}"


def invert(run: Run, model, seg, n_bits=None, gamma=None):
    cfg = run.cfg
    tr = run.data("train")
    split = P.split_model(model, seg)
    sample = tr.images[P.balanced_sample(tr.labels, cfg.inv_per_class, cfg.seed)]
    bits = P.select_auth_bits(split.head, sample, cfg.auth_bits if n_bits is None else n_bits)
    res = P.invert_key(split.head, sample, bits, cfg.gamma if gamma is None else gamma, cfg.eps_m, cfg.eps_u,
                       cfg.lr_m, cfg.lr_u, cfg.inv_iters, cfg.seed, cfg.inv_batch, cfg.mask_mode, seg)
    return split, res


def step_invert_key(run: Run) -> str:
    model = run.clean()
    seg = run.seg_index(model)
    _, res = invert(run, model, seg)
    save_key(run.path(KEY), res.key)
    export_csv(run.path("inversion.csv"), res.history, ["step", "loss"])
    return (f"invert-key: gate {seg}, auth bits {list(res.key.auth_bits)}, gamma {res.final_gamma:.4f}, "
            f"loss {res.final_loss:.4f} -> {run.path(KEY)}")


def tune(run: Run, model, key, seg):
    cfg = run.cfg
    tr, te = run.data("train"), run.data("test")
    dmix = P.build_dmix(tr.images, tr.labels, key, model.num_classes, cfg.seed)
    return P.finetune_tail(P.split_model(model, seg), key, dmix, _ft_config(cfg), te.images, te.labels)


def step_finetune_tail(run: Run) -> str:
    key = run.key()
    model = run.clean()
    seg = key.seg_index if key.seg_index >= 0 else run.seg_index(model)
    tuned, hist = tune(run, model, key, seg)
    save_checkpoint(run.path(AUTH), tuned.as_model(), seg_index=seg, seed=run.cfg.seed)
    export_csv(run.path("finetune_history.csv"), hist, "metrics")
    last = hist[-1] if hist else {"acc_leg": float("nan"), "acc_ill": float("nan")}
    return f"finetune-tail: acc_leg {last['acc_leg']:.4f} acc_ill {last['acc_ill']:.4f} -> {run.path(AUTH)}"


def step_eval(run: Run) -> str:
    cfg = run.cfg
    key = run.key()
    model, _ = run.protected()
    baseline = run.clean() if run.path(CLEAN).exists() else None
    te = run.data("test")
    m = P.evaluate(model, key, te.images, te.labels, cfg.timing_reps, baseline)
    row = {"acc_leg": m.acc_leg, "acc_ill": m.acc_ill, "gap": m.gap, "cc": m.cc}
    if baseline is not None:
        row["baseline"] = accuracy(baseline, te.images, te.labels)
    export_csv(run.path("eval.csv"), [row], ["acc_leg", "acc_ill", "gap", "cc", "baseline"])
    cc = "n/a" if m.cc is None else f"{m.cc:.4f}"
    return f"eval: acc_leg {m.acc_leg:.4f} acc_ill {m.acc_ill:.4f} gap {m.gap:.4f} cc {cc}"


def step_certify_auth(run: Run) -> str:
    cfg = run.cfg
    key = run.key()
    protected, _ = run.protected()
    clean = run.clean()
    te = run.data("test")
    x, y = te.images[:cfg.cert_samples], te.labels[:cfg.cert_samples]
    kw = dict(eps_hi=cfg.cert_eps_hi, tol=cfg.cert_tol, method=cfg.cert_method)
    mean_p, res_p = C.mean_auth_radius(protected, x, y, key, **kw)
    mean_c, res_c = C.mean_auth_radius(clean, x, y, None, **kw)
    for name, res in (("radii_protected.csv", res_p), ("radii_clean.csv", res_c)):
        rows = [{"sample_id": i, "class": int(c), "kind": r.kind, "radius": r.radius}
                for i, (c, r) in enumerate(zip(y, res))]
        export_csv(run.path(name), rows, "radii")
    ratio = mean_p / mean_c if mean_c > 0 else float("inf")
    return f"certify-auth: mean eps_m protected {mean_p:.6f} clean {mean_c:.6f} ratio {ratio:.4f}"


def refuse_analysis(model, key, images, labels, cfg: RunConfig, max_embed: int = 4000):
    """Refuse balls around fake-keyed images, auth balls around keyed images, PCA + KDE."""
    kw = dict(eps_hi=cfg.cert_eps_hi, tol=cfg.cert_tol, method=cfg.cert_method)
    dom = C.refuse_domain(model, images, labels, cfg.refuse_keys, cfg.refuse_points, cfg.eps_m, cfg.eps_u,
                          cfg.seed, **kw)
    keyed = P.apply_key(images, key)
    auth_pts, auth_lab = [], []
    for i, (x, yv) in enumerate(zip(keyed, labels)):
        r = C.auth_radius(model, x, int(yv), **kw)
        auth_pts.append(C.sample_ball(x, r.radius, cfg.refuse_points, seed=cfg.seed + i))
        auth_lab.append(np.full(cfg.refuse_points, yv))
    auth_pts, auth_lab = np.concatenate(auth_pts), np.concatenate(auth_lab)
    auth_prof = C.refuse_accuracy_profile(model, auth_pts, auth_lab)
    rng = np.random.default_rng(cfg.seed)
    n_ref = min(len(dom.points), max_embed)
    n_auth = min(len(auth_pts), max_embed)
    ri = np.sort(rng.permutation(len(dom.points))[:n_ref])
    ai = np.sort(rng.permutation(len(auth_pts))[:n_auth])
    pts = np.concatenate([dom.points[ri], auth_pts[ai]])
    kinds = np.array(["refuse"] * n_ref + ["authentication"] * n_auth)
    classes = np.concatenate([dom.point_labels[ri], auth_lab[ai]])
    correct = np.concatenate([dom.profile.correct[ri], auth_prof.correct[ai]])
    emb = C.pca_embed(pts, 2, seed=cfg.seed)
    occ = C.refuse_occupancy(emb.coords, kinds, classes)
    return {"domain": dom, "auth_profile": auth_prof, "embedding": emb, "occupancy": occ,
            "kinds": kinds, "classes": classes, "correct": correct}


def step_refuse_domain(run: Run) -> str:
    cfg = run.cfg
    key = run.key()
    model, _ = run.protected()
    te = run.data("test")
    n = cfg.refuse_images
    r = refuse_analysis(model, key, te.images[:n], te.labels[:n], cfg)
    dom, occ = r["domain"], r["occupancy"]
    rows = [{"sample_id": int(i), "class": int(dom.center_labels[i]), "kind": res.kind, "radius": res.radius}
            for i, res in zip(dom.ball_center, dom.radii)]
    export_csv(run.path("refuse_radii.csv"), rows, "radii")
    coords = r["embedding"].coords
    emb_rows = [{"x": a, "y": b, "class": int(c), "kind": k, "correct": bool(ok)}
                for (a, b), c, k, ok in zip(coords, r["classes"], r["kinds"], r["correct"])]
    export_csv(run.path("embedded.csv"), emb_rows, "embedded")
    export_matrix(run.path("density_refuse.csv"), occ.refuse.density)
    export_matrix(run.path("density_auth.csv"), occ.auth.density)
    prof = dom.profile
    overall = prof.overall if prof else float("nan")
    max_ball = prof.max_ball if prof else float("nan")
    return (f"refuse-domain: {len(dom.radii)} balls, refuse acc {overall:.4f} (max ball {max_ball:.4f}), "
            f"auth acc {r['auth_profile'].overall:.4f}, refuse occupancy {occ.refuse_fraction:.3f}")


def step_attack(run: Run, kind: str) -> str:
    cfg = run.cfg
    key = run.key()
    model, _ = run.protected()
    tr, te = run.data("train"), run.data("test")
    if kind == "differential":
        reps = [A.differential_attack(model, key, tr.images, te.images, te.labels, cfg.diff_n, s, cfg.seed)
                for s in (0.0, cfg.defense_strength)]
    elif kind == "mask-opt":
        reps = [A.mask_optimization_attack(model, tr.images, tr.labels, te.images, te.labels,
                                           cfg.attack_fraction, cfg.maskopt_epochs, cfg.lr_m, cfg.lr_u,
                                           cfg.eps_m, cfg.eps_u, seed=cfg.seed, key=key)[0]]
    elif kind == "finetune":
        new = gen_synthetic(cfg.synth_k, cfg.synth_per_class, shape=model.input_shape,
                            separation=cfg.synth_separation, seed=cfg.seed + 7)
        new_te = gen_synthetic(cfg.synth_k, max(1, cfg.synth_per_class // 2), shape=model.input_shape,
                               separation=cfg.synth_separation, seed=cfg.seed + 8)
        tc = TrainConfig(learning_rate=cfg.ftattack_lr, epochs=cfg.ftattack_epochs, batch_size=cfg.clean_batch,
                         rng_seed=cfg.seed)
        reps = [A.finetune_attack(model, key, new.images, new.labels, cfg.synth_k, tc, te.images, te.labels,
                                  (new_te.images, new_te.labels))]
    elif kind == "prune":
        rows = A.pruning_sweep(model, key, te.images, te.labels)
        export_csv(run.path("attack_prune.csv"), rows, ["rate", "acc_leg", "acc_ill", "gap"])
        worst = max(r["acc_ill"] for r in rows)
        return f"attack prune: max acc_ill over {len(rows)} rates {worst:.4f}"
    elif kind == "offset":
        reps = [A.offset_attack(model, tr.images, tr.labels, te.images, te.labels, cfg.attack_fraction,
                                cfg.offset_rounds, cfg.offset_lr, seed=cfg.seed, key=key)]
    elif kind == "extract":
        ecfg = A.ExtractionConfig(cfg.extract_source, cfg.extract_loss, cfg.arch, cfg.extract_epochs,
                                  cfg.extract_lr)
        queries = extraction_queries(run, cfg.extract_source, cfg.extract_queries, model.input_shape)
        reps = []
        for victim in (model, run.clean()):
            rep, _ = A.extract_model(A.soft_label_oracle(victim), queries, ecfg, te.images, te.labels,
                                     model.num_classes, cfg.seed)
            reps.append(rep)
        reps[0].kind, reps[1].kind = "extraction-protected", "extraction-clean"
    else:
        raise ConfigError(f"unknown attack {kind!r}")
    export_csv(run.path(f"attack_{kind}.csv"), [r.row() for r in reps], "attack")
    return f"attack {kind}: " + ", ".join(f"{r.kind} {r.acc_attacked:.4f}" for r in reps)


def extraction_queries(run: Run, source: str, n: int, shape):
    if source == "in-domain":
        tr = run.data("train")
        idx = np.sort(np.random.default_rng(run.cfg.seed + 3).permutation(len(tr.labels))[:n])
        return tr.images[idx]
    per = max(1, n // 10)
    return gen_synthetic(10, per, shape=tuple(shape), seed=run.cfg.seed + 5).images


def step_sweep(run: Run, param: str) -> str:
    if param not in SWEEPS:
        raise ConfigError(f"unknown sweep {param!r}; choose from {sorted(SWEEPS)}")
    cfg = run.cfg
    clean = run.clean()
    te = run.data("test")
    rows = []
    for value in SWEEPS[param]:
        seg = run.seg_index(clean, stage=value) if param == "gate" else run.seg_index(clean)
        nb = value if param == "auth-bits" else None
        gm = value if param == "gamma" else None
        _, res = invert(run, clean, seg, nb, gm)
        tuned, _ = tune(run, clean, res.key, seg)
        m = P.evaluate(tuned, res.key, te.images, te.labels, timing_reps=0)
        rows.append({"value": value, "seg_index": seg, "gamma_reached": res.final_gamma,
                     "acc_leg": m.acc_leg, "acc_ill": m.acc_ill, "gap": m.gap})
        log.info("sweep %s=%s: %s", param, value, rows[-1])
    export_csv(run.path(f"sweep_{param}.csv"), rows,
               ["value", "seg_index", "gamma_reached", "acc_leg", "acc_ill", "gap"])
    return f"sweep {param}: " + ", ".join(f"{r['value']}->ill {r['acc_ill']:.3f}" for r in rows)


STEPS = {
    "train-clean": step_train_clean,
    "invert-key": step_invert_key,
    "finetune-tail": step_finetune_tail,
    "eval": step_eval,
    "certify-auth": step_certify_auth,
    "refuse-domain": step_refuse_domain,
}


# --- argument parsing --------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", metavar="FILE", default=None, help="key=value config file")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                   help="override one config key (repeatable; beats --config)")
    p.add_argument("--out-dir", default=None,
                   help=f"output directory (beats config; ${OUT_ENV} beats both)")
    p.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress")


def build_parser() -> argparse.ArgumentParser:
    keys = ", ".join(f"{f.name}={f.default}" for f in fields(RunConfig))
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="authnet", description="Key-gated model protection toolkit.",
                                     epilog=f"config keys and defaults: {keys}", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in STEPS.items():
        _add_common(sub.add_parser(name, help=fn.__doc__ or name, formatter_class=fmt, epilog=f"config keys: {keys}"))
    pa = sub.add_parser("attack", help="run one attack", formatter_class=fmt, epilog=f"config keys: {keys}")
    pa.add_argument("kind", choices=ATTACKS)
    _add_common(pa)
    ps = sub.add_parser("sweep", help="hyper-parameter study", formatter_class=fmt, epilog=f"config keys: {keys}")
    ps.add_argument("param", choices=sorted(SWEEPS))
    _add_common(ps)
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.out_dir is not None:
        overrides.append(f"out_dir={args.out_dir}")
    if os.environ.get(OUT_ENV):
        overrides.append(f"out_dir={os.environ[OUT_ENV]}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        run = Run(cfg)
        if args.command == "attack":
            run.echo(f"attack {args.kind}")
            summary = step_attack(run, args.kind)
        elif args.command == "sweep":
            run.echo(f"sweep {args.param}")
            summary = step_sweep(run, args.param)
        else:
            run.echo(args.command)
            summary = STEPS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
