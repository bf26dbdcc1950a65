"""Command-line entry point.

Exit codes: 0 success, 1 verification or runtime failure, 2 usage or
configuration error, 3 missing resource (dataset files).
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import data as data_mod
from . import kernels
from . import network as nw
from . import training as tr
from . import verify as vf
from .errors import DatasetMissing, GPNError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_MISSING = 0, 1, 2, 3

logger = logging.getLogger("gpn")

TRAIN_DEFAULTS = {
    "seed": 0,
    "dataset": "toy_regression",
    "data_root": None,
    "arch": "1x10x1",
    "mode": "meanvar",
    "objective": "ml_regression",
    "sharing": "none",
    "target_init": "random",
    "r_count": 14,
    "lr0": 1e-3,
    "lr_min": 1e-6,
    "patience": 10,
    "batch_size": 200,
    "max_iters": 200_000,
    "eval_every": None,
    "val_fraction": 0.10,
    "penalty": True,
    "n_samples": 200,
}

VERIFY_CHECKS = ("kernels", "layers", "gradients", "clt", "activation-fit")
EXTRA_CHECKS = ("unscented",)


class UsageError(Exception):
    pass


def arch_type(text):
    try:
        return vf.parse_arch(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def int_list(text):
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def str_list(text):
    return [p for p in text.split(",") if p]


def build_id():
    """Digest of the package sources; identical builds share it."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(out_dir, command, config, extra=None):
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "build_id": build_id(),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
    }
    manifest.update(extra or {})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_config_file(path):
    """JSON object, or a manifest (whose ``config`` entry is used), or key=value lines."""
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError:
        cfg = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"--config: line {lineno}: expected key = value") from None
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                cfg[key] = json.loads(value)
            except json.JSONDecodeError:
                cfg[key] = value
    if not isinstance(cfg, dict):
        raise UsageError("--config: expected a JSON object")
    if "config" in cfg and "build_id" in cfg:
        cfg = cfg["config"]
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def resolve(args, defaults):
    """Flags override config-file keys, which override defaults."""
    cfg = dict(defaults)
    file_cfg = load_config_file(getattr(args, "config", None))
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise UsageError(f"--config: unknown keys {sorted(unknown)}")
    cfg.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if isinstance(cfg["arch"], str):
        try:
            cfg["arch"] = vf.parse_arch(cfg["arch"])
        except ValueError as exc:
            raise UsageError(f"--arch: {exc}") from None
    return cfg


def ensure_out(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"--out: cannot create {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"--out: {path} is not writable")
    return path


def load_data(name, root, seed, n_samples=200):
    if name in data_mod.TOY:
        return data_mod.TOY[name](n=n_samples, seed=tr.derive_seed(seed, "data"))
    if name in data_mod.BENCHMARKS:
        return data_mod.load_benchmark(name, root)
    if os.path.exists(name):
        return data_mod.load_dataset(name)
    choices = sorted(data_mod.TOY) + sorted(data_mod.BENCHMARKS)
    raise UsageError(f"--dataset: unknown dataset {name!r}; choose from {choices} or a cache file")


# --------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = resolve(args, TRAIN_DEFAULTS)
    out = ensure_out(args.out)
    classification = cfg["objective"].endswith("classification")
    ds = load_data(cfg["dataset"], cfg["data_root"], cfg["seed"], cfg["n_samples"])
    ds = data_mod.split(ds, cfg["val_fraction"], tr.derive_seed(cfg["seed"], "split"))
    arch = cfg["arch"]
    if arch[0] != ds.n_features:
        raise UsageError(f"--arch: input width {arch[0]} but dataset has {ds.n_features} features")
    if arch[-1] != ds.n_targets:
        raise UsageError(f"--arch: output width {arch[-1]} but dataset has {ds.n_targets} targets")
    try:
        net = nw.init_network(
            arch, r_count=cfg["r_count"], seed=tr.derive_seed(cfg["seed"], "init"),
            target_init=cfg["target_init"], sharing=cfg["sharing"], classifier=classification,
        )
        config = tr.TrainConfig(
            lr0=cfg["lr0"], lr_min=cfg["lr_min"], patience=cfg["patience"],
            batch_size=cfg["batch_size"], max_iters=cfg["max_iters"], seed=cfg["seed"],
            mode=cfg["mode"], objective=cfg["objective"], eval_every=cfg["eval_every"],
            penalty=(0.1, 1e-3) if cfg["penalty"] else None,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = tr.train(net, ds, config)
    nw.save_checkpoint(os.path.join(out, "checkpoint.npz"), result.net, result.posterior,
                       {"config": cfg})
    tr.write_history(os.path.join(out, "history.csv"), result.history)
    summary = {
        "best_val_loss": result.best_val_loss,
        "best_iteration": result.best_iteration,
        "stop_reason": result.stop_reason,
        "iterations": result.iterations,
    }
    write_manifest(out, "train", cfg, {"result": summary})
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args):
    try:
        net, posterior, meta = nw.load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise DatasetMissing(args.checkpoint) from None
    cfg = dict(TRAIN_DEFAULTS)
    cfg.update(meta.get("config", {}))
    if args.dataset:
        cfg["dataset"] = args.dataset
    mode = args.mode or cfg["mode"]
    ds = load_data(cfg["dataset"], args.data_root or cfg["data_root"], cfg["seed"], cfg["n_samples"])
    ds = data_mod.split(ds, cfg["val_fraction"], tr.derive_seed(cfg["seed"], "split"))
    config = tr.TrainConfig(mode=mode, objective=cfg["objective"])
    report = {}
    for name in ("train", "val", "test"):
        x, t = ds.subset(name)
        if len(x) == 0:
            continue
        with torch.no_grad():
            xt, tt = torch.as_tensor(x), torch.as_tensor(t)
            report[name] = {
                "loss": float(tr.data_loss(net, posterior, xt, tt, config)),
                "error": tr.predict_error(net, posterior, xt, tt, config),
                "n": int(len(x)),
            }
    print(json.dumps(report, indent=2))
    if args.out:
        ensure_out(args.out)
        with open(os.path.join(args.out, "eval.json"), "w") as fh:
            json.dump(report, fh, indent=2)
    return EXIT_OK


def _check_kernels(args, seed):
    reports = vf.kernel_oracle_suite(args.cases or 100, args.draws or vf.DEFAULT_DRAWS, seed)
    lines, ok = [], True
    for kind in ("psi", "omega", "lambda"):
        rs = [r for r in reports if r.name == kind]
        passed = sum(r.n_passed for r in rs)
        total = sum(r.n_entries for r in rs)
        good = passed >= 0.99 * total
        ok &= good
        lines.append(f"{kind}: {passed}/{total} entries within 3 stderr, "
                     f"{sum(r.passed for r in rs)}/{len(rs)} cases fully")
    return ok, lines


def _check_layers(args, seed):
    ok, lines = True, []
    try:
        groups = vf.layer_oracle_suite(args.cases or 20, args.draws or vf.DEFAULT_DRAWS, seed)
    except GPNError as exc:
        return False, [f"layer propagation raised {type(exc).__name__}: {exc}"]
    for kind in ("ml", "vb"):
        rs = [r for _, k, g in groups if k == kind for r in g]
        passed = sum(r.n_passed for r in rs)
        total = sum(r.n_entries for r in rs)
        good = passed >= 0.95 * total
        ok &= good
        cases = sum(all(r.passed for r in g) for _, k, g in groups if k == kind)
        lines.append(f"{kind}: {passed}/{total} entries within 3 stderr, {cases} cases fully")
    return ok, lines


def _check_gradients(args, seed):
    rows = vf.gradient_suite(seed)
    lines = [f"{r['objective']}/{r['mode']}: worst rel error {r['report'].worst_rel_error:.2e} "
             f"over {r['report'].n_checked} components" for r in rows]
    return all(r["report"].passed for r in rows), lines


def _check_clt(args, seed):
    trials = vf.clt_trials((3, 10), 20, seed)
    wins = sum(t.ks[10] < t.ks[3] for t in trials)
    return wins >= 15, [f"KS(10) < KS(3) in {wins}/20 trials"]


def _check_activation_fit(args, seed):
    rows = {(r["function"], r["r_count"]): r for r in vf.activation_fit_experiment()}
    conds = {
        "tanh R=8 max-abs <= 0.05": rows[("tanh", 8)]["max_abs"] <= 0.05,
        "relu R=5 worse than R=8": rows[("relu", 5)]["max_abs"] > rows[("relu", 8)]["max_abs"],
    }
    lines = [f"{k}: {'ok' if v else 'FAIL'}" for k, v in conds.items()]
    # reported, not gated: a zero-mean SE fit bends back toward 0 near the interval ends
    lines.append(f"identity R=8 max-abs {rows[('identity', 8)]['max_abs']:.2e} (informational)")
    return all(conds.values()), lines


def _check_unscented(args, seed):
    rng = np.random.default_rng(seed)
    reports = [vf.unscented_mc_case(rng, args.draws or vf.DEFAULT_DRAWS, tr.derive_seed(seed, f"ut{i}"))
               for i in range(20)]
    passed = sum(r.passed for r in reports)
    return passed == 20, [f"unscented loss within 3 stderr of sampling in {passed}/20 cases"]


CHECKS = {
    "kernels": _check_kernels,
    "layers": _check_layers,
    "gradients": _check_gradients,
    "clt": _check_clt,
    "activation-fit": _check_activation_fit,
    "unscented": _check_unscented,
}


def cmd_verify(args):
    selected = args.only or list(VERIFY_CHECKS)
    for name in selected:
        if name not in CHECKS:
            raise UsageError(f"--only: unknown check {name!r}; choose from {sorted(CHECKS)}")
    flips = args.flip_sign or []
    failed = []
    results = {}
    with kernels.flipped_exponent_sign(*flips):
        for name in selected:
            ok, lines = CHECKS[name](args, tr.derive_seed(args.seed, name))
            results[name] = {"passed": ok, "details": lines}
            print(f"[{'PASS' if ok else 'FAIL'}] {name}")
            for line in lines:
                print(f"    {line}")
            if not ok:
                failed.append(name)
    if args.out:
        ensure_out(args.out)
        with open(os.path.join(args.out, "verify.json"), "w") as fh:
            json.dump(results, fh, indent=2)
        write_manifest(args.out, "verify", {"seed": args.seed, "only": selected, "flip_sign": flips})
    if failed:
        print("failing checks: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


BENCH_COLUMNS = ("dataset", "arch", "variant", "seed", "train_error", "val_error", "test_error",
                 "iterations", "ms_per_iter", "peak_mem_mb")


def cmd_bench(args):
    if args.dataset not in data_mod.BENCHMARKS:
        raise UsageError(f"--dataset: unknown dataset {args.dataset!r}; choose from {sorted(data_mod.BENCHMARKS)}")
    for v in args.variant:
        if v not in vf.VARIANTS:
            raise UsageError(f"--variant: unknown variant {v!r}; choose from {sorted(vf.VARIANTS)}")
    out = ensure_out(args.out)
    ds = data_mod.load_benchmark(args.dataset, args.data_root)
    overrides = {"max_iters": args.max_iters} if args.max_iters else {}
    export_dir = os.path.join(out, "activations") if args.export_activations else None
    path = os.path.join(out, f"bench_{args.dataset}.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS + ("stderr",), extrasaction="ignore")
        writer.writeheader()
        for variant in args.variant:
            rows = vf.benchmark_run(args.dataset, args.arch, variant, args.seeds, dataset=ds,
                                    config_overrides=overrides, base_seed=args.seed,
                                    export_dir=export_dir)
            for row in rows:
                writer.writerow(row)
            summary = {"dataset": args.dataset, "arch": rows[0]["arch"], "variant": variant, "seed": "mean"}
            for key in ("train_error", "val_error", "test_error", "iterations", "ms_per_iter"):
                summary[key], se = vf.summarize(rows, key)
                if key == "test_error":
                    summary["stderr"] = se
            summary["peak_mem_mb"] = max(r["peak_mem_mb"] for r in rows)
            writer.writerow(summary)
            print(f"{variant}: test error {summary['test_error']:.4f} +- {summary['stderr']:.4f}")
    write_manifest(out, "bench", {"dataset": args.dataset, "arch": args.arch, "variant": args.variant,
                                  "seeds": args.seeds, "seed": args.seed})
    return EXIT_OK


def cmd_clt(args):
    widths = args.widths
    trials = vf.clt_trials(widths, args.trials, args.seed, args.draws)
    rows = [{"trial": i, **{f"ks_w{w}": t.ks[w] for w in widths}} for i, t in enumerate(trials)]
    _emit_csv(rows, args.out, "clt.csv")
    return EXIT_OK


def cmd_fit_activation(args):
    rows = vf.activation_fit_experiment(args.r_counts, args.functions)
    _emit_csv(rows, args.out, "activation_fit.csv")
    return EXIT_OK


def cmd_export_activations(args):
    try:
        net, posterior, _ = nw.load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise DatasetMissing(args.checkpoint) from None
    ensure_out(args.out)
    paths = vf.export_activations(net, args.out, posterior)
    print(f"wrote {len(paths)} activation files to {args.out}")
    return EXIT_OK


def _emit_csv(rows, out_dir, name):
    if out_dir:
        ensure_out(out_dir)
        fh = open(os.path.join(out_dir, name), "w", newline="")
    else:
        fh = sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="gpn", description="Gaussian process neuron networks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--config", help="JSON or key=value file, or a previous manifest.json")
    t.add_argument("--seed", type=int)
    t.add_argument("--dataset")
    t.add_argument("--data-root", dest="data_root")
    t.add_argument("--arch", type=arch_type, help="layer sizes such as 16x30x15x26")
    t.add_argument("--mode", choices=[m.value for m in nw.Mode])
    t.add_argument("--objective", choices=tr.OBJECTIVES)
    t.add_argument("--sharing", choices=("none", "layer"))
    t.add_argument("--target-init", dest="target_init", choices=("random", "identity", "tanh", "prior"))
    t.add_argument("--r-count", dest="r_count", type=int)
    t.add_argument("--lr0", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--max-iters", dest="max_iters", type=int)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--val-fraction", dest="val_fraction", type=float)
    t.add_argument("--n-samples", dest="n_samples", type=int, help="size of toy datasets")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset")
    e.add_argument("--data-root", dest="data_root")
    e.add_argument("--mode", choices=[m.value for m in nw.Mode])
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the Monte-Carlo, gradient and experiment checks")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--only", type=str_list, help=f"comma list from {VERIFY_CHECKS + EXTRA_CHECKS}")
    v.add_argument("--draws", type=int, help="Monte-Carlo draws per case")
    v.add_argument("--cases", type=int, help="random cases for the kernel/layer oracles")
    v.add_argument("--flip-sign", dest="flip_sign", type=str_list,
                   help="debug: corrupt the exponent sign of psi, omega and/or lambda")
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="benchmark variants on a dataset")
    b.add_argument("--dataset", required=True)
    b.add_argument("--data-root", dest="data_root")
    b.add_argument("--arch", type=arch_type, required=True)
    b.add_argument("--variant", type=str_list, default=["mean_variance"])
    b.add_argument("--seeds", type=int, default=5)
    b.add_argument("--seed", type=int, default=0, help="first seed")
    b.add_argument("--max-iters", dest="max_iters", type=int)
    b.add_argument("--export-activations", dest="export_activations", action="store_true",
                   help="write per-unit activation CSVs under OUT/activations")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("clt", help="central limit experiment")
    c.add_argument("--widths", type=int_list, default=[1, 3, 10])
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--draws", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_clt)

    f = sub.add_parser("fit-activation", help="fit standard activation functions")
    f.add_argument("--r-counts", dest="r_counts", type=int_list, default=[5, 8])
    f.add_argument("--functions", type=str_list, default=["tanh", "relu", "identity"])
    f.add_argument("--out")
    f.set_defaults(func=cmd_fit_activation)

    x = sub.add_parser("export-activations", help="write per-unit activation CSVs")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_activations)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gpn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetMissing as exc:
        print(f"gpn {args.command}: missing resource: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (GPNError, ValueError, KeyError) as exc:
        print(f"gpn {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
