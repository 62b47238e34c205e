"""Command-line entry point.

Every subcommand writes its outputs plus ``<output>.manifest.json`` holding the
full argument set, package version, git revision and seeds. Feeding a manifest
back through ``--config`` replays the run. Relative output paths resolve
against ``--outdir``, which the ``VIDIFF_OUTPUT_DIR`` environment variable
overrides.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from vidiff import __version__, diffusion as df, metrics, models, plotting
from vidiff import rng as _rng, schedule, training, unroll
from vidiff.errors import ConfigError, VidiffError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("vidiff")
OUTPUT_ENV = "VIDIFF_OUTPUT_DIR"


# --------------------------------------------------------------------------
# Helpers


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _git_revision():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _outdir(args):
    return Path(os.environ.get(OUTPUT_ENV) or args.outdir or ".")


def _out_path(args, name):
    p = Path(name)
    if not p.is_absolute():
        p = _outdir(args) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _in_path(name):
    p = Path(name)
    if not p.exists():
        raise ConfigError(f"file not found: {name}")
    return p


def _write_manifest(args, primary: Path, seeds, extra=None):
    doc = {
        "command": args.command,
        "args": {k: v for k, v in vars(args).items()
                 if k not in ("command", "func", "config") and v is not None},
        "version": __version__,
        "git": _git_revision(),
        "rng": _rng.ALGORITHM,
        "seeds": seeds,
    }
    if extra:
        doc.update(extra)
    path = Path(f"{primary}.manifest.json")
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def _load_model(path):
    return models.load_model(_in_path(path))


def _grid(args):
    if getattr(args, "grid", None):
        return schedule.TimeGrid.from_dict(json.loads(_in_path(args.grid).read_text()))
    if args.kappa is None or args.n0 is None or args.n is None:
        raise ConfigError("give --grid or all of --kappa, --n0, --n")
    return schedule.two_phase_grid(float(args.kappa), int(args.n0), int(args.n))


def _theta(args, model):
    if getattr(args, "theta", None) is None:
        return None
    theta = np.array(_floats(args.theta))
    if not isinstance(model, models.BlockIsingModel) or theta.size != model.m:
        raise ConfigError("--theta needs a block model with matching latent length")
    return theta


def _truncation_for(model, kind):
    if kind == "sparse":
        return lambda t: unroll.TruncationSpec.sparse(model, t)
    if kind == "ising":
        return lambda t: unroll.TruncationSpec.ising(model.dim, t)
    return None


def make_oracle(model, choice, conditional=False):
    """Parse ``exact | vi | unrolled:w.json | trained:w.json``."""
    kind, _, ref = choice.partition(":")
    if kind == "exact":
        return df.exact_oracle(model, conditional)
    if kind == "vi":
        return df.vi_oracle(model, conditional=conditional)
    if kind == "unrolled":
        head = _weights_header(ref)
        return df.unrolled_oracle(model, int(head["L"]), float(head["zeta"]),
                                  k=head.get("k"), conditional=conditional)
    if kind == "trained":
        nets = unroll.load_weights(_in_path(ref))
        nets = nets if isinstance(nets, list) else [nets]
        return df.network_oracle(nets, "trained", _truncation_for(model, nets[0].header.get("truncation")))
    raise ConfigError(f"unknown score choice {choice!r}")


def _weights_header(ref):
    doc = json.loads(_in_path(ref).read_text())
    if "nets" in doc:
        doc = doc["nets"][0]
    head = doc["header"]
    if "L" not in head or "zeta" not in head:
        raise ConfigError(f"{ref} lacks L/zeta in its header")
    return head


# --------------------------------------------------------------------------
# Subcommands


def cmd_gen_model(args):
    seed = args.seed
    if args.type == "ising":
        model = models.IsingModel(models.random_coupling(args.d, args.norm, seed))
    elif args.type == "sk":
        model = models.IsingModel(models.sk_coupling(args.d, args.beta, seed))
    elif args.type == "block":
        a = models.random_coupling(args.d + args.m, args.norm, seed)
        d = args.d
        model = models.BlockIsingModel(a[:d, :d], a[:d, d:], a[d:, d:])
    else:
        gen = _rng.stream(seed, 0)
        dictionary = gen.standard_normal((args.d, args.m)) / math.sqrt(args.d)
        pairs = [p.split(":") for p in args.prior.split(",")]
        atoms = np.array([float(a) for a, _ in pairs])
        probs = np.array([float(p) for _, p in pairs])
        model = models.SparseCodingModel(dictionary, atoms, probs / probs.sum(), args.tau)
    out = _out_path(args, args.out)
    models.save_model(model, out)
    _write_manifest(args, out, {"model": seed})
    print(f"wrote {out}")


def cmd_schedule(args):
    grid = _grid(args)
    print(f"kappa={grid.kappa!r} n0={grid.n0} n={grid.n} T={grid.T!r} delta={grid.delta!r}")
    print("k,t_k,gamma_k")
    for k, t in enumerate(grid.times):
        gap = repr(grid.gaps[k]) if k < grid.n else ""
        print(f"{k},{t!r},{gap}")
    if args.out:
        out = _out_path(args, args.out)
        out.write_text(grid.to_json())
        if not args.no_plot:
            plotting.time_grid(grid, out.with_suffix(".svg"))
        _write_manifest(args, out, {})


def cmd_sample(args):
    model = _load_model(args.model)
    theta = _theta(args, model)
    oracle = make_oracle(model, args.score, conditional=theta is not None)
    grid = _grid(args)
    y = df.ddpm_sample(oracle, grid, args.chains, args.seed, theta=theta, workers=args.workers)
    out = _out_path(args, args.out)
    is_spin = not isinstance(model, models.SparseCodingModel)
    df.write_samples_csv(out, y, rounded=is_spin,
                         meta={"score": oracle.provenance, "grid": grid.to_dict(), "seed": args.seed})
    if not args.no_plot:
        plotting.sample_marginals(y, out.with_suffix(".svg"))
    _write_manifest(args, out, {"sampler": args.seed})
    print(f"wrote {out} ({args.chains} chains, d={oracle.d})")


def _parse_dims(text, d):
    parts = []
    for p in text.split(","):
        p = p.strip()
        parts.append(int(p[:-1] or 1) * d if p.endswith("d") else int(p))
    if len(parts) != 3:
        raise ConfigError("--dims expects D,L,M (D may be written as a multiple of d, e.g. 3d)")
    return tuple(parts)


def cmd_train(args):
    model = _load_model(args.model)
    if isinstance(model, models.BlockIsingModel):
        raise ConfigError("train supports ising and sparse_coding models")
    dims = _parse_dims(args.dims, model.dim)
    config = training.TrainConfig(lr=args.lr, steps=args.steps, batch=args.batch, bound=args.B,
                                  truncate=not args.no_truncate, seed=args.seed,
                                  init_scale=args.init_scale)
    x, _ = metrics.draw_clean(model, args.n_data, args.seed)
    data = training.make_batch(x, args.seed)
    kind = "sparse" if isinstance(model, models.SparseCodingModel) else "ising"
    if args.t:
        times = _floats(args.t)
    else:
        times = list(_grid(args).reverse_times)
    nets, traces = [], []
    for t in times:
        spec = _truncation_for(model, kind)(t) if config.truncate else None
        res = training.train_score(data, t, dims, config, spec=spec)
        w = res.weights
        w.header["truncation"] = kind if config.truncate else None
        nets.append(w)
        traces.append((t, res))
    out = _out_path(args, args.out)
    if len(nets) == 1:
        unroll.save_weights(nets[0], out)
    else:
        unroll.save_weight_bundle(nets, out)
    if args.trace:
        tpath = _out_path(args, args.trace)
        with open(tpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "step", "loss"])
            for t, res in traces:
                for i, v in enumerate(res.losses):
                    w.writerow([repr(t), i, repr(float(v))])
        if not args.no_plot:
            plotting.loss_trace(traces[0][1].losses, tpath.with_suffix(".svg"))
    _write_manifest(args, out, {"data": args.seed, "init": args.seed},
                    {"grad_check": [r.grad_check_error for _, r in traces]})
    for t, res in traces:
        if res.losses:
            print(f"t={t!r} loss {res.losses[0]:.6g} -> {res.losses[-1]:.6g}")


def cmd_unroll(args):
    model = _load_model(args.model)
    conditional = bool(args.conditional)
    k = args.k
    w = df.build_unrolled(model, args.t, args.L, args.zeta, k=k, conditional=conditional)
    w.header.update({"L": args.L, "zeta": args.zeta, "k": k})
    out = _out_path(args, args.out)
    unroll.save_weights(w, out)
    norm = unroll.weight_norm(w)
    _write_manifest(args, out, {}, {"weight_norm": norm})
    print(f"wrote {out}: D={w.D} M={w.M} L={w.L} |||W|||={norm:.6g} B={w.header['B']:.6g}")


def cmd_eval(args):
    model = _load_model(args.model)
    report = metrics.EvalReport(metadata={
        "model": args.model, "t": args.t, "seed": args.seed,
        "candidate": args.candidate, "reference": args.reference})
    if args.candidate and args.reference:
        cand = make_oracle(model, args.candidate)
        ref = make_oracle(model, args.reference)
        report.score_mse_per_dim, report.score_mse_stderr = metrics.score_mse(
            cand, ref, model, args.t, args.n_mc, args.seed)
    if args.samples:
        y = df.read_samples_csv(_in_path(args.samples))
        report.n_samples = int(y.shape[0])
        mean, cov = metrics.moments(y)
        report.mean, report.covariance = mean.tolist(), cov.tolist()
        if isinstance(model, models.IsingModel):
            if args.delta is None:
                raise ConfigError("--delta is required to compare spin samples")
            p = metrics.rounded_noised_distribution(model, args.delta)
            report.kl = metrics.discrete_kl(p, y, args.pseudo_count)
            report.tv = metrics.tv(p, y)
            report.pseudo_count = args.pseudo_count
            report.metadata["rounding"] = "sign, reporting convention"
        elif isinstance(model, models.SparseCodingModel):
            if args.delta is None:
                raise ConfigError("--delta is required to compare samples")
            x = models.sparse_sample(model, min(len(y), 4000), args.seed)
            ref = df.forward_noise(x, args.delta, args.seed + 1)
            report.energy_distance = metrics.energy_distance(y, ref)
    report.check()
    out = _out_path(args, args.out)
    report.write_json(out)
    report.write_csv(out.with_suffix(".csv"))
    if not args.no_plot and report.score_mse_per_dim is not None:
        plotting.score_errors([args.candidate], [report.score_mse_per_dim], out.with_suffix(".svg"))
    _write_manifest(args, out, {"eval": args.seed})
    print(json.dumps({k: v for k, v in report.to_dict().items()
                      if v is not None and not isinstance(v, (list, dict))}))


def cmd_sweep(args):
    model = _load_model(args.model)
    if not isinstance(model, models.IsingModel):
        raise ConfigError("sweep compares rounded spin samples and needs an ising model")
    oracle = make_oracle(model, args.score)
    rows = []
    for kappa in _floats(args.kappa):
        grid = schedule.two_phase_for_delta(kappa, args.T, args.delta)
        p = metrics.rounded_noised_distribution(model, grid.delta)
        kls, tvs = [], []
        for s in range(args.seeds):
            y = df.ddpm_sample(oracle, grid, args.chains, args.seed + s, workers=args.workers)
            kls.append(metrics.discrete_kl(p, y, args.pseudo_count))
            tvs.append(metrics.tv(p, y))
        q25, med, q75 = np.percentile(kls, [25, 50, 75])
        rows.append({"kappa": kappa, "n0": grid.n0, "n": grid.n, "T": grid.T, "delta": grid.delta,
                     "median_kl": float(med), "q25_kl": float(q25), "q75_kl": float(q75),
                     "median_tv": float(np.median(tvs)), "seeds": args.seeds,
                     "chains": args.chains})
    out = _out_path(args, args.out)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    if not args.no_plot:
        plotting.kl_sweep([r["kappa"] for r in rows], [r["median_kl"] for r in rows],
                          [r["q25_kl"] for r in rows], [r["q75_kl"] for r in rows],
                          out.with_suffix(".svg"))
    by_kappa = sorted(rows, key=lambda r: -r["kappa"])
    monotone = all(b["median_kl"] <= a["median_kl"] for a, b in zip(by_kappa, by_kappa[1:]))
    _write_manifest(args, out, {"first": args.seed, "count": args.seeds},
                    {"monotone_median_kl": monotone})
    for r in rows:
        print(f"kappa={r['kappa']} median_kl={r['median_kl']:.4g}")
    print(f"monotone median KL: {monotone}")


# --------------------------------------------------------------------------
# Parser


def build_parser():
    p = argparse.ArgumentParser(prog="vidiff", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="TOML config or a run manifest (JSON) to replay")
    p.add_argument("--outdir", default=None, help=f"output directory (env {OUTPUT_ENV} overrides)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    def add(name, func, help_):
        s = sub.add_parser(name, help=help_)
        s.set_defaults(func=func)
        return s

    def grid_flags(s):
        s.add_argument("--grid", help="grid JSON written by `schedule --out`")
        s.add_argument("--kappa", type=float)
        s.add_argument("--n0", type=int)
        s.add_argument("--n", type=int)

    s = add("gen-model", cmd_gen_model, "write a random model as JSON")
    s.add_argument("--type", choices=["ising", "sk", "block", "sparse"], default="ising")
    s.add_argument("--d", type=int, default=4)
    s.add_argument("--m", type=int, default=2)
    s.add_argument("--norm", type=float, default=0.3, help="operator norm of the coupling")
    s.add_argument("--beta", type=float, default=0.2)
    s.add_argument("--tau", type=float, default=0.3)
    s.add_argument("--prior", default="-1:0.5,1:0.5", help="atom:prob pairs")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", default="model.json")

    s = add("schedule", cmd_schedule, "print a two-phase time grid")
    grid_flags(s)
    s.add_argument("--out")
    s.add_argument("--no-plot", action="store_true")

    s = add("sample", cmd_sample, "run the reverse sampler")
    s.add_argument("--model", required=True)
    s.add_argument("--score", default="exact", help="exact | vi | unrolled:w.json | trained:w.json")
    grid_flags(s)
    s.add_argument("--chains", type=int, default=1000)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--theta", help="comma-separated conditioning vector (block models)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", default="samples.csv")
    s.add_argument("--no-plot", action="store_true")

    s = add("train", cmd_train, "fit a ResNet score by empirical risk minimization")
    s.add_argument("--model", required=True)
    s.add_argument("--t", help="time or comma-separated times; default: every sampler time of the grid")
    grid_flags(s)
    s.add_argument("--dims", default="3d,4,32", help="D,L,M")
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--batch", type=int)
    s.add_argument("--B", type=float, default=50.0)
    s.add_argument("--n-data", type=int, default=20000)
    s.add_argument("--init-scale", type=float, default=1.0)
    s.add_argument("--no-truncate", action="store_true")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", default="weights.json")
    s.add_argument("--trace")
    s.add_argument("--no-plot", action="store_true")

    s = add("unroll", cmd_unroll, "write unrolled ResNet weights")
    s.add_argument("--model", required=True)
    s.add_argument("--t", type=float, required=True)
    s.add_argument("--L", type=int, default=8)
    s.add_argument("--zeta", type=float, default=0.05)
    s.add_argument("--k", type=float, help="scalar Onsager coefficient (K = k I)")
    s.add_argument("--conditional", action="store_true")
    s.add_argument("--out", default="unrolled.json")

    s = add("eval", cmd_eval, "score error and sample quality")
    s.add_argument("--model", required=True)
    s.add_argument("--candidate")
    s.add_argument("--reference", default="exact")
    s.add_argument("--t", type=float, default=0.5)
    s.add_argument("--n-mc", type=int, default=10000)
    s.add_argument("--samples")
    s.add_argument("--delta", type=float)
    s.add_argument("--pseudo-count", type=float, default=metrics.DEFAULT_PSEUDO_COUNT)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", default="report.json")
    s.add_argument("--no-plot", action="store_true")

    s = add("sweep", cmd_sweep, "median rounded KL across step sizes")
    s.add_argument("--model", required=True)
    s.add_argument("--score", default="exact")
    s.add_argument("--kappa", default="0.2,0.1,0.05")
    s.add_argument("--T", type=float, default=5.0)
    s.add_argument("--delta", type=float, default=0.05)
    s.add_argument("--chains", type=int, default=100000)
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--pseudo-count", type=float, default=metrics.DEFAULT_PSEUDO_COUNT)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", default="sweep.csv")
    s.add_argument("--no-plot", action="store_true")
    return p


def _config_argv(path, argv):
    """Prepend arguments stored in a TOML config or a run manifest."""
    p = _in_path(path)
    if p.suffix == ".json":
        doc = json.loads(p.read_text())
        command, values = doc.get("command"), doc.get("args", {})
    else:
        with open(p, "rb") as fh:
            doc = tomllib.load(fh)
        command = doc.get("command")
        values = {k: v for k, v in doc.items() if not isinstance(v, dict) and k != "command"}
        values.update(doc.get(command, {}) if command else {})
    if not command:
        raise ConfigError(f"{path} does not name a command")
    head, tail = [], []
    for key, val in values.items():
        flag = "--" + key.replace("_", "-") if key not in ("B", "L", "T") else "--" + key
        target = head if key in ("outdir", "verbose") else tail
        if isinstance(val, bool):
            if val:
                target.append(flag)
        else:
            target += [flag, ",".join(map(str, val)) if isinstance(val, list) else str(val)]
    extra_head, extra_tail = [], []
    it = iter(argv)
    for a in it:
        if a == "--outdir":
            extra_head += [a, next(it, "")]
        elif a.startswith("--outdir=") or a in ("-v", "--verbose"):
            extra_head.append(a)
        else:
            extra_tail.append(a)
    return head + extra_head + [command] + tail + extra_tail


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if "--config" in argv:
            i = argv.index("--config")
            path = argv[i + 1] if i + 1 < len(argv) else None
            if path is None:
                raise ConfigError("--config needs a path")
            argv = _config_argv(path, argv[:i] + argv[i + 2:])
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            parser.print_help()
            return 2
        args.func(args)
        return 0
    except VidiffError as exc:
        print(f"error: {exc.code}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    except (OSError, ValueError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
