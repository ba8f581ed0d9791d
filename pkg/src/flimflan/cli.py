"""``flimflan`` command line: synthesize, compress, train, infer, quantize, evaluate.

Every subcommand reads its inputs fully (checking magic and version) before
doing any work and writes outputs atomically. Defaults can come from a
``key=value`` config file (``--config``); explicit flags win.

Exit codes: 0 ok, 2 usage, 3 data format, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines, evaluation
from .binning import LogBinSpec, compress_counts
from .decay import DatasetSpec, DecayParams, InstrumentConfig, gen_dataset
from .formats import (DatasetFile, FormatError, atomic_write, dataset_to_text, encode_params, load_model,
                      read_dataset, save_model, write_dataset)
from .network import ARCHITECTURES, build_flan, forward_batch, forward_fixed_batch
from .quantize import QFormat, SaturationError, quantize_model
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("flimflan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _csv_ints(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def _qformat(text: str) -> QFormat:
    try:
        return QFormat.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return lo, hi


def read_config(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment. Dashes in keys become underscores."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _num(v) -> str:
    """Shortest round-tripping decimal for a scalar."""
    return repr(float(v))


def _load_dataset(path) -> DatasetFile:
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    return read_dataset(path)


def _load_model(path):
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    return load_model(path)


def cmd_synth(args) -> str:
    spec = DatasetSpec(args.size, seed=args.seed, mono_fraction=args.mono_fraction,
                       peak_counts=args.peak_counts, background=args.background)
    ds = DatasetFile.from_records(gen_dataset(spec, InstrumentConfig()))
    write_dataset(args.out, ds)
    if args.text:
        atomic_write(args.text, dataset_to_text(ds))
    return f"synth: wrote {len(ds)} records x {ds.num_bins} bins to {args.out}"


def cmd_compress(args) -> str:
    ds = _load_dataset(args.data)
    if ds.bin_edges is not None:
        raise DataError(f"{args.data} is already compressed")
    if ds.num_bins != args.bins_in:
        raise DataError(f"{args.data} has {ds.num_bins} bins, --bins-in says {args.bins_in}")
    spec = LogBinSpec(args.bins_in, args.bins_out)
    out = DatasetFile(compress_counts(ds.counts, spec.edges), ds.labels, ds.components, ds.bin_width, spec.edges)
    write_dataset(args.out, out)
    return f"compress: {len(out)} records {args.bins_in} -> {args.bins_out} bins (r={spec.ratio:.6f}) to {args.out}"


def _training_arrays(ds: DatasetFile, variant: str, name: str):
    need = ARCHITECTURES[variant]["input_length"]
    if ds.num_bins != need:
        raise DataError(f"{name} set has {ds.num_bins} bins; variant {variant} expects {need}")
    return ds.counts, ds.labels


def cmd_train(args) -> str:
    tr = _training_arrays(_load_dataset(args.train), args.variant, "training")
    va = _training_arrays(_load_dataset(args.val), args.variant, "validation")
    cfg = TrainConfig(initial_lr=args.lr, batch_size=args.batch_size, patience=args.patience,
                      max_epochs=args.epochs, seed=args.seed)
    model = build_flan(args.variant, seed=args.seed, gate=args.gate)

    def progress(epoch, report):
        log.info("epoch %d train %.5f val %.5f", epoch, report.train_loss[-1], report.val_loss[-1])

    best, report = train(model, tr, va, cfg, callback=progress)
    save_model(args.out, best)
    atomic_write(args.log or f"{args.out}.loss.csv", report.as_csv())
    atomic_write(args.report or f"{args.out}.report.txt", report.as_table() + "\n")
    return (f"train: {args.variant} best epoch {report.best_epoch}/{report.stopping_epoch}, val MSE "
            f"tau_a={report.val_mse[0]:.4f} tau_i={report.val_mse[1]:.4f} ns^2 -> {args.out}")


def _check_bins(model, ds: DatasetFile, data_path):
    if ds.num_bins != model.input_length:
        raise DataError(f"{data_path} has {ds.num_bins} bins but the model expects {model.input_length}")


def cmd_infer(args) -> str:
    model = _load_model(args.model)
    ds = _load_dataset(args.data)
    _check_bins(model, ds, args.data)
    if args.mode == "fixed" and model.quantized is None:
        raise UsageError(f"{args.model} has no quantized plane; run `quantize` first")
    run = forward_fixed_batch if args.mode == "fixed" else forward_batch
    pred = evaluation.run_chunked(lambda c: run(model, c, gate=args.gate), ds.counts, args.workers)
    rows = ["index,tau_a,tau_i,gt_tau_a,gt_tau_i"]
    rows += [f"{i},{_num(p[0])},{_num(p[1])},{_num(g[0])},{_num(g[1])}" for i, (p, g) in enumerate(zip(pred, ds.labels))]
    atomic_write(args.out, "\n".join(rows) + "\n")
    err = (pred - ds.labels) ** 2
    return (f"infer: {len(pred)} pixels ({args.mode}) RMSE tau_a={np.sqrt(err[:, 0].mean()):.4f} "
            f"tau_i={np.sqrt(err[:, 1].mean()):.4f} ns -> {args.out}")


def cmd_quantize(args) -> str:
    model = _load_model(args.model)
    q = quantize_model(model, args.fm, args.params, max_saturation=args.max_saturation)
    save_model(args.out, q)
    st = q.quantized.stats
    return f"quantize: {args.params} params / {args.fm} features, {st.saturated}/{st.total} saturated -> {args.out}"


def cmd_export_params(args) -> str:
    model = _load_model(args.model)
    if model.quantized is None:
        raise UsageError(f"{args.model} has no quantized plane; run `quantize` first")
    blob = encode_params(model)
    atomic_write(args.out, blob)
    return f"export-params: {len(model.layers())} layers, {len(blob)} bytes -> {args.out}"


def _baseline_rows(method: str, counts: np.ndarray, cfg: InstrumentConfig, order: int, init):
    if method == "cmm":
        header = "index,tau_a,tau_i,status"
    elif method == "phasor":
        header = "index,tau_a,tau_i,g,s,status"
    else:
        header = "index,tau_a,tau_i,residual_norm,iterations,converged,status"

    def one(i, c):
        try:
            if method == "cmm":
                t = baselines.cmm_estimate(c, cfg)
                return f"{i},{_num(t)},{_num(t)},ok"
            if method == "phasor":
                p = baselines.phasor_transform(c, cfg, calibrate_irf=True)
                try:
                    t = baselines.phasor_lifetime(p, cfg)
                except ValueError:
                    return f"{i},,,{_num(p.g)},{_num(p.s)},phase_undefined"
                return f"{i},{_num(t)},{_num(t)},{_num(p.g)},{_num(p.s)},ok"
            fit = baselines.nlsf_fit(c, cfg, order, init)
            ta, ti = fit.lifetimes
            return f"{i},{_num(ta)},{_num(ti)},{_num(fit.residual_norm)},{fit.iterations},{int(fit.converged)},ok"
        except baselines.InsufficientPhotons:
            return f"{i}," + "," * (header.count(",") - 2) + "insufficient_photons"

    return header, one


def cmd_baseline(args) -> str:
    ds = _load_dataset(args.data)
    if ds.bin_edges is not None:
        raise DataError("classical baselines need uniform-bin histograms, not compressed data")
    cfg = InstrumentConfig(num_bins=ds.num_bins)
    init = None
    if args.tau_init:
        taus = args.tau_init
        if len(taus) != args.order:
            raise UsageError("--tau-init needs one lifetime per model component")
        init = (DecayParams.mono(taus[0], float(ds.counts.max())) if args.order == 1
                else DecayParams.bi(0.5, taus[0], taus[1], float(ds.counts.max())))
    header, one = _baseline_rows(args.method, ds.counts, cfg, args.order, init)
    if args.workers > 1:
        with ThreadPoolExecutor(args.workers) as pool:
            rows = list(pool.map(one, range(len(ds)), ds.counts))
    else:
        rows = [one(i, c) for i, c in enumerate(ds.counts)]
    atomic_write(args.out, "\n".join([header] + rows) + "\n")
    failed = sum(r.endswith(("insufficient_photons", "phase_undefined")) for r in rows)
    return f"baseline: {args.method} on {len(rows)} records ({failed} without estimate) -> {args.out}"


def cmd_eval(args) -> str:
    models = {"flan": args.model_flan, "flan-ls": args.model_flan_ls}
    for name in args.methods:
        if name in models and models[name] is None:
            raise UsageError(f"method {name} needs --model-{name}")
    loaded = {n: _load_model(p) for n, p in models.items() if n in args.methods}
    for name, m in loaded.items():
        if m.input_length != ARCHITECTURES[name]["input_length"]:
            raise DataError(f"--model-{name} expects {m.input_length} bins, not a {name} model")
    cfg = InstrumentConfig()
    spec = evaluation.GtImageSpec(args.size, args.size, regime=args.regime)
    image = evaluation.gen_gt_image(spec, args.seed, cfg)
    factories = {"cmm": lambda: evaluation.cmm_method(cfg), "phasor": lambda: evaluation.phasor_method(cfg),
                 "nlsf": lambda: evaluation.nlsf_method(cfg)}
    methods = {}
    for name in args.methods:
        if name in loaded:
            methods[name] = evaluation.model_method(loaded[name], args.mode)
        else:
            methods[name] = factories[name]()
    results = evaluation.evaluate_image(image, methods, workers=args.workers)
    atomic_write(args.out, evaluation.report_csv(results))
    atomic_write(args.plot or f"{args.out}.plot.txt", evaluation.distribution_text(results))
    best = min(results, key=lambda r: r.mse[0] + r.mse[1])
    return f"eval: {len(results)} methods on {args.size}x{args.size} {args.regime} image; lowest MSE {best.method} -> {args.out}"


def cmd_bench(args) -> str:
    model = _load_model(args.model)
    if args.mode == "fixed" and model.quantized is None:
        raise UsageError(f"{args.model} has no quantized plane; run `quantize` first")
    if args.data:
        ds = _load_dataset(args.data)
        if ds.bin_edges is not None or ds.num_bins != InstrumentConfig().num_bins:
            raise DataError("bench expects raw 256-bin histograms (compression is part of the timed path)")
        counts = ds.counts
    else:
        spec = DatasetSpec(args.size, seed=args.seed, peak_counts=(1000.0, 5000.0))
        counts = DatasetFile.from_records(gen_dataset(spec)).counts
    rows = evaluation.bench(evaluation.model_method(model, args.mode), counts, args.batch_sizes,
                            args.repetitions, workers=args.workers)
    atomic_write(args.out, evaluation.bench_csv(rows, model.variant))
    top = max(rows, key=lambda r: r.throughput)
    return f"bench: {model.variant} peak {top.throughput:.1f} px/ms at batch {top.batch_size} -> {args.out}"


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file supplying defaults for any flag")
    common.add_argument("--seed", type=int, default=0, help="global RNG seed (default 0)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="thread count for per-pixel work (default: available cores)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="flimflan", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", parents=[common], help="generate a labelled synthetic dataset")
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mono-fraction", type=float, default=0.5)
    s.add_argument("--peak-counts", type=_range, default=(10.0, 5000.0), metavar="LO,HI")
    s.add_argument("--background", type=float, default=0.0, help="mean background counts per bin")
    s.add_argument("--text", help="also write a plain-text export")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("compress", parents=[common], help="merge bins onto a geometric grid")
    s.add_argument("--data", required=True)
    s.add_argument("--bins-in", type=int, default=256)
    s.add_argument("--bins-out", type=int, default=80)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("train", parents=[common], help="train a lifetime network")
    s.add_argument("--variant", choices=sorted(ARCHITECTURES), required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--epochs", type=int, default=500)
    s.add_argument("--patience", type=int, default=20)
    s.add_argument("--batch-size", type=int, default=128)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--gate", type=float, default=0.0, help="photon-count gate stored in the model")
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="loss CSV (default OUT.loss.csv)")
    s.add_argument("--report", help="text report (default OUT.report.txt)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="run a model over a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("float", "fixed"), default="float")
    s.add_argument("--gate", type=float, default=None, help="override the model's photon gate")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("quantize", parents=[common], help="attach a fixed-point parameter plane")
    s.add_argument("--model", required=True)
    s.add_argument("--fm", type=_qformat, default=QFormat(16, 16), metavar="QI.F", help="feature maps (Q16.16)")
    s.add_argument("--params", type=_qformat, default=QFormat(10, 10), metavar="QI.F", help="parameters (Q10.10)")
    s.add_argument("--max-saturation", type=float, default=0.01)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("export-params", parents=[common], help="write the quantized plane as FLNP")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_params)

    s = sub.add_parser("baseline", parents=[common], help="classical per-pixel estimators")
    s.add_argument("--method", choices=("cmm", "phasor", "nlsf"), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--order", type=int, choices=(1, 2), default=2, help="NLSF exponential count")
    s.add_argument("--tau-init", type=lambda t: [float(v) for v in t.split(",")], metavar="T1[,T2]")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("eval", parents=[common], help="score methods on a ground-truth lifetime image")
    s.add_argument("--gt-image", action="store_true", help="use the bi-exponential ramp image (the only protocol)")
    s.add_argument("--regime", choices=tuple(evaluation.REGIMES), default="high")
    s.add_argument("--methods", type=lambda t: [m.strip() for m in t.split(",") if m.strip()],
                   default=["cmm", "phasor", "nlsf"])
    s.add_argument("--size", type=int, default=256, help="image side length in pixels")
    s.add_argument("--model-flan")
    s.add_argument("--model-flan-ls")
    s.add_argument("--mode", choices=("float", "fixed"), default="float")
    s.add_argument("--out", required=True)
    s.add_argument("--plot", help="lifetime distribution series (default OUT.plot.txt)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="time a model at several batch sizes")
    s.add_argument("--model", required=True)
    s.add_argument("--data", help="raw histograms to time on (default: synthesized)")
    s.add_argument("--size", type=int, default=1024, help="synthesized pixel count")
    s.add_argument("--batch-sizes", type=_csv_ints, default=[1, 4, 32, 128])
    s.add_argument("--repetitions", type=int, default=5)
    s.add_argument("--mode", choices=("float", "fixed"), default="float")
    s.add_argument("--out", default="bench.csv")
    s.set_defaults(func=cmd_bench)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config = pre.parse_known_args(argv)[0].config
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if not config or command is None:
        return parser.parse_args(argv)
    values = read_config(config)
    known = {a.dest: a for a in choices[command]._actions}
    extra = []
    for key, val in values.items():
        if key not in known or key in ("config", "help"):
            raise UsageError(f"{config}: unknown key {key!r} for {command}")
        opt = known[key].option_strings[-1]
        if isinstance(known[key], argparse._StoreTrueAction):
            if val.lower() in ("1", "true", "yes"):
                extra.append(opt)
        else:
            extra += [opt, val]
    # config first so explicit flags override it
    at = argv.index(command) + 1
    return parser.parse_args(argv[:at] + extra + argv[at:])


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError) as exc:
        print(f"flimflan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.workers < 1:
        print("flimflan: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        summary = args.func(args)
    except UsageError as exc:
        print(f"flimflan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError) as exc:
        print(f"flimflan {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, SaturationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"flimflan {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"flimflan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
