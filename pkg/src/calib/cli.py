"""``calib`` command-line front end.

Exit codes: 0 success, 1 invalid data or configuration, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime
import logging
import sys
from pathlib import Path

import numpy as np

from . import decision, metrics, recalib, synth
from .binning import make_scheme
from .config import ConfigError, RunConfig, default_config, load_config, merge
from .dataset import (Dataset, atomic_write_text, csv_text, load_dataset, load_features,
                      load_predictions, predictions_csv, write_features)
from .kernel import GROUP, KernelSpec, apply_pca, fit_pca

log = logging.getLogger("calib")

METHODS = ("lore", "hb", "ts", "ir", "group-hb", "group-ts")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--threads", type=int, help="worker threads (default $CALIB_THREADS or 1)")
    common.add_argument("--bins", type=int, help="number of confidence bins (default 15)")
    common.add_argument("--bin-kind", choices=("equal-width", "equal-mass"))
    common.add_argument("--stamp", action="store_true", default=None,
                        help="add a timestamp line to text reports")
    common.add_argument("-v", "--verbose", action="store_true")

    kern = argparse.ArgumentParser(add_help=False)
    kern.add_argument("--kernel", choices=("laplacian", "gaussian", "group"))
    kern.add_argument("--gamma", type=float, help="kernel bandwidth")
    kern.add_argument("--pca", type=int, help="reduce features to this many PCA components")
    kern.add_argument("--features-format", choices=("csv", "raw-f32"))

    p = argparse.ArgumentParser(prog="calib", description="Local calibration metrics and recalibration.")
    sub = p.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    s = sub.add_parser("metrics", parents=[common, kern], help="global and local calibration report")
    s.add_argument("--preds")
    s.add_argument("--features")
    s.add_argument("--out", help="report path (default stdout)")
    s.add_argument("--lce-csv", help="per-record LCE output")

    s = sub.add_parser("sweep", parents=[common, kern], help="MLCE across bandwidths")
    s.add_argument("--preds")
    s.add_argument("--features")
    s.add_argument("--gammas", help="comma-separated bandwidths")
    s.add_argument("--out", help="CSV path (default stdout)")

    s = sub.add_parser("recalibrate", parents=[common, kern], help="fit and apply a recalibrator")
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--recal", help="recalibration predictions")
    s.add_argument("--eval", help="predictions to recalibrate")
    s.add_argument("--recal-features")
    s.add_argument("--eval-features")
    s.add_argument("--out", help="recalibrated predictions CSV")
    s.add_argument("--save-state", help="write the fitted recalibrator here")
    s.add_argument("--flags-out", help="CSV of per-record fallback flags")

    s = sub.add_parser("fairness", parents=[common, kern], help="group-wise MCE report")
    s.add_argument("--preds")
    s.add_argument("--features")
    s.add_argument("--out")

    s = sub.add_parser("decision", parents=[common], help="abstention cost sweep and PRR")
    s.add_argument("--preds")
    s.add_argument("--recal-preds")
    s.add_argument("--u", type=float, help="cost of answering unsure (default 1)")
    s.add_argument("--ratios", help="comma-separated w/u ratios")
    s.add_argument("--out", help="sweep CSV path (default stdout)")

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic prediction log")
    s.add_argument("--n", type=int)
    s.add_argument("--d", type=int)
    s.add_argument("--clusters", type=int)
    s.add_argument("--bias", type=float)
    s.add_argument("--scale", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-preds")
    s.add_argument("--out-feats")
    s.add_argument("--out-truth")

    s = sub.add_parser("landscape", parents=[common, kern], help="per-record LCE over a 2-D embedding")
    s.add_argument("--preds")
    s.add_argument("--features")
    s.add_argument("--embed", help="2-column feature CSV used for plotting coordinates")
    s.add_argument("--out")
    return p


# --------------------------------------------------------------------------
# helpers


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _kernel_spec(cfg: RunConfig, gamma: float | None = None) -> KernelSpec:
    g = cfg.gamma if gamma is None else gamma
    if cfg.kernel == GROUP:
        return KernelSpec(GROUP, 1.0 if g is None else g)
    if g is None:
        raise UsageError("--gamma is required for feature-space kernels")
    return KernelSpec(cfg.kernel, g)


def _load(cfg: RunConfig, preds: str, features: str | None, need_features: bool) -> Dataset:
    if need_features and features is None:
        raise UsageError("--features is required for this kernel")
    ds = load_dataset(preds, features, cfg.features_format)
    if ds.features is not None and cfg.pca is not None:
        ds = ds.with_features(apply_pca(fit_pca(ds.features, cfg.pca), ds.features))
    return ds


def _config_lines(cfg: RunConfig, keys) -> list[str]:
    lines = []
    for k in keys:
        v = getattr(cfg, k)
        if v is not None:
            lines.append(f"{k} = {v}")
    return lines


def _report(title: str, cfg: RunConfig, cfg_keys, items) -> str:
    lines = [f"# calib {title}"]
    if cfg.stamp:
        lines.append(f"# generated {datetime.datetime.now(datetime.timezone.utc).isoformat()}")
    lines.append("[config]")
    lines += _config_lines(cfg, cfg_keys)
    lines.append("[results]")
    for k, v in items:
        lines.append(f"{k} = {repr(float(v)) if isinstance(v, (float, np.floating)) else v}")
    return "\n".join(lines) + "\n"


def _emit(text: str, path: str | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(path, text)


# --------------------------------------------------------------------------
# subcommands

KERNEL_KEYS = ("kernel", "gamma", "pca", "bins", "bin_kind")


def cmd_metrics(cfg: RunConfig) -> None:
    _require(cfg, "preds")
    spec = _kernel_spec(cfg)
    ds = _load(cfg, cfg.preds, cfg.features, spec.family != GROUP)
    scheme = make_scheme(cfg.bin_kind, cfg.bins, ds.conf)
    summary = metrics.global_summary(ds, scheme)
    rep = metrics.mlce(ds, spec, scheme, threads=cfg.threads)
    items = list(summary.items()) + [
        ("kernel_d", rep.kernel.d), ("mlce", rep.max), ("mean_lce", rep.mean)]
    _emit(_report("metrics report", cfg, ("preds", "features") + KERNEL_KEYS, items), cfg.out)
    if cfg.lce_csv:
        rows = ((ds.ids[i], float(rep.values[i]), float(rep.signed[i])) for i in range(ds.n))
        atomic_write_text(cfg.lce_csv, csv_text(("id", "lce", "slce"), rows))


def cmd_sweep(cfg: RunConfig) -> None:
    _require(cfg, "preds", "gammas")
    gammas = _floats(cfg.gammas)
    if not gammas:
        raise UsageError("--gammas needs at least one value")
    ds = _load(cfg, cfg.preds, cfg.features, cfg.kernel != GROUP)
    scheme = make_scheme(cfg.bin_kind, cfg.bins, ds.conf)
    rows = []
    for g in gammas:
        rep = metrics.mlce(ds, _kernel_spec(cfg, g), scheme, threads=cfg.threads)
        rows.append((float(g), rep.max, rep.mean))
    _emit(csv_text(("gamma", "mlce", "mean_lce"), rows), cfg.out)


def _fit(cfg: RunConfig, recal: Dataset, scheme):
    m = cfg.method
    if m == "lore":
        gamma = cfg.gamma
        if gamma is None and cfg.kernel != GROUP:
            gamma = 0.4 if cfg.pca is not None else 0.2
            log.info("LoRe bandwidth defaulted to %g", gamma)
        spec = KernelSpec(cfg.kernel, 1.0 if gamma is None else gamma)
        return recalib.fit_lore(recal, spec, scheme, pca_dim=cfg.pca)
    if m == "hb":
        return recalib.fit_hb(recal, scheme)
    if m == "ts":
        return recalib.fit_ts(recal)
    if m == "ir":
        return recalib.fit_ir(recal)
    if m in ("group-hb", "group-ts"):
        return recalib.fit_groupwise(m.split("-", 1)[1], recal, scheme)
    raise UsageError(f"unknown method {m!r}")


def cmd_recalibrate(cfg: RunConfig) -> None:
    _require(cfg, "method", "recal", "eval", "out")
    lore_feats = cfg.method == "lore" and cfg.kernel != GROUP
    if lore_feats and (cfg.recal_features is None or cfg.eval_features is None):
        raise UsageError("LoRe with a feature kernel needs --recal-features and --eval-features")
    recal = load_dataset(cfg.recal, cfg.recal_features if lore_feats else None, cfg.features_format)
    ev = load_dataset(cfg.eval, cfg.eval_features if lore_feats else None, cfg.features_format)
    scheme = make_scheme(cfg.bin_kind, cfg.bins, recal.conf)
    state = _fit(cfg, recal, scheme)
    out, flags = recalib.recalibrate_dataset(state, ev, threads=cfg.threads)
    atomic_write_text(cfg.out, predictions_csv(out))
    if cfg.save_state:
        recalib.save_recalibrator(state, cfg.save_state)
    if cfg.flags_out:
        atomic_write_text(cfg.flags_out,
                          csv_text(("id", "fallback"), ((ev.ids[i], int(flags[i])) for i in range(ev.n))))
    sys.stdout.write(f"method = {cfg.method}\nrecords = {ev.n}\nfallback = {int(flags.sum())}\n")


def cmd_fairness(cfg: RunConfig) -> None:
    _require(cfg, "preds")
    want_local = cfg.kernel == GROUP or (cfg.features is not None and cfg.gamma is not None)
    ds = _load(cfg, cfg.preds, cfg.features if want_local else None, False)
    scheme = make_scheme(cfg.bin_kind, cfg.bins, ds.conf)
    per_group, worst = metrics.group_mce(ds, scheme)
    items = [("group_mce." + g, v) for g, v in per_group.items()]
    items += [("max_group_mce", worst), ("ece", metrics.ece(ds, scheme)), ("mce", metrics.mce(ds, scheme))]
    if want_local:
        rep = metrics.mlce(ds, _kernel_spec(cfg), scheme, threads=cfg.threads)
        items += [("mlce", rep.max), ("mean_lce", rep.mean)]
    _emit(_report("fairness report", cfg, ("preds", "features") + KERNEL_KEYS, items), cfg.out)


def cmd_decision(cfg: RunConfig) -> None:
    _require(cfg, "preds")
    ratios = _floats(cfg.ratios)
    orig = load_predictions(cfg.preds)
    rec = load_predictions(cfg.recal_preds) if cfg.recal_preds else None
    if rec is not None:
        rows = decision.cost_sweep(orig, rec, ratios, u=cfg.u)
        text = csv_text(("ratio", "cost_orig", "cost_recal", "improvement"), rows)
    else:
        rows = [(float(r), decision.run_policy(orig, decision.CostSpec(cfg.u, r * cfg.u)).total_cost)
                for r in ratios]
        text = csv_text(("ratio", "cost"), rows)
    _emit(text, cfg.out)
    # costs are positive; improvement > 0 means the recalibrated model is cheaper
    for name, ds in (("orig", orig), ("recal", rec)):
        if ds is None:
            continue
        try:
            val = repr(decision.prr(ds))
        except ValueError as exc:
            val = f"undefined ({exc})"
        sys.stderr.write(f"prr.{name} = {val}\n")


def cmd_synth(cfg: RunConfig) -> None:
    _require(cfg, "out_preds")
    spec = synth.SynthSpec(n=cfg.n, d=cfg.d, c=cfg.clusters, seed=cfg.seed,
                           bias=cfg.bias, scale=cfg.scale)
    ds, truth = synth.generate(spec)
    atomic_write_text(cfg.out_preds, predictions_csv(ds))
    if cfg.out_feats:
        write_features(ds.ids, ds.features, cfg.out_feats)
    if cfg.out_truth:
        rows = ((ds.ids[i], int(truth.cluster[i]), float(truth.p_star[i]), float(truth.bias[i]))
                for i in range(ds.n))
        atomic_write_text(cfg.out_truth, csv_text(("id", "cluster", "p_star", "bias"), rows))


def cmd_landscape(cfg: RunConfig) -> None:
    _require(cfg, "preds", "embed")
    spec = _kernel_spec(cfg)
    ds = _load(cfg, cfg.preds, cfg.features, spec.family != GROUP)
    embed = load_features(cfg.embed, "csv", ids=ds.ids)
    scheme = make_scheme(cfg.bin_kind, cfg.bins, ds.conf)
    rows = metrics.lce_landscape(ds, spec, scheme, embed, threads=cfg.threads)
    _emit(csv_text(("id", "ex", "ey", "conf", "bin", "lce", "slce"), rows), cfg.out)


COMMANDS = {
    "metrics": cmd_metrics,
    "sweep": cmd_sweep,
    "recalibrate": cmd_recalibrate,
    "fairness": cmd_fairness,
    "decision": cmd_decision,
    "synth": cmd_synth,
    "landscape": cmd_landscape,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        sys.stderr.write("calib: error: a subcommand is required\n")
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config) if args.config else default_config()
        overrides = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
        cfg = merge(cfg, overrides)
        if cfg.threads < 1:
            raise UsageError("--threads must be >= 1")
        COMMANDS[cfg.subcommand](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"calib: error: {exc}\n")
        return 2
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        sys.stderr.write(f"calib: error: {exc}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
