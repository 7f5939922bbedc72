"""Command line: ``sdpg train | eval | verify | plot``.

Exit status is 0 on success, 1 when a verification or evaluation check
fails, and 2 for bad input (unreadable or invalid config, checkpoint,
CSV). A non-finite loss during training exits with status 3.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .errors import ContractViolation, NonFiniteError, UnsupportedError
from .trainer import METRICS_FIELDS, Trainer, check_env_compat, evaluate_policy, load_policy

EXIT_FAIL = 1
EXIT_INPUT = 2
EXIT_NONFINITE = 3


def _err(msg: str) -> None:
    print(f"sdpg: error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out_dir"] = args.out
        if args.workers is not None:
            overrides["workers"] = args.workers
        if args.epochs is not None:
            overrides["epochs"] = args.epochs
        cfg = cfg.replace(**overrides)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_INPUT

    trainer = Trainer(cfg)
    out = Path(cfg.out_dir)
    report_every = max(1, cfg.epochs // 10) if cfg.epochs else 1

    def progress(tr, row):
        if not args.quiet and (row["epoch"] % report_every == 0 or row["epoch"] == cfg.epochs):
            print(
                f"epoch {row['epoch']:5d}  nominal_return {row['mean_nominal_return']:9.3f}  "
                f"delta {row['mean_delta']:.3f}  critic_loss {row['critic_loss']:.4g}",
                flush=True,
            )

    try:
        trainer.fit(out, callback=progress)
    except NonFiniteError as exc:
        _err(f"aborted at epoch {trainer.epoch + 1}: {exc}")
        return EXIT_NONFINITE
    if not args.quiet:
        print(f"wrote {out / 'metrics.csv'} and {out / 'final.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    try:
        policy = load_policy(args.ckpt)
        check_env_compat(policy.cfg, args.env)
    except (OSError, ValueError, KeyError) as exc:
        _err(f"{args.ckpt}: {exc}")
        return EXIT_INPUT
    cfg = policy.cfg
    try:
        res = evaluate_policy(
            policy.mean_action, args.env, cfg.obs_mode, args.episodes, args.seed, cfg.gamma,
            cfg.preact_clip, cfg.proprio,
        )
    except (ContractViolation, UnsupportedError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "eval.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "return", "undiscounted_return", "success", "oracle_return"])
        for i in range(len(res.returns)):
            oracle = "" if res.oracle_returns is None else repr(float(res.oracle_returns[i]))
            w.writerow([i, repr(float(res.returns[i])), repr(float(res.undiscounted[i])),
                        int(res.success[i]), oracle])
    print(f"env {args.env}  episodes {args.episodes}  seed {args.seed}")
    print(f"mean_return {res.mean_return:.6f}  std_return {res.std_return:.6f}  "
          f"success_rate {res.success_rate:.3f}")
    if res.oracle_ratio is not None:
        print(f"lqr_oracle_ratio {res.oracle_ratio:.4f}")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    from .oracle import run_verification

    report = run_verification(args.seed)
    print(report.table())
    path = report.write_csv(args.out)
    print(f"wrote {path}")
    return 0 if report.passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


class CsvFormatError(ValueError):
    pass


def read_curve(path, y_field: str = "mean_nominal_return"):
    """``(epochs, values)`` from a metrics.csv; raises :class:`CsvFormatError` naming the bad row."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise CsvFormatError(f"{path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CsvFormatError(f"{path}: empty file (no header row)")
        for col in ("epoch", y_field):
            if col not in header:
                raise CsvFormatError(f"{path}: header lacks column {col!r}")
        ie, iy = header.index("epoch"), header.index(y_field)
        xs, ys = [], []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{path}: row {rowno} has {len(row)} fields, expected {len(header)}")
            try:
                x, y = float(row[ie]), float(row[iy])
            except ValueError:
                raise CsvFormatError(f"{path}: row {rowno} holds a non-numeric epoch or return") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise CsvFormatError(f"{path}: row {rowno} holds a non-finite value")
            xs.append(x)
            ys.append(y)
    return xs, ys


def plot_curves(paths, out, y_field: str = "mean_nominal_return") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = [(Path(p), *read_curve(p, y_field)) for p in paths]
    plt.rcParams["svg.hashsalt"] = "sdpg"
    fig, ax = plt.subplots(figsize=(6, 4))
    styles = ["-", "--", ":", "-."]
    for k, (p, xs, ys) in enumerate(curves):
        if xs:
            ax.plot(xs, ys, linestyle=styles[k % len(styles)], color=f"C{k % 10}", label=p.parent.name + "/" + p.name)
    ax.set_xlabel("epoch")
    ax.set_ylabel(y_field.replace("_", " "))
    if any(xs for _, xs, _ in curves):
        ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out


def cmd_plot(args) -> int:
    try:
        out = plot_curves(args.csv, args.out, args.y)
    except CsvFormatError as exc:
        _err(str(exc))
        return EXIT_INPUT
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdpg", description="Stochastic decoupled policy gradient at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop from a config file")
    t.add_argument("--config", required=True, help="INI-style config file")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.add_argument("--out", default=None, help="output directory (overrides out_dir)")
    t.add_argument("--workers", type=int, default=None, help="threads for env stepping and gradients")
    t.add_argument("--epochs", type=int, default=None, help="override the epoch count")
    t.add_argument("--quiet", action="store_true", help="suppress progress lines")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint's mean policy")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--env", required=True)
    e.add_argument("--episodes", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None, help="eval.csv path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the numerical oracle suite")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default="verify_report.csv")
    v.set_defaults(func=cmd_verify)

    pl = sub.add_parser("plot", help="plot learning curves from metrics.csv files")
    pl.add_argument("csv", nargs="+")
    pl.add_argument("--out", required=True)
    pl.add_argument("--y", default="mean_nominal_return", choices=METRICS_FIELDS[2:-1])
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
