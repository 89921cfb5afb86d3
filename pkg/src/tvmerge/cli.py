"""Command-line front door: extract, merge, apply, inspect, diff, eval, workbench.

Reports go to stdout, logs and errors to stderr. Exit codes: 0 success,
1 configuration/schema/validation error, 2 I/O or container-format error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    FormatError,
    IntegrityError,
    TvMergeError,
    UndefinedMetricError,
    ValidationError,
)
from .merge import MergeConfig, merge
from .metrics import bleu, cer
from .task_vector import apply, cosine, extract, load_vector, save_vector, stats
from .tensor_store import load_checkpoint, save_checkpoint, schema_compare
from .workbench import (
    WorkbenchConfig,
    forgetting_csv_lines,
    run_forgetting,
    run_scaling,
    scaling_csv_lines,
    synthesize,
)

log = logging.getLogger("tvmerge")

_EXIT_VALIDATION = 1
_EXIT_IO = 2

_P_HELP = (
    "sparsification parameter, fixed polarity per strategy: for ties it is the "
    "fraction RETAINED (top-p kept, 0 < p <= 1); for dare it is the probability "
    "of DROPPING each entry (0 <= p < 1); ignored by ta and average (default 0.5)"
)


def _parse_alphas(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"cannot parse alphas '{text}': {exc}") from exc


_CONFIG_KEYS = (
    "strategy",
    "alphas",
    "p",
    "seed",
    "trim_scope",
    "allow_missing",
    "normalize_alphas",
)


def _read_config_file(path: str) -> dict:
    """Parse a key=value merge config file; keys match the CLI flags."""
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
            if key not in _CONFIG_KEYS:
                raise ConfigError(
                    f"{path}:{lineno}: unknown key '{key}' "
                    f"(known: {', '.join(_CONFIG_KEYS)})"
                )
            if key == "alphas":
                values[key] = _parse_alphas(value)
            elif key == "p":
                values[key] = float(value)
            elif key == "seed":
                values[key] = int(value)
            elif key in ("allow_missing", "normalize_alphas"):
                lowered = value.lower()
                if lowered not in ("true", "false", "0", "1", "yes", "no"):
                    raise ConfigError(f"{path}:{lineno}: '{key}' must be a boolean")
                values[key] = lowered in ("true", "1", "yes")
            else:
                values[key] = value
    return values


def _build_merge_config(args) -> MergeConfig:
    values: dict = {}
    if args.config:
        values.update(_read_config_file(args.config))
    if args.strategy is not None:
        values["strategy"] = args.strategy
    if args.alphas is not None:
        values["alphas"] = _parse_alphas(args.alphas)
    if args.p is not None:
        values["p"] = args.p
    if args.seed is not None:
        values["seed"] = args.seed
    if args.trim_scope is not None:
        values["trim_scope"] = args.trim_scope
    if args.allow_missing:
        values["allow_missing"] = True
    if args.no_normalize_alphas:
        values["normalize_alphas"] = False
    if "strategy" not in values:
        raise ConfigError("a merge strategy is required (--strategy or config file)")
    return MergeConfig(**values)


def _broadcast_alphas(cfg: MergeConfig, k: int) -> None:
    if cfg.alphas is not None and len(cfg.alphas) == 1 and k > 1:
        cfg.alphas = list(cfg.alphas) * k


def cmd_extract(args) -> int:
    log.info(
        "extract base=%s tuned=%s label=%s out=%s allow_missing=%s",
        args.base,
        args.tuned,
        args.label,
        args.out,
        args.allow_missing,
    )
    base = load_checkpoint(args.base)
    tuned = load_checkpoint(args.tuned)
    tv = extract(base, tuned, args.label, allow_missing=args.allow_missing)
    save_vector(tv, args.out)
    s = stats(tv).global_stats
    print(f"label={tv.label} tensors={len(tv.names())} elements={tv.num_elements()}")
    print(
        f"l2={s.l2_norm:.6g} max_abs={s.max_abs:.6g} zero_fraction={s.zero_fraction:.6f}"
    )
    print(f"wrote {args.out}")
    return 0


def cmd_merge(args) -> int:
    cfg = _build_merge_config(args)
    base = load_checkpoint(args.base)
    vectors = [load_vector(path) for path in args.vectors]
    _broadcast_alphas(cfg, len(vectors))
    log.info(
        "merging %d vector(s) with strategy=%s alphas=%s p=%s seed=%s "
        "trim_scope=%s normalize_alphas=%s allow_missing=%s threads=%d",
        len(vectors),
        cfg.strategy,
        cfg.alphas if cfg.alphas is not None else "equal",
        cfg.p,
        cfg.seed,
        cfg.trim_scope,
        cfg.normalize_alphas,
        cfg.allow_missing,
        args.threads,
    )
    merged, report = merge(base, vectors, cfg, workers=args.threads)
    save_checkpoint(merged, args.out, dtype_policy=args.dtype_policy)
    for line in report.lines():
        print(line)
    print(f"strategy={report.strategy} wall_time_s={report.wall_time_s:.3f}")
    print(f"wrote {args.out}")
    if args.report_json:
        with open(args.report_json, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
            fh.write("\n")
        print(f"wrote {args.report_json}")
    return 0


def cmd_apply(args) -> int:
    log.info(
        "apply base=%s vector=%s scale=%g out=%s allow_missing=%s "
        "allow_fingerprint_mismatch=%s",
        args.base,
        args.vector,
        args.scale,
        args.out,
        args.allow_missing,
        args.allow_fingerprint_mismatch,
    )
    base = load_checkpoint(args.base)
    tv = load_vector(args.vector)
    merged = apply(
        base,
        tv,
        scale=args.scale,
        allow_missing=args.allow_missing,
        allow_fingerprint_mismatch=args.allow_fingerprint_mismatch,
    )
    save_checkpoint(merged, args.out, dtype_policy=args.dtype_policy)
    print(f"applied '{tv.label}' at scale {args.scale:g}")
    print(f"wrote {args.out}")
    return 0


def _describe_file(path: str) -> None:
    ps = load_checkpoint(path)
    kind = "task-vector" if "base_fingerprint" in ps.metadata else "checkpoint"
    print(f"file={path} kind={kind} tensors={len(ps)} elements={ps.num_elements()}")
    for key in ("label", "base_fingerprint", "creator_version"):
        if key in ps.metadata:
            print(f"  {key}={ps.metadata[key]}")
    for name, meta, values in ps.items():
        if values.size:
            l2 = float(np.linalg.norm(values.astype(np.float64)))
            max_abs = float(np.max(np.abs(values)))
            zero_fraction = float(np.count_nonzero(values == 0) / values.size)
        else:
            l2 = max_abs = zero_fraction = 0.0
        shape = "x".join(str(d) for d in meta.shape) or "scalar"
        print(
            f"  tensor={name} shape={shape} dtype={meta.dtype} "
            f"l2={l2:.6g} max_abs={max_abs:.6g} zero_fraction={zero_fraction:.6f}"
        )


def cmd_inspect(args) -> int:
    log.info("inspect paths=%s", ",".join(args.paths))
    for path in args.paths:
        _describe_file(path)
    return 0


def cmd_diff(args) -> int:
    log.info("diff a=%s b=%s", args.a, args.b)
    ps_a = load_checkpoint(args.a)
    ps_b = load_checkpoint(args.b)
    diff = schema_compare(ps_a, ps_b)
    identical = diff.is_empty
    for name in diff.only_in_a:
        print(f"only-in-first: {name}")
    for name in diff.only_in_b:
        print(f"only-in-second: {name}")
    for name in diff.shape_mismatched:
        a_shape = "x".join(str(d) for d in ps_a.meta(name).shape)
        b_shape = "x".join(str(d) for d in ps_b.meta(name).shape)
        print(f"shape-mismatch: {name} {a_shape} vs {b_shape}")
    comparable = [
        n
        for n in ps_a.names()
        if n in ps_b and n not in diff.shape_mismatched
    ]
    for name in comparable:
        delta = np.abs(
            ps_a.values(name).astype(np.float64) - ps_b.values(name).astype(np.float64)
        )
        max_diff = float(delta.max()) if delta.size else 0.0
        if max_diff > 0:
            identical = False
        print(f"tensor={name} max_abs_diff={max_diff:.6g}")
    both_vectors = "base_fingerprint" in ps_a.metadata and "base_fingerprint" in ps_b.metadata
    if both_vectors and not diff.shape_mismatched and not diff.only_in_a and not diff.only_in_b:
        tv_a = load_vector(args.a)
        tv_b = load_vector(args.b)
        try:
            print(f"cosine={cosine(tv_a, tv_b):.6f}")
        except UndefinedMetricError:
            print("cosine=undefined (zero-norm vector)")
    if identical:
        print("no differences")
    return 0


def cmd_eval(args) -> int:
    log.info("eval refs=%s hyps=%s metric=%s", args.refs, args.hyps, args.metric)
    with open(args.refs, "r", encoding="utf-8") as fh:
        refs = fh.read().splitlines()
    with open(args.hyps, "r", encoding="utf-8") as fh:
        hyps = fh.read().splitlines()
    if len(refs) != len(hyps):
        raise ValidationError(
            f"line counts differ: {len(refs)} references vs {len(hyps)} hypotheses"
        )
    pairs = list(zip(refs, hyps))
    if args.metric in ("cer", "both"):
        print(f"cer={cer(pairs):.2f}")
    if args.metric in ("bleu", "both"):
        print(f"bleu={bleu(pairs):.2f}")
    return 0


def cmd_workbench(args) -> int:
    cfg = WorkbenchConfig(
        dim=args.dim,
        k=args.k,
        radius=args.radius,
        strategies=tuple(s.strip().lower() for s in args.strategies.split(",") if s.strip()),
        p=args.p,
        seed=args.seed,
        orthogonal_targets=args.orthogonal_targets,
    )
    log.info(
        "workbench dim=%d k=%d radius=%g p=%g seed=%d strategies=%s",
        cfg.dim,
        cfg.k,
        cfg.radius,
        cfg.p,
        cfg.seed,
        ",".join(cfg.strategies),
    )
    world = synthesize(cfg)
    reports = run_forgetting(cfg, world=world, workers=args.threads)
    rows = run_scaling(cfg, world=world, workers=args.threads)

    print("forgetting (all K vectors merged):")
    header = f"{'strategy':<10} {'p':>5} {'L_gen(base)':>12} {'L_gen(ft max)':>13} {'L_gen(merged)':>13} {'epsilon':>12}"
    print(header)
    for r in reports:
        p = "-" if r.p is None else f"{r.p:g}"
        print(
            f"{r.strategy:<10} {p:>5} {r.general_loss_base:>12.6g} "
            f"{r.general_loss_ft:>13.6g} {r.general_loss_merged:>13.6g} {r.epsilon:>12.6g}"
        )
    print()
    print("scaling (first K vectors merged):")
    print(f"{'K':>3} {'strategy':<10} {'mean_task_loss':>15} {'general_loss':>13} {'epsilon':>12}")
    for r in rows:
        print(
            f"{r.k:>3} {r.strategy:<10} {r.mean_task_loss:>15.6g} "
            f"{r.general_loss:>13.6g} {r.epsilon:>12.6g}"
        )

    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("\n".join(scaling_csv_lines(rows)) + "\n")
        print(f"wrote {args.csv}")
        stem, _ = os.path.splitext(args.csv)
        forgetting_csv = f"{stem}_forgetting.csv"
        with open(forgetting_csv, "w", encoding="utf-8") as fh:
            fh.write("\n".join(forgetting_csv_lines(reports)) + "\n")
        print(f"wrote {forgetting_csv}")
        if not args.no_plot:
            from .plots import plot_forgetting, plot_scaling

            plot_scaling(rows, f"{stem}.png")
            print(f"wrote {stem}.png")
            plot_forgetting(reports, f"{stem}_forgetting.png")
            print(f"wrote {stem}_forgetting.png")

    if args.epsilon_budget is not None:
        worst = max(r.epsilon for r in reports)
        if worst > args.epsilon_budget:
            print(
                f"epsilon budget exceeded: worst {worst:.6g} > budget {args.epsilon_budget:.6g}",
                file=sys.stderr,
            )
            return _EXIT_VALIDATION
        print(f"epsilon budget satisfied: worst {worst:.6g} <= {args.epsilon_budget:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tvmerge",
        description="Extract task vectors from checkpoints and merge them training-free.",
    )
    parser.add_argument("--version", action="version", version=f"tvmerge {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="compute tuned - base and save it as a task vector")
    p.add_argument("base")
    p.add_argument("tuned")
    p.add_argument("--label", required=True, help="capability name stored with the vector")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--allow-missing",
        action="store_true",
        help="tensors missing from the tuned checkpoint get a zero delta",
    )
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("merge", help="fuse one or more task vectors onto a base checkpoint")
    p.add_argument("base")
    p.add_argument("vectors", nargs="+")
    p.add_argument("--strategy", help="ta | ties | dare | average")
    p.add_argument(
        "--alphas",
        help="comma-separated weights, or one value broadcast to all vectors "
        "(default: equal weights summing to 1)",
    )
    p.add_argument("--p", type=float, help=_P_HELP)
    p.add_argument("--seed", type=int, help="required for dare; merges must be reproducible")
    p.add_argument("--trim-scope", choices=("per_tensor", "global"), dest="trim_scope")
    p.add_argument("--no-normalize-alphas", action="store_true")
    p.add_argument("--allow-missing", action="store_true")
    p.add_argument("--config", help="key=value file; explicit flags override it")
    p.add_argument("--out", required=True)
    p.add_argument("--report-json", dest="report_json")
    p.add_argument("--dtype-policy", choices=("preserve", "force_f32"), default="preserve")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("apply", help="add a single scaled task vector to a base checkpoint")
    p.add_argument("base")
    p.add_argument("vector")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--allow-missing", action="store_true")
    p.add_argument("--allow-fingerprint-mismatch", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--dtype-policy", choices=("preserve", "force_f32"), default="preserve")
    p.set_defaults(fn=cmd_apply)

    p = sub.add_parser("inspect", help="print schema and statistics of checkpoint files")
    p.add_argument("paths", nargs="+")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("diff", help="compare two checkpoint files (reporting, not validation)")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(fn=cmd_diff)

    p = sub.add_parser("eval", help="score hypothesis text against references")
    p.add_argument("--refs", required=True, help="UTF-8 references, one segment per line")
    p.add_argument("--hyps", required=True, help="UTF-8 hypotheses, parallel line counts")
    p.add_argument("--metric", choices=("cer", "bleu", "both"), default="both")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser(
        "workbench",
        help="run the analytic forgetting and scaling testbed on quadratic tasks",
    )
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--k", type=int, default=4, help="number of synthetic tasks")
    p.add_argument("--radius", type=float, default=1.0, help="task target spread radius")
    p.add_argument("--strategies", default="average,ta,ties,dare")
    p.add_argument("--p", type=float, default=0.5, help=_P_HELP)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--orthogonal-targets",
        action="store_true",
        dest="orthogonal_targets",
        help="draw task targets as a random orthonormal frame instead of "
        "independent directions (needs k <= dim)",
    )
    p.add_argument("--csv", help="write the scaling table here (figures go alongside)")
    p.add_argument("--no-plot", action="store_true", help="skip figure rendering")
    p.add_argument(
        "--epsilon-budget",
        type=float,
        dest="epsilon_budget",
        help="fail (exit 1) if any strategy's epsilon exceeds this bound",
    )
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_workbench)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except (FormatError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_IO
    except TvMergeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
