"""Command-line pipeline: gen-data, train, search, evolve, ablate, report.

Exit codes: 0 success, 1 search produced no feasible design, 2 usage or
configuration error (including a failed oracle-usage audit).
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import dataset as ds_mod
from .contexts import ContextVector, builtin_library, load_contexts, resolve
from .design_space import DesignSpace, DesignSpaceError, default_space, load_space
from .oracle import Oracle, OracleError, OracleSpec, QueryLedger, ledger_csv
from .search import (
    SearchConfigError,
    SearchReport,
    SearchSpec,
    evolutionary_baseline,
    optimize,
    optimize_zero_shot,
    write_summary,
)
from .surrogate import SurrogateArchitecture
from .trainer import (
    Checkpoint,
    CheckpointError,
    HyperGrid,
    TrainConfig,
    TrainingError,
    load_checkpoint,
    save_checkpoint,
    select_model,
    train,
    train_contextual,
)

OUT_ENV = "ACCELOPT_OUT"

ARCH_PRESETS = {
    "large": SurrogateArchitecture(),
    "desk": SurrogateArchitecture(embed_dim=16, head_hidden=32, mixing_hidden=(64, 64)),
}

# Default (alpha, beta) for the full variant when no grid search is requested.
FULL_ALPHA, FULL_BETA = 0.01, 0.01


class UsageError(Exception):
    pass


class AuditError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _rows_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


def _space(args) -> DesignSpace:
    return load_space(args.space) if args.space else default_space()


def _oracle_spec(args) -> OracleSpec:
    return OracleSpec.load(args.oracle) if args.oracle else OracleSpec()


def _library(args) -> dict[str, ContextVector]:
    return load_contexts(args.contexts) if args.contexts else builtin_library()


def _apps(text: str | None, library: Mapping[str, ContextVector]) -> list[ContextVector]:
    names = [a for a in (text or "").split(",") if a]
    if not names:
        raise UsageError("--apps needs at least one application id")
    return resolve(names, library)


def _arch(args) -> SurrogateArchitecture:
    arch = ARCH_PRESETS[args.arch]
    over = {}
    if args.embed_dim is not None:
        over["embed_dim"] = args.embed_dim
    if args.layers is not None:
        over["attention_layers"] = args.layers
    if args.heads is not None:
        over["prediction_heads"] = args.heads
    if args.head_hidden is not None:
        over["head_hidden"] = args.head_hidden
    if args.mixing_hidden is not None:
        over["mixing_hidden"] = tuple(int(h) for h in args.mixing_hidden.split(",") if h)
    return replace(arch, **over)


def _train_config(args, alpha: float, beta: float, seed: int) -> TrainConfig:
    return TrainConfig(alpha=alpha, beta=beta, lr=args.lr, total_gradient_steps=args.steps,
                       checkpoint_interval=args.checkpoint_interval,
                       miner_refresh_period=args.refresh_period, rng_seed=seed)


def _audit(ledger: QueryLedger, allowed: Mapping[str, int]) -> None:
    """Fail unless the ledger shows exactly the expected count in each allowed phase."""
    counts = ledger.counts()
    extra = {p: n for p, n in counts.items() if p not in allowed and n}
    if extra:
        raise AuditError(f"oracle queried outside permitted phases: {extra}")
    for phase, expected in allowed.items():
        if counts.get(phase, 0) != expected:
            raise AuditError(f"phase {phase!r}: {counts.get(phase, 0)} queries, expected {expected}")


def _print_ledger(ledger: QueryLedger) -> None:
    counts = ledger.counts()
    body = ", ".join(f"{p}={n}" for p, n in sorted(counts.items())) or "none"
    print(f"oracle queries: {body} (total {ledger.total})")


def _load_split(args, space, library):
    data = ds_mod.load(args.dataset, space, library)
    if args.apps:
        keep = set(args.apps.split(","))
        unknown = keep - set(data.apps)
        if unknown:
            raise UsageError(f"apps not in dataset: {sorted(unknown)}")
        data = ds_mod.OfflineDataset(
            tuple(d for d in data.feasible if d.app_id in keep),
            tuple(r for r in data.infeasible if r[1] in keep),
            {a: c for a, c in data.apps.items() if a in keep})
    sub = ds_mod.select_training_subset(data, args.max_feasible)
    return ds_mod.split_validation(sub), sub


def _fit(split, space, arch, cfg, library, contextual: bool):
    if contextual:
        return train_contextual(split, space, arch, cfg, library)
    return train(split, space, arch, cfg)


def _tag(alpha: float, beta: float) -> str:
    return "Standard" if alpha == 0 and beta == 0 else f"a{alpha:g}_b{beta:g}"


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    space, spec, library = _space(args), _oracle_spec(args), _library(args)
    contexts = _apps(args.apps, library)
    out = Path(args.out) if args.out else _out_root() / "dataset.csv"
    _ensure_dir(out.parent)
    ledger = QueryLedger(spec.query_cost_seconds)
    data = ds_mod.generate(space, spec, contexts, args.n_samples, args.seed, ledger)
    _audit(ledger, {"gen_data": args.n_samples * len(contexts)})
    ds_mod.save(data, space, out)
    _atomic_text(out.with_name(out.name + ".ledger.csv"), ledger_csv(ledger))
    for app, (f, i) in data.counts().items():
        print(f"{app}: feasible={f} infeasible={i} fraction={f / (f + i):.3f}")
    _print_ledger(ledger)
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    space, library = _space(args), _library(args)
    split, _ = _load_split(args, space, library)
    contextual = args.contextual or len(split.app_ids()) > 1
    arch = _arch(args)
    out_dir = _ensure_dir(Path(args.out_dir) if args.out_dir else _out_root() / "train")
    if args.grid:
        cells = HyperGrid().cells()
    else:
        cells = [(args.alpha, args.beta)]
    ledger = QueryLedger()  # training builds no oracle; the audit confirms nothing was recorded
    candidates: list[tuple[Checkpoint, str]] = []
    for alpha, beta in cells:
        cfg = _train_config(args, alpha, beta, args.seed)
        run = _fit(split, space, arch, cfg, library, contextual)
        run_dir = _ensure_dir(out_dir / _tag(alpha, beta))
        run.write_log(run_dir / "log.csv")
        for ck in run.checkpoints:
            path = run_dir / f"step{ck.gradient_step:07d}.ckpt"
            save_checkpoint(ck, space, path)
            candidates.append((ck, path.relative_to(out_dir).as_posix()))
        print(f"{_tag(alpha, beta)}: {len(run.checkpoints)} checkpoints, "
              f"best tau {max((c.validation_tau for c in run.checkpoints), default=math.nan):.4f}")
    _audit(ledger, {})
    _atomic_text(out_dir / "ledger.csv", ledger_csv(ledger))
    if not candidates:
        raise UsageError("no checkpoints were written; steps must be >= checkpoint interval")
    chosen = select_model([c for c, _ in candidates])
    chosen_path = next(p for c, p in candidates if c is chosen)
    save_checkpoint(chosen, space, out_dir / "selected.ckpt")
    _atomic_text(out_dir / "selection.csv", _rows_csv(
        ["alpha", "beta", "gradient_step", "validation_tau", "checkpoint"],
        [[chosen.alpha, chosen.beta, chosen.gradient_step, chosen.validation_tau, chosen_path]]))
    print(f"selected alpha={chosen.alpha:g} beta={chosen.beta:g} step={chosen.gradient_step} "
          f"tau={chosen.validation_tau:.4f} ({_tag(chosen.alpha, chosen.beta)})")
    _print_ledger(ledger)
    return 0


def _search_seeds(params, space, spec: OracleSpec, contexts, args, ledger, zero_shot_apps=None,
                  dataset_apps=None) -> list[SearchReport]:
    oracle = Oracle(spec, space, ledger)
    reports = []
    for seed in range(args.seed, args.seed + args.seeds):
        sspec = SearchSpec(tuple(contexts), area_constraint=args.area, n_top=args.n_top,
                           iterations=args.iterations, rng_seed=seed)
        if zero_shot_apps is not None:
            reports.append(optimize_zero_shot(params, zero_shot_apps, space, sspec, oracle,
                                              dataset_apps))
        else:
            reports.append(optimize(params, space, sspec, oracle))
    return reports


def cmd_search(args) -> int:
    space, spec, library = _space(args), _oracle_spec(args), _library(args)
    ckpt = load_checkpoint(args.checkpoint, space)
    contexts = _apps(args.apps, library)
    if ckpt.params.arch.context_dim and contexts[0].dim != ckpt.params.arch.context_dim:
        raise UsageError("context dimension does not match the checkpoint")
    dataset_apps = None
    if args.dataset:
        dataset_apps = ds_mod.load(args.dataset, space, library).app_ids()
    out_dir = _ensure_dir(Path(args.out_dir) if args.out_dir else _out_root() / "search")
    ledger = QueryLedger(spec.query_cost_seconds)
    reports = _search_seeds(ckpt.params, space, spec, contexts, args, ledger,
                            ckpt.trained_apps if args.zero_shot else None, dataset_apps)
    _audit(ledger, {"evaluation": sum(len(r.candidates) for r in reports) * len(contexts)})
    for r in reports:
        r.write_csv(out_dir / f"search_seed{r.seed}.csv")
    agg = write_summary(reports, out_dir / "summary.csv")
    _atomic_text(out_dir / "ledger.csv", ledger_csv(ledger))
    for r in reports:
        print(f"seed {r.seed}: best={r.best:.3f} median={r.median:.3f} "
              f"feasible={r.feasible_fraction:.3f} queries={r.queries}"
              + (f" FAILED: {r.failure}" if r.failure else ""))
    print(f"summary: best={agg['best']:.3f} median-of-bests={agg['median']:.3f}")
    _print_ledger(ledger)
    return 1 if any(not r.ok for r in reports) else 0


def cmd_evolve(args) -> int:
    space, spec, library = _space(args), _oracle_spec(args), _library(args)
    (context,) = _apps(args.apps, library)[:1]
    out_dir = _ensure_dir(Path(args.out_dir) if args.out_dir else _out_root() / "evolve")
    ledger = QueryLedger(spec.query_cost_seconds)
    oracle = Oracle(spec, space, ledger)
    reports = []
    for seed in range(args.seed, args.seed + args.seeds):
        sspec = SearchSpec((context,), area_constraint=args.area, n_top=args.n_top, rng_seed=seed)
        r = evolutionary_baseline(space, oracle, context, sspec, args.budget)
        r.write_csv(out_dir / f"evolve_seed{seed}.csv")
        r.write_trace(out_dir / f"trace_seed{seed}.csv", spec.query_cost_seconds)
        reports.append(r)
        print(f"seed {seed}: best={r.best:.3f} queries={r.queries}")
    _audit(ledger, {"evolutionary": args.budget * args.seeds})
    write_summary(reports, out_dir / "summary.csv")
    _atomic_text(out_dir / "ledger.csv", ledger_csv(ledger))
    _print_ledger(ledger)
    return 1 if any(not r.ok for r in reports) else 0


ABLATIONS = {
    "full": lambda a, b: (a, b),
    "-opt": lambda a, b: (0.0, b),
    "-infeasible": lambda a, b: (a, 0.0),
    "standard": lambda a, b: (0.0, 0.0),
}


def cmd_ablate(args) -> int:
    space, spec, library = _space(args), _oracle_spec(args), _library(args)
    which = [w.strip() for w in args.which.split(",") if w.strip()]
    bad = [w for w in which if w not in ABLATIONS]
    if bad or not which:
        raise UsageError(f"--which takes a comma list of {sorted(ABLATIONS)}; got {bad or which}")
    split, _ = _load_split(args, space, library)
    contextual = args.contextual or len(split.app_ids()) > 1
    contexts = [library[a] for a in split.app_ids()]
    arch = _arch(args)
    out_dir = _ensure_dir(Path(args.out_dir) if args.out_dir else _out_root() / "ablate")
    ledger = QueryLedger(spec.query_cost_seconds)
    oracle = Oracle(spec, space, ledger)
    per_seed, evaluated = [], 0
    for seed in range(args.seed, args.seed + args.seeds):
        if args.grid:
            runs = [_fit(split, space, arch, _train_config(args, a, b, seed), library, contextual)
                    for a, b in HyperGrid().cells()]
            sel = select_model([c for r in runs for c in r.checkpoints])
            full_ab = (sel.alpha, sel.beta)
        else:
            full_ab = (args.alpha, args.beta)
        for name in which:
            a, b = ABLATIONS[name](*full_ab)
            run = _fit(split, space, arch, _train_config(args, a, b, seed), library, contextual)
            ck = select_model(run.checkpoints)
            sspec = SearchSpec(tuple(contexts), area_constraint=args.area, n_top=args.n_top,
                               iterations=args.iterations, rng_seed=seed)
            r = optimize(ck.params, space, sspec, oracle)
            evaluated += len(r.candidates) * len(contexts)
            r.write_csv(out_dir / f"{name.lstrip('-')}_seed{seed}.csv")
            per_seed.append([name, seed, a, b, r.best, r.median, r.feasible_fraction,
                             r.overestimation_count, r.queries])
    _audit(ledger, {"evaluation": evaluated})
    header = ["variant", "seed", "alpha", "beta", "best", "median", "feasible_fraction",
              "overestimated", "queries"]
    _atomic_text(out_dir / "ablation_seeds.csv", _rows_csv(header, per_seed))
    table = []
    for name in which:
        rows = [r for r in per_seed if r[0] == name]
        med = lambda i: float(np.nanmedian([r[i] for r in rows])) if rows else math.nan
        table.append([name, med(4), med(5), med(6), med(7)])
    _atomic_text(out_dir / "ablation.csv", _rows_csv(
        ["variant", "best_median", "median_median", "feasible_fraction_median",
         "overestimated_median"], table))
    print(f"{'variant':<12} {'best':>10} {'median':>10} {'feasible':>9} {'overest':>8}")
    for name, b, m, f, o in table:
        print(f"{name:<12} {b:10.3f} {m:10.3f} {f:9.3f} {o:8.1f}")
    _atomic_text(out_dir / "ledger.csv", ledger_csv(ledger))
    _print_ledger(ledger)
    return 0


def _labelled(items: Sequence[str] | None, flag: str) -> list[tuple[str, Path]]:
    out = []
    for item in items or []:
        label, sep, path = item.partition("=")
        if not sep or not label or not path:
            raise UsageError(f"{flag} expects LABEL=PATH, got {item!r}")
        if not Path(path).exists():
            raise UsageError(f"{flag}: missing input {path}")
        out.append((label, Path(path)))
    return out


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    ledgers = _labelled(args.ledger, "--ledger")
    summaries = _labelled(args.summary, "--summary")
    if not ledgers and not summaries:
        raise UsageError("report needs at least one --ledger or --summary input")
    out_dir = _ensure_dir(Path(args.out_dir) if args.out_dir else _out_root() / "report")

    sim_rows, sim_total = [], {}
    for label, path in ledgers:
        for r in _read_csv(path):
            if r["phase"] == "total":
                continue
            sim_rows.append([label, r["phase"], int(r["queries"]), float(r["sim_seconds"])])
            sim_total[label] = sim_total.get(label, 0.0) + float(r["sim_seconds"])
    _atomic_text(out_dir / "sim_time.csv", _rows_csv(
        ["method", "phase", "queries", "sim_seconds"],
        sim_rows + [[label, "total", "", t] for label, t in sim_total.items()]))
    for label, t in sim_total.items():
        print(f"{label}: simulated time {t:.1f} s")
    if args.offline and args.online:
        off, on = sim_total.get(args.offline), sim_total.get(args.online)
        if off is None or on is None:
            raise UsageError("--offline/--online must name labels given with --ledger")
        print(f"offline/online simulated-time ratio: {off / on:.4f}" if on else "online time is 0")

    best_train = math.nan
    if args.dataset:
        space, library = _space(args), _library(args)
        _, sub = _load_split(args, space, library)
        best_train = min(d.latency_ms for d in sub.feasible)
        print(f"best latency in training data: {best_train:.3f}")
    lat_rows = []
    for label, path in summaries:
        agg = next((r for r in _read_csv(path) if r["seed"] == "all"), None)
        if agg is None:
            raise UsageError(f"{path} has no cross-seed summary row")
        best, median = float(agg["best"]), float(agg["median"])
        ratio = best_train / best if best > 0 and not math.isnan(best_train) else math.nan
        lat_rows.append([label, best, median, best_train, ratio])
        print(f"{label}: best={best:.3f} median={median:.3f} improvement={ratio:.4f}")
    _atomic_text(out_dir / "latency.csv", _rows_csv(
        ["method", "best", "median", "best_in_training", "improvement"], lat_rows))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--space", help="design-space file (default: built-in ten-parameter space)")
    common.add_argument("--oracle", help="oracle spec JSON (default: built-in coefficients)")
    common.add_argument("--contexts", help="context library JSON (default: built-in applications)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--arch", choices=sorted(ARCH_PRESETS), default="large")
    model.add_argument("--embed-dim", type=int)
    model.add_argument("--layers", type=int)
    model.add_argument("--heads", type=int)
    model.add_argument("--head-hidden", type=int)
    model.add_argument("--mixing-hidden", help="comma list of hidden widths")
    model.add_argument("--steps", type=int, default=50_000)
    model.add_argument("--checkpoint-interval", type=int, default=2_500)
    model.add_argument("--refresh-period", type=int, default=20_000)
    model.add_argument("--lr", type=float, default=1e-4)
    model.add_argument("--max-feasible", type=int, default=8000,
                       help="worst-k feasible points kept per application")
    model.add_argument("--contextual", action="store_true",
                       help="condition on context vectors even for a single application")

    searchp = argparse.ArgumentParser(add_help=False)
    searchp.add_argument("--area", type=float, default=29.0, help="area budget in mm^2")
    searchp.add_argument("--n-top", type=int, default=256)
    searchp.add_argument("--iterations", type=int, default=1000)
    searchp.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")

    p = argparse.ArgumentParser(prog="accelopt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="sample and label an offline dataset")
    g.add_argument("--apps", default="mobilenet_edge", help="comma list of application ids")
    g.add_argument("--n-samples", type=int, default=10_000, help="samples per application")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help=f"dataset path (default: ${OUT_ENV}/dataset.csv)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common, model], help="train surrogates and select one")
    t.add_argument("--dataset", required=True)
    t.add_argument("--apps", help="restrict to these dataset applications")
    t.add_argument("--grid", action="store_true", help="train the full alpha x beta grid")
    t.add_argument("--alpha", type=float, default=0.0)
    t.add_argument("--beta", type=float, default=0.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out-dir")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("search", parents=[common, searchp], help="optimize a trained surrogate")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--apps", default="mobilenet_edge", help="contexts to optimize for")
    s.add_argument("--zero-shot", action="store_true",
                   help="require the target apps to be absent from the checkpoint's training apps")
    s.add_argument("--dataset", help="training dataset, checked for target-app records")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("evolve", parents=[common, searchp],
                       help="online firefly baseline directly on the oracle")
    e.add_argument("--apps", default="mobilenet_edge")
    e.add_argument("--budget", type=int, required=True, help="oracle queries per seed")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_evolve)

    a = sub.add_parser("ablate", parents=[common, model, searchp],
                       help="train and search loss-term ablations")
    a.add_argument("--dataset", required=True)
    a.add_argument("--apps")
    a.add_argument("--which", default="full,-opt,-infeasible,standard",
                   help="comma list from: full, -opt, -infeasible, standard (use --which=...)")
    a.add_argument("--grid", action="store_true", help="pick the full variant's alpha/beta by grid search")
    a.add_argument("--alpha", type=float, default=FULL_ALPHA)
    a.add_argument("--beta", type=float, default=FULL_BETA)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out-dir")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", parents=[common], help="compare ledgers and search summaries")
    r.add_argument("--ledger", action="append", metavar="LABEL=PATH")
    r.add_argument("--summary", action="append", metavar="LABEL=PATH")
    r.add_argument("--offline", help="ledger label of the offline method")
    r.add_argument("--online", help="ledger label of the online method")
    r.add_argument("--dataset", help="dataset for the best-in-training column")
    r.add_argument("--apps")
    r.add_argument("--max-feasible", type=int, default=8000)
    r.add_argument("--out-dir")
    r.set_defaults(func=cmd_report)
    return p


CONFIG_ERRORS = (UsageError, AuditError, ds_mod.DatasetError, DesignSpaceError, OracleError,
                 CheckpointError, SearchConfigError, KeyError, OSError, ValueError)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CONFIG_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
