"""``gaitscale`` command line: one subcommand per pipeline step.

Human-readable tables go to stdout; CSV/JSON artifacts and a run manifest go
to the output directory. Failures print one ``error category=... stage=...``
line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from .config import ExperimentConfig, config_from_dict, parse_config
from .data import read_dataset, write_dataset
from .models import CKPT_MAGIC, load_checkpoint, param_count
from .pipeline import (
    PipelineError,
    eval_dataset,
    load_model,
    new_manifest,
    run_eval,
    run_mup_check,
    run_pretrain,
    run_sweep,
    single_thread,
    stage,
    train_dataset,
    _now,
)
from .scaling import compute_budget_table, budget_table_csv, fit_power_law, flops_forward, read_points_csv, write_fit_outputs

EXIT_CODES = {"config": 2, "data": 3, "training": 4, "evaluation": 5, "fit": 6, "io": 7, "check": 8}
AXIS_EXPONENT = {"data": "beta", "model": "alpha"}


def packaged_law_csv() -> Path:
    """Points generated from P = 0.9 - 2.0 * x**-0.3, x = 1e2..1e6 (exact parameters in the header comment)."""
    return Path(str(resources.files("gaitscale").joinpath("resources/synthetic_law.csv")))


def _load_config(args) -> ExperimentConfig:
    with stage("config"):
        cfg = parse_config(args.config) if args.config else config_from_dict({})
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return cfg


def _manifest_params(path) -> dict:
    with stage("config"):
        try:
            raw = json.loads(Path(path).read_text())
        except ValueError:
            return {}
        return raw.get("params", {}) if isinstance(raw, dict) and "manifest_version" in raw else {}


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or cfg.out_dir)


def _print_table(rows: list[tuple], header: tuple) -> None:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    for r in [header, *rows]:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip())


def _fmt(x: float) -> str:
    return f"{x:.4f}"


# -- subcommands ----------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    man = new_manifest("gen-data", cfg, args.single_thread)
    with stage("generate"):
        train = train_dataset(cfg)
        evals = eval_dataset(cfg)
    with stage("write-artifacts"):
        ext = ".jsonl" if args.format == "jsonl" else ".gsk"
        for name, ds in (("train", train), ("eval", evals)):
            path = out / f"{name}{ext}"
            write_dataset(ds, path)
            man.add_artifact(f"{name}_dataset", path, out)
    man.finished = _now()
    man.write(out / "gen-data.manifest.json")
    _print_table(
        [("train", len(train), len(set(train.subject_ids.tolist()))), ("eval", len(evals), len(set(evals.subject_ids.tolist())))],
        ("split", "sequences", "identities"),
    )
    print(f"wrote {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)

    def progress(step, rec):
        if args.verbose and (step % 10 == 0 or step == 1):
            print(f"step {step:5d}  lr {rec['lr']:.2e}  simclr {rec['l_simclr']:.4f}  koleo {rec['l_koleo']:.4f}")

    fraction, width = args.fraction, args.width
    if args.config:
        # rerunning from a manifest reuses its subset fraction and width unless overridden
        raw = _manifest_params(args.config)
        fraction = raw.get("subset_fraction", 1.0) if fraction is None else fraction
        width = raw.get("width") if width is None else width
    res = run_pretrain(cfg, out, 1.0 if fraction is None else fraction, width, args.single_thread, progress=progress)
    sim = res.log.column("l_simclr")
    _print_table(
        [(len(res.log), res.n_sequences, res.manifest.params["n_parameters"], _fmt(sim[0]), _fmt(sim[-1]))],
        ("steps", "sequences", "parameters", "simclr_first", "simclr_last"),
    )
    print(f"checkpoint sha256 {res.manifest.artifacts['checkpoint']['sha256']}")
    return 0


def _manifest_checkpoint(config_path) -> Path | None:
    # an eval manifest remembers which checkpoint it scored
    if not config_path:
        return None
    try:
        raw = json.loads(Path(config_path).read_text())
    except (OSError, ValueError):
        return None
    if isinstance(raw, dict) and raw.get("command") == "eval":
        path = raw.get("params", {}).get("checkpoint_path")
        return Path(path) if path else None
    return None


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else _manifest_checkpoint(args.config) or out / "checkpoint.gck"
    with single_thread(args.single_thread):
        model = load_model(ckpt)
    report, man = run_eval(cfg, model, out, args.single_thread, checkpoint_path=ckpt)
    rows = [
        (e["probe_view"], e["gallery_view"], e["variation"], _fmt(e["accuracy"]))
        for e in report.entries if e["k"] == 1
    ]
    _print_table(rows, ("probe_view", "gallery_view", "variation", "rank1"))
    print(f"controlled (cross-view rank-1) {_fmt(report.aggregate_controlled)}")
    print(f"wild (rank-5)                  {_fmt(report.aggregate_wild)}")
    print(f"report sha256 {man.artifacts['report_json']['sha256']}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    res = run_sweep(cfg, out, args.single_thread)
    _print_table(
        [(f"{c.fraction:g}", c.width, c.n_sequences, c.n_parameters, _fmt(c.controlled), _fmt(c.wild)) for c in res.cells],
        ("fraction", "width", "D", "N", "controlled", "wild"),
    )
    for c, fit in res.data_fits.items():
        print(f"data-axis fit c={c}: E={fit.irreducible:.4f} a={fit.amplitude:.4g} beta={fit.exponent:.4f} rss={fit.rss:.3g}")
    for f, fit in res.model_fits.items():
        print(f"model-axis fit frac={f:g}: E={fit.irreducible:.4f} a={fit.amplitude:.4g} alpha={fit.exponent:.4f} rss={fit.rss:.3g}")
    print(f"{len(res.cells)} runs, {len(res.data_fits)} data-axis fits, {len(res.model_fits)} model-axis fits -> {out}")
    return 0


def cmd_fit_law(args) -> int:
    points_path = Path(args.points) if args.points else packaged_law_csv()
    with stage("read-points"):
        points = read_points_csv(points_path)
    with stage("fit"):
        fit = fit_power_law(points, args.form, objective=args.objective)
    name = AXIS_EXPONENT[args.axis]
    print(
        f"form={fit.form} axis={args.axis} amplitude={fit.amplitude!r} {name}={fit.exponent!r} "
        f"irreducible={fit.irreducible!r} rss={fit.rss!r} n={fit.n_points}"
    )
    if args.out:
        with stage("write-artifacts"):
            out = Path(args.out)
            write_fit_outputs(fit, points, out, f"fit_{args.axis}")
            man = new_manifest("fit-law", config_from_dict({}), args.single_thread,
                               points=str(points_path), form=args.form, axis=args.axis, objective=args.objective)
            man.add_artifact("fit_json", out / f"fit_{args.axis}.json", out)
            man.add_artifact("fit_curve", out / f"fit_{args.axis}_curve.csv", out)
            man.finished = _now()
            man.write(out / "fit-law.manifest.json")
    return 0


def cmd_flops(args) -> int:
    cfg = _load_config(args)
    with stage("flops"):
        rep = flops_forward(cfg.model, args.frames)
    rows = [(k, f"{v:,}") for k, v in rep.components.items()] + [("forward_total", f"{rep.forward_total:,}")]
    _print_table(rows, ("component", "flops"))
    print(f"parameters (backbone) {rep.params:,}")
    print(f"training for one epoch over {args.dataset_size} sequences: {rep.training_total(args.dataset_size, 1):,} "
          f"(6ND heuristic {rep.heuristic_training(args.dataset_size, 1):,})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        man = new_manifest("flops", cfg, args.single_thread, frames=rep.frames)
        (out / "flops.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
        man.add_artifact("flops_json", out / "flops.json", out)
        if args.budget:
            cfgs = {f"{cfg.model.family}-c{c}": cfg.model.with_width(c) for c in cfg.sweep.widths}
            with stage("budget"):
                table = compute_budget_table(cfgs, args.dataset_size, cfg.train.epochs, args.budget)
            budget_table_csv(table, out / "budget.csv")
            man.add_artifact("budget_csv", out / "budget.csv", out)
        man.finished = _now()
        man.write(out / "flops.manifest.json")
    elif args.budget:
        cfgs = {f"{cfg.model.family}-c{c}": cfg.model.with_width(c) for c in cfg.sweep.widths}
        with stage("budget"):
            table = compute_budget_table(cfgs, args.dataset_size, cfg.train.epochs, args.budget)
        for r in table:
            print(f"{r.name}: " + ", ".join(f"D={d} epochs={e}" for d, e, _ in r.allocations[:6]))
    return 0


def cmd_mup_check(args) -> int:
    cfg = _load_config(args)
    widths = [int(w) for w in args.widths.split(",")] if args.widths else None
    with single_thread(args.single_thread):
        res = run_mup_check(cfg, widths, args.steps)
    ws = sorted(res.ratios["mup"])
    layers = list(res.ratios["mup"][ws[0]])
    rows = [(k, *(f"{res.ratios[p][c][k]:.3f}" for p in ("mup", "sp") for c in ws[1:])) for k in layers]
    _print_table(rows, ("layer", *(f"{p}_c{c}" for p in ("mup", "sp") for c in ws[1:])))
    print(f"muP violations: {len(res.violations['mup'])}   SP violations: {len(res.violations['sp'])}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "mup_check.csv", "w") as fh:
            fh.write("parametrization,width,layer,rms_ratio\n")
            for p in ("mup", "sp"):
                for c in ws:
                    for k in layers:
                        fh.write(f"{p},{c},{k},{res.ratios[p][c][k]!r}\n")
        man = new_manifest("mup-check", cfg, args.single_thread, widths=ws, steps=args.steps)
        man.add_artifact("mup_check_csv", out / "mup_check.csv", out)
        man.finished = _now()
        man.write(out / "mup-check.manifest.json")
    if not res.passed:
        raise PipelineError("check", "mup-check", "coordinate check failed: " + json.dumps(res.violations["mup"][:5]))
    print("coordinate check passed")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    with stage("inspect"):
        head = path.read_bytes()[:4] if path.suffix != ".jsonl" else b""
        if head == CKPT_MAGIC:
            model = load_checkpoint(path)
            print(json.dumps({"kind": "checkpoint", "step": model.step, "config": model.cfg.to_dict(),
                              "parameters": model.num_parameters(),
                              "backbone_parameters": param_count(model.cfg, include_head=False)}, indent=2))
            return 0
        ds = read_dataset(path)
        lengths = [s.n_frames for s in ds.sequences]
        views = sorted({s.view_id for s in ds.sequences})
        print(json.dumps({
            "kind": "dataset", "sequences": len(ds), "identities": len(set(ds.subject_ids.tolist())),
            "views": views, "frames_min": min(lengths), "frames_max": max(lengths), "provenance": ds.provenance,
        }, indent=2, default=str))
    return 0


# -- parser ------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaitscale", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML/JSON experiment config or a run manifest (default: built-in defaults)")
            sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", help="output directory (default: config out_dir)")
        sp.add_argument("--single-thread", action="store_true", help="serial, single-threaded BLAS for bit-reproducible runs")
        return sp

    sp = common(sub.add_parser("gen-data", help="write the synthetic train/eval datasets"))
    sp.add_argument("--format", choices=("binary", "jsonl"), default="binary")
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("pretrain", help="contrastive pretraining; writes a checkpoint and log"))
    sp.add_argument("--fraction", type=float, help="nested data subset fraction (default 1.0)")
    sp.add_argument("--width", type=int, help="override the width multiplier")
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_pretrain)

    sp = common(sub.add_parser("eval", help="zero-shot retrieval evaluation of a checkpoint"))
    sp.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.gck)")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("sweep", help="fractions x widths grid, then power-law fits"))
    sp.set_defaults(func=cmd_sweep)

    sp = common(sub.add_parser("fit-law", help="fit a power law to (x, performance) points"), config=False)
    sp.add_argument("--points", help="CSV with columns x,performance,label (default: packaged synthetic law)")
    sp.add_argument("--form", choices=("additive", "saturating"), default="saturating")
    sp.add_argument("--axis", choices=("data", "model"), default="data")
    sp.add_argument("--objective", choices=("log", "linear"), default="log")
    sp.set_defaults(func=cmd_fit_law)

    sp = common(sub.add_parser("flops", help="analytic FLOPs and iso-compute allocations"))
    sp.add_argument("--frames", type=int, help="sequence length T (default: model crop_length)")
    sp.add_argument("--dataset-size", type=int, default=1000)
    sp.add_argument("--budget", type=float, help="training FLOPs budget for the allocation table")
    sp.set_defaults(func=cmd_flops)

    sp = common(sub.add_parser("mup-check", help="per-layer activation scale across widths, muP vs SP"))
    sp.add_argument("--widths", help="comma-separated width multipliers, e.g. 1,2,4")
    sp.add_argument("--steps", type=int, help="optimizer steps (default: config mup_check.steps)")
    sp.set_defaults(func=cmd_mup_check)

    sp = sub.add_parser("inspect", help="summarize a dataset or checkpoint file")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"gaitscale: {exc.one_line()}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        err = PipelineError("internal", args.command, f"{type(exc).__name__}: {exc}")
        print(f"gaitscale: {err.one_line()}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
