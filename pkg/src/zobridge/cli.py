"""Command-line front end.

Subcommands: ``gen`` (datasets), ``stage1`` / ``stage2`` (training runs),
``zocheck`` (estimator check harness), ``eval`` (checkpoint evaluation).

Exit codes are stable contracts: 0 ok, 2 usage error, 3 missing or
mismatched input, 4 divergence, 5 check failure.

Every run writes under one output directory: a byte-exact snapshot of the
config file, the fully resolved config, a manifest with content hashes, the
metrics JSONL, and a summary CSV. Metrics files carry no timestamps so equal
(config, seed) runs are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema

from . import backend
from .errors import DatasetFormatError, DivergenceError
from .pipeline import PipelineState
from .rng import Rng
from .tasks import (Dataset, PRESETS, TaskPreset, build_task_a_pipeline,
                    build_task_b_pipeline, gen_task_a, gen_task_b,
                    load_dataset, load_preset, save_dataset, save_preset,
                    stage1_tasks_task_b)
from .train import (RunMetrics, TrainConfig, config_hash, load_blocks_into,
                    load_checkpoint, pipeline_rmse, reconstruction_accuracy,
                    save_checkpoint, stage1_train, stage2_train)
from .zo import ZoConfig, builtin_check_suite, thread_count, zo_check

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_DIVERGENCE = 4
EXIT_CHECK_FAILURE = 5


def _load_schema() -> dict:
    ref = resources.files("zobridge").joinpath("presets/config.schema.json")
    return json.loads(ref.read_text())


def default_config() -> dict:
    """The paper-scale settings are the package defaults."""
    ref = resources.files("zobridge").joinpath("presets/paper_scale.json")
    return json.loads(ref.read_text())


def resolve_config(config_path: str | None, overrides: list[str],
                   seed: int | None = None, task: str | None = None) -> dict:
    resolved = default_config()
    if config_path is not None:
        with open(config_path) as fh:
            loaded = json.load(fh)
        jsonschema.validate(loaded, _load_schema())
        zo = {**resolved["zo"], **loaded.pop("zo", {})}
        resolved.update(loaded)
        resolved["zo"] = zo
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = resolved
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    if seed is not None:
        resolved["seed"] = seed
    if task is not None:
        resolved["task"] = task
    jsonschema.validate(resolved, _load_schema())
    return resolved


def train_config_from(resolved: dict) -> TrainConfig:
    return TrainConfig(
        optimizer=resolved["optimizer"],
        lr_encoder_decoder=resolved["lr_encoder_decoder"],
        lr_predictor=resolved["lr_predictor"],
        batch_size_stage1=resolved["batch_size_stage1"],
        batch_size_stage2=resolved["batch_size_stage2"],
        clip_norm=resolved["clip_norm"],
        lambda_=resolved["lambda"],
        epochs_stage1=resolved["epochs_stage1"],
        epochs_stage2=resolved["epochs_stage2"],
        seed=resolved["seed"],
        freeze=tuple(resolved["freeze"]))


def zo_config_from(resolved: dict) -> ZoConfig:
    z = resolved["zo"]
    return ZoConfig(kind=z["kind"], mu=z["mu"], sigma=z["sigma"],
                    k_samples=z["k_samples"], stream_id=z["stream_id"])


@dataclass
class RunManifest:
    out_dir: str
    argv: list[str]
    config_path: str | None
    config_sha256: str | None
    resolved_sha256: str
    backend: str
    threads: int
    created_at: str

    def write(self, out: Path) -> None:
        with open(out / "manifest.json", "w") as fh:
            json.dump(self.__dict__, fh, indent=2)
            fh.write("\n")


def _emit_run_dir(out: Path, config_path: str | None, resolved: dict,
                  argv: list[str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    config_sha = None
    if config_path is not None:
        blob = Path(config_path).read_bytes()
        (out / "config.snapshot.json").write_bytes(blob)
        import hashlib
        config_sha = hashlib.sha256(blob).hexdigest()
    with open(out / "config.resolved.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    RunManifest(out_dir=str(out), argv=argv, config_path=config_path,
                config_sha256=config_sha, resolved_sha256=config_hash(resolved),
                backend=backend.active_backend(), threads=thread_count(),
                created_at=time.strftime("%Y-%m-%dT%H:%M:%S%z")).write(out)


def _load_data_dir(data_dir: str) -> tuple[TaskPreset, Dataset, Dataset]:
    d = Path(data_dir)
    for fname in ("preset.json", "train.csv", "test.csv"):
        if not (d / fname).exists():
            raise FileNotFoundError(f"data directory {data_dir!r} lacks {fname}")
    return (load_preset(d / "preset.json"), load_dataset(d / "train.csv"),
            load_dataset(d / "test.csv"))


def _summary_metrics(ps: PipelineState, test: Dataset) -> dict:
    out = {"predictor_rmse": pipeline_rmse(ps, test.objects, test.y)}
    out["autoencoder_recon_accuracy"] = (
        reconstruction_accuracy(test.objects, ps)
        if ps.recon_decoder is not None else None)
    return out


def _write_summary(path: Path, stage1: dict | None, stage2: dict | None) -> None:
    def cell(d, key):
        if d is None or d.get(key) is None:
            return ""
        return repr(d[key])

    with open(path, "w") as fh:
        fh.write("model_measure,stage1,stage2\n")
        for key in ("autoencoder_recon_accuracy", "predictor_rmse"):
            fh.write(f"{key},{cell(stage1, key)},{cell(stage2, key)}\n")


def _write_gnuplot(path: Path, metrics: RunMetrics) -> None:
    with open(path, "w") as fh:
        fh.write("# epoch train_rmse test_rmse recon_accuracy\n")
        for r in metrics.records:
            def num(v):
                return "nan" if v is None else repr(v)
            fh.write(f"{r.epoch} {num(r.train_rmse)} {num(r.test_rmse)} "
                     f"{num(r.recon_accuracy)}\n")


def _build_pipeline(resolved: dict, preset: TaskPreset, train: Dataset):
    if resolved["task"] == "task_a_smooth":
        return build_task_a_pipeline(preset, resolved["seed"]), None
    ps, parts = build_task_b_pipeline(preset, train.objects, resolved["seed"])
    return ps, parts


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    if args.preset not in PRESETS:
        print(f"unknown preset {args.preset!r}; available: "
              f"{', '.join(sorted(PRESETS))}", file=sys.stderr)
        return EXIT_USAGE
    preset = PRESETS[args.preset](seed=args.seed)
    gen = gen_task_a if args.preset == "task_a_smooth" else gen_task_b
    train, test = gen(preset)
    out = Path(args.out or f"runs/gen-{args.preset}-s{args.seed}")
    out.mkdir(parents=True, exist_ok=True)
    save_preset(preset, out / "preset.json")
    save_dataset(train, out / "train.csv")
    save_dataset(test, out / "test.csv")
    print(f"wrote {out}/preset.json, train.csv ({len(train)} rows), "
          f"test.csv ({len(test)} rows)")
    return EXIT_OK


def _seed_list(args, resolved) -> list[int]:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    return [resolved["seed"]]


def _run_stage1_once(resolved: dict, preset: TaskPreset, train: Dataset,
                     test: Dataset, out: Path, tag: str, emit_gnuplot: bool) -> dict:
    cfg = train_config_from(resolved)
    ps, parts = _build_pipeline(resolved, preset, train)
    if parts is None:
        metrics = RunMetrics()  # nothing to pretrain independently
    else:
        ae, pred = stage1_tasks_task_b(parts, train, test, cfg)
        metrics = stage1_train(ae, pred, cfg)
    save_checkpoint(out / f"checkpoint{tag}.json", ps, task=resolved["task"],
                    preset=preset.to_dict(), cfg_hash=config_hash(resolved),
                    stage="stage1")
    metrics.write_jsonl(out / f"metrics{tag}.jsonl")
    summary = _summary_metrics(ps, test)
    _write_summary(out / f"summary{tag}.csv", summary, None)
    if emit_gnuplot:
        _write_gnuplot(out / f"metrics{tag}.dat", metrics)
    return summary


def cmd_stage1(args) -> int:
    resolved = resolve_config(args.config, args.set, seed=args.seed)
    preset, train, test = _load_data_dir(args.data)
    if preset.name != resolved["task"]:
        print(f"data directory holds {preset.name!r}, config wants "
              f"{resolved['task']!r}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    out = Path(args.out or f"runs/stage1-{resolved['task']}")
    _emit_run_dir(out, args.config, resolved, sys.argv[1:])
    try:
        for seed in _seed_list(args, resolved):
            run_cfg = dict(resolved, seed=seed)
            tag = f"-seed{seed}" if args.seeds else ""
            summary = _run_stage1_once(run_cfg, preset, train, test, out, tag,
                                       args.emit_gnuplot)
            print(f"stage1 seed={seed}: "
                  + ", ".join(f"{k}={v}" for k, v in summary.items()))
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


def _restore_stage1(resolved: dict, ckpt_path: Path, train: Dataset):
    ckpt = load_checkpoint(ckpt_path)
    if ckpt["task"] != resolved["task"]:
        raise ValueError(f"checkpoint is for task {ckpt['task']!r}, config wants "
                         f"{resolved['task']!r}")
    preset = TaskPreset.from_dict(ckpt["preset"])
    ps, parts = _build_pipeline(resolved, preset, train)
    load_blocks_into(ps, ckpt)
    return ps, parts, preset


def _run_stage2_once(resolved: dict, ckpt_path: Path, train: Dataset,
                     test: Dataset, out: Path, tag: str,
                     emit_gnuplot: bool) -> tuple[dict, dict]:
    cfg = train_config_from(resolved)
    zo_cfg = zo_config_from(resolved)
    ps, _, preset = _restore_stage1(resolved, ckpt_path, train)
    before = _summary_metrics(ps, test)
    try:
        metrics = stage2_train(ps, train.objects, train.y, test.objects, test.y,
                               cfg, zo_cfg)
    except DivergenceError:
        save_checkpoint(out / f"checkpoint{tag}.diverged.json", ps,
                        task=resolved["task"], preset=preset.to_dict(),
                        cfg_hash=config_hash(resolved), stage="stage2-diverged")
        raise
    after = _summary_metrics(ps, test)
    save_checkpoint(out / f"checkpoint{tag}.json", ps, task=resolved["task"],
                    preset=preset.to_dict(), cfg_hash=config_hash(resolved),
                    stage="stage2")
    metrics.write_jsonl(out / f"metrics{tag}.jsonl")
    _write_summary(out / f"summary{tag}.csv", before, after)
    if emit_gnuplot:
        _write_gnuplot(out / f"metrics{tag}.dat", metrics)
    return before, after


def _write_paired_summary(path: Path, rows: list[dict]) -> None:
    cols = ["seed", "stage1_rmse", "stage2_rmse", "stage1_recon_accuracy",
            "stage2_recon_accuracy"]

    def fmt(v):
        return "" if v is None else repr(v)

    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(fmt(row[c]) for c in cols) + "\n")
        med = {c: statistics.median([r[c] for r in rows if r[c] is not None])
               if any(r[c] is not None for r in rows) else None
               for c in cols[1:]}
        fh.write("median," + ",".join(fmt(med[c]) for c in cols[1:]) + "\n")


def cmd_stage2(args) -> int:
    if not args.from_stage1:
        print("stage2 requires --from-stage1 (a stage1 checkpoint file, or the "
              "run directory when using --seeds)", file=sys.stderr)
        return EXIT_MISSING_INPUT
    resolved = resolve_config(args.config, args.set, seed=args.seed)
    preset, train, test = _load_data_dir(args.data)
    if preset.name != resolved["task"]:
        print(f"data directory holds {preset.name!r}, config wants "
              f"{resolved['task']!r}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    out = Path(args.out or f"runs/stage2-{resolved['task']}")
    _emit_run_dir(out, args.config, resolved, sys.argv[1:])
    src = Path(args.from_stage1)
    try:
        if args.seeds:
            rows = []
            for seed in _seed_list(args, resolved):
                run_cfg = dict(resolved, seed=seed)
                ckpt = src / f"checkpoint-seed{seed}.json" if src.is_dir() else src
                before, after = _run_stage2_once(run_cfg, ckpt, train, test, out,
                                                 f"-seed{seed}", args.emit_gnuplot)
                rows.append({
                    "seed": seed,
                    "stage1_rmse": before["predictor_rmse"],
                    "stage2_rmse": after["predictor_rmse"],
                    "stage1_recon_accuracy": before["autoencoder_recon_accuracy"],
                    "stage2_recon_accuracy": after["autoencoder_recon_accuracy"],
                })
                print(f"stage2 seed={seed}: rmse {rows[-1]['stage1_rmse']:.4f} "
                      f"-> {rows[-1]['stage2_rmse']:.4f}")
            _write_paired_summary(out / "paired_summary.csv", rows)
        else:
            before, after = _run_stage2_once(resolved, src, train, test, out, "",
                                             args.emit_gnuplot)
            print(f"stage2: rmse {before['predictor_rmse']:.4f} -> "
                  f"{after['predictor_rmse']:.4f}")
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except ValueError as exc:
        print(f"checkpoint rejected: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except DivergenceError as exc:
        print(f"divergence: {exc} (last good state saved)", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


def cmd_zocheck(args) -> int:
    mus = [float(m) for m in args.mu.split(",")]
    ks = [int(k) for k in args.k.split(",")]
    kinds = ("coordinate", "gaussian") if args.kind == "both" else (args.kind,)
    failures: list[str] = []
    notes: list[str] = []
    all_rows = []
    for entry in builtin_check_suite(seed=args.seed):
        use_kinds = kinds if not entry["linear"] else tuple(
            k for k in kinds if k == "coordinate") or ("coordinate",)
        report = zo_check(entry["stage"], entry["jacobian_fn"], entry["points"],
                          mus=mus, kinds=use_kinds, k_values=ks,
                          sigma=args.sigma, seed=args.seed,
                          linear=entry["linear"])
        offset = 0 if entry["name"] == "affine" else 100
        for r in report.rows:
            r.point_id += offset
            all_rows.append(r)
        failures.extend(f"{entry['name']}: {f}" for f in report.failures)
        notes.extend(f"{entry['name']}: {n}" for n in report.notes)
    if len(ks) < 2 and "gaussian" in kinds:
        notes.append("K trend not asserted: need at least two K values")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    from .zo import ZoCheckReport
    merged = ZoCheckReport(rows=all_rows, failures=failures, notes=notes)
    with open(out, "w") as fh:
        merged.write_csv(fh)
    for n in notes:
        print(f"note: {n}")
    if failures:
        print(f"zocheck FAILED ({len(failures)} assertion(s)):", file=sys.stderr)
        for f in failures:
            print(f"  {f}", file=sys.stderr)
        return EXIT_CHECK_FAILURE
    print(f"zocheck ok: {len(all_rows)} rows -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    preset_data, train, test = _load_data_dir(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    resolved = resolve_config(args.config, args.set, task=ckpt["task"])
    ps, _, _ = _restore_stage1(resolved, Path(args.checkpoint), train)
    if preset_data.name != ckpt["task"]:
        print(f"data is {preset_data.name!r}, checkpoint is {ckpt['task']!r}",
              file=sys.stderr)
        return EXIT_MISSING_INPUT
    summary = _summary_metrics(ps, test)
    for key, value in summary.items():
        print(f"{key}: {value}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_summary(out, summary, None)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zobridge",
        description="train staged pipelines with opaque stages via "
                    "zeroth-order gradient bridging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                       help="override a config entry (dotted keys allowed)")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("preset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("stage1", help="independent pretraining (exact gradients)")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seeds", default=None, help="comma list for paired runs")
    p.add_argument("--emit-gnuplot", action="store_true")
    p.set_defaults(func=cmd_stage1)

    p = sub.add_parser("stage2", help="joint zeroth-order end-to-end training")
    add_common(p)
    p.add_argument("--from-stage1", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seeds", default=None, help="comma list for paired runs")
    p.add_argument("--emit-gnuplot", action="store_true")
    p.set_defaults(func=cmd_stage2)

    p = sub.add_parser("zocheck", help="estimator check harness")
    p.add_argument("--kind", choices=["coordinate", "gaussian", "both"],
                   default="both")
    p.add_argument("--mu", default="1e-2,5e-3,2.5e-3,1.25e-3",
                   help="comma list; consecutive values should halve")
    p.add_argument("--k", default="512,1024", help="comma list of sample counts")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="zocheck_report.csv")
    p.set_defaults(func=cmd_zocheck)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except DatasetFormatError as exc:
        print(f"bad dataset: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except jsonschema.ValidationError as exc:
        print(f"bad config: {exc.message}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
