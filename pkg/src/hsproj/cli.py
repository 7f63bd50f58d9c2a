"""Command-line workflow over the synthetic task.

Subcommands::

    hsproj gen-data [--config FILE] [--seed N] [--out DIR]
    hsproj train    --world DIR [--config FILE] [--seed N] [--out DIR] [--resume]
    hsproj train    --manifest FILE --out DIR          # replay a recorded run
    hsproj eval     --checkpoint FILE --world DIR [--baseline teacher|REPORT.json] [--out DIR]
    hsproj ablate   --world DIR [--matrix FILE] [--seeds 0,1,2] [--out DIR]
    hsproj report   PATH                              # report.json or ablation.json

Config files are INI documents with ``[world]``, ``[mapper]``, ``[train]`` and
``[loss]`` sections whose keys are the fields of the matching config
dataclass; an unknown section or key is an error. Output directories default
to subdirectories of ``$HSPROJ_CACHE_ROOT`` (``~/.cache/hsproj`` if unset).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from . import projection_head as ph
from . import synthetic_oracle as so
from . import trainer as tr
from .errors import CacheMiss, ConfigurationError, DataError, HsprojError, RuntimeFailure
from .retrieval_eval import METRICS, PerTriggerResult, build_report, random_chance_recall

log = logging.getLogger("hsproj")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
CACHE_ENV = "HSPROJ_CACHE_ROOT"
COLLAPSE_FACTOR = 2.0

# encoder size used for the synthetic task unless a [mapper] section says otherwise
SYNTHETIC_MAPPER = {"d_m": 64, "layers": 2, "heads": 4}


def cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "hsproj")


# -- config files ---------------------------------------------------------------------------

_SECTIONS = {"world": so.WorldConfig, "mapper": ph.MapperConfig, "train": tr.TrainConfig, "loss": tr.TrainConfig}
_LOSS_KEYS = ("align", "contra", "rank", "tau", "tau_r")


def _coerce(cls, key: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigurationError(f"unknown key {key!r} for {cls.__name__}")
    default = fields[key].default
    try:
        if isinstance(default, bool):
            value = raw.strip().lower()
            if value not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return value in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{cls.__name__}.{key}: cannot parse {raw!r}") from None
    return raw.strip()


def read_config(path) -> dict:
    """Parse an INI config into ``{"world": {...}, "mapper": {...}, "train": {...}}`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    out = {"world": {}, "mapper": {}, "train": {}}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(f"{path}: unknown section [{section}]")
        target = "train" if section == "loss" else section
        for key, raw in parser.items(section):
            if section == "loss" and key not in _LOSS_KEYS:
                raise ConfigurationError(f"{path}: unknown key {key!r} in [loss]")
            out[target][key] = _coerce(_SECTIONS[section], key, raw)
    return out


def resolve_mapper(world_config: so.WorldConfig, overrides: dict, seed: int) -> ph.MapperConfig:
    values = {"d_h": world_config.d_h, "d": world_config.d, "max_positions": world_config.max_positions, "seed": seed}
    values.update(SYNTHETIC_MAPPER)
    values.update(overrides)
    return ph.MapperConfig.from_dict(values)


# -- manifests ----------------------------------------------------------------------------------

@dataclass
class RunManifest:
    name: str
    group: str
    command: str
    seed: int
    world_dir: str
    world_config: dict
    mapper_config: dict | None = None
    train_config: dict | None = None
    artifacts: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    status: str = "converged"
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> RunManifest:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}: not a run manifest ({exc})") from exc


def _load_checked_world(world_dir, expected: dict | None = None) -> so.SyntheticWorld:
    world = so.load_world(world_dir)
    if expected is not None and world.config.to_dict() != expected:
        raise DataError(f"{world_dir}: world config differs from the one recorded in the manifest")
    return world


# -- commands ---------------------------------------------------------------------------------------

def cmd_gen_data(world_config: so.WorldConfig, out_dir) -> so.SyntheticWorld:
    start = time.perf_counter()
    world = so.generate_world(world_config)
    out = so.save_world(world, out_dir)
    RunManifest(
        name="gen-data",
        group="-",
        command="gen-data",
        seed=world_config.seed,
        world_dir=str(out),
        world_config=world_config.to_dict(),
        artifacts={"world": str(out / "world.json"), "corpus": str(out / "corpus.hcrp"), "traces": str(out / "traces")},
        metrics={"teacher_test_recall@10": so.teacher_baseline_eval(world).recall},
        wall_clock_s=time.perf_counter() - start,
    ).write(out / "manifest.json")
    return world


def cmd_train(
    world_dir,
    train_config: tr.TrainConfig,
    out_dir,
    mapper_config: ph.MapperConfig | None = None,
    name: str = "train",
    group: str = "-",
    resume: bool = False,
    world: so.SyntheticWorld | None = None,
) -> RunManifest:
    """Train on the world's train split; best checkpoint chosen by validation Recall@10."""
    start = time.perf_counter()
    world = world or so.load_world(world_dir)
    mapper_config = mapper_config or resolve_mapper(world.config, {}, train_config.seed)
    if (mapper_config.d_h, mapper_config.d) != (world.config.d_h, world.config.d):
        raise ConfigurationError(
            f"mapper dims (d_h={mapper_config.d_h}, d={mapper_config.d}) do not match the world "
            f"(d_h={world.config.d_h}, d={world.config.d})"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last = out / "last.ckpt"
    resume_from = last if resume and last.exists() else None
    val = world.split("val")
    _, history = tr.train(world.split("train"), world.index, mapper_config, train_config, val, out, resume_from)
    (out / "history.json").write_text(json.dumps(history.to_dict(), indent=2) + "\n")

    chance = random_chance_recall(world.index, [t.trigger_id for t in val])
    final_val = history.epochs[-1].val_recall
    status = "collapsed" if final_val is not None and final_val < COLLAPSE_FACTOR * chance else "converged"
    manifest = RunManifest(
        name=name,
        group=group,
        command="train",
        seed=train_config.seed,
        world_dir=str(Path(world_dir).resolve()),
        world_config=world.config.to_dict(),
        mapper_config=mapper_config.to_dict(),
        train_config=train_config.to_dict(),
        artifacts={
            "best": str(out / "best.hsph"),
            "last": str(last),
            "history": str(out / "history.jsonl"),
        },
        metrics={
            "final_val_recall@10": final_val,
            "best_val_recall@10": history.best_val_recall,
            "best_epoch": history.best_epoch,
            "chance_recall@10": chance,
            "final_total_loss": history.epochs[-1].total,
        },
        wall_clock_s=time.perf_counter() - start,
        status=status,
    )
    manifest.write(out / "manifest.json")
    return manifest


def replay(manifest_path, out_dir) -> RunManifest:
    """Re-run a recorded training run into ``out_dir``."""
    m = RunManifest.read(manifest_path)
    if m.command != "train":
        raise ConfigurationError(f"{manifest_path}: only train manifests can be replayed, got {m.command!r}")
    world = _load_checked_world(m.world_dir, m.world_config)
    return cmd_train(
        m.world_dir,
        tr.TrainConfig.from_dict(m.train_config),
        out_dir,
        ph.MapperConfig.from_dict(m.mapper_config),
        name=m.name,
        group=m.group,
        world=world,
    )


def _load_baseline(baseline, world: so.SyntheticWorld, split: str):
    if baseline is None:
        return None, None
    if baseline == "teacher":
        return so.teacher_baseline_results(world, split), "teacher"
    try:
        data = json.loads(Path(baseline).read_text(encoding="utf-8"))
        return [PerTriggerResult(**r) for r in data["per_trigger"]], data["system"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{baseline}: not an evaluation report with per-trigger results") from exc


def cmd_eval(
    checkpoint,
    world_dir,
    baseline=None,
    out_dir=None,
    split: str = "test",
    seed: int = 0,
    system: str = "mapper",
    world: so.SyntheticWorld | None = None,
):
    """Evaluate a checkpoint on ``split``; ``baseline`` is ``"teacher"`` or a prior report.json."""
    start = time.perf_counter()
    world = world or so.load_world(world_dir)
    params = ph.load(checkpoint)
    if (params.config.d_h, params.config.d) != (world.config.d_h, world.index.dim):
        raise ConfigurationError(
            f"checkpoint maps {params.config.d_h} -> {params.config.d} but the world has "
            f"d_h={world.config.d_h}, d={world.index.dim}"
        )
    results = tr.evaluate_mapper(params, world.split(split), world.index)
    base_results, base_name = _load_baseline(baseline, world, split)
    report = build_report(results, base_results, system=system, baseline_name=base_name or "baseline", seed=seed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        (out / "report.txt").write_text(report.render_table() + "\n", encoding="utf-8")
        RunManifest(
            name=system,
            group="-",
            command="eval",
            seed=seed,
            world_dir=str(Path(world_dir).resolve()),
            world_config=world.config.to_dict(),
            mapper_config=params.config.to_dict(),
            artifacts={"checkpoint": str(checkpoint), "report": str(out / "report.json"), "baseline": baseline},
            metrics=dict(report.metrics, retention=report.retention),
            wall_clock_s=time.perf_counter() - start,
        ).write(out / "manifest.json")
    return report


# -- ablation ------------------------------------------------------------------------------------------

@dataclass(frozen=True)
class Experiment:
    name: str
    group: str
    overrides: dict


def _exp(name, group, **overrides) -> Experiment:
    return Experiment(name, group, overrides)


_A = {"epochs": 30, "lr_start": 3e-4}
_B = {"epochs": 30, "lr_start": 3e-4, "contra": 0.0}

DEFAULT_MATRIX = (
    _exp("all_three", "A", **_A, align=0.5, contra=0.5, rank=0.5),
    _exp("align_contra", "A", **_A, align=0.5, contra=0.5, rank=0.0),
    _exp("align_rank", "A", **_A, align=0.5, contra=0.0, rank=0.5),
    _exp("align_only", "A", **_A, align=1.0, contra=0.0, rank=0.0),
    _exp("contra_only", "A", **_A, align=0.0, contra=1.0, rank=0.0),
    _exp("rank_only", "A", **_A, align=0.0, contra=0.0, rank=1.0),
    _exp("align_heavy_rd", "B", **_B, align=1.0, rank=0.5),
    _exp("rd_heavy", "B", **_B, align=0.5, rank=1.0),
    _exp("rd_top256", "B", **_B, align=0.5, rank=0.5, top_k=256),
    _exp("recipe_e80_lr2e4", "C", epochs=80, lr_start=2e-4),
    _exp("recipe_e50", "C", epochs=50, lr_start=2e-4),
    _exp("recipe_lr5e4", "C", epochs=80, lr_start=5e-4),
)


def read_matrix(path) -> list[Experiment]:
    """One INI section per experiment: a ``group`` key plus TrainConfig / loss keys."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    out = []
    for section in parser.sections():
        items = dict(parser.items(section))
        group = items.pop("group", "-")
        overrides = {k: _coerce(tr.TrainConfig, k, v) for k, v in items.items()}
        out.append(Experiment(section, group, overrides))
    if not out:
        raise ConfigurationError(f"{path}: matrix has no experiments")
    return out


TABLE_COLUMNS = ("group", "experiment", "seed", "status", "R@10", "dR@10", "R@10 95% CI", "MRR", "dMRR", "MRR 95% CI")


def _ablation_row(exp: Experiment, seed: int, manifest: RunManifest | None, report, error: str | None) -> OrderedDict:
    row = OrderedDict([("group", exp.group), ("experiment", exp.name), ("seed", seed)])
    if error is not None:
        row.update(status="failed", error=error)
        return row
    row["status"] = manifest.status
    row["recall@10"] = report.metrics["recall@10"]
    row["mrr@10"] = report.metrics["mrr@10"]
    row["ndcg@10"] = report.metrics["ndcg@10"]
    row["delta_recall@10"] = report.deltas["recall@10"]
    row["delta_mrr@10"] = report.deltas["mrr@10"]
    ci_r, ci_m = report.confidence_intervals["recall@10"], report.confidence_intervals["mrr@10"]
    row["ci_recall@10"] = [ci_r.low, ci_r.high]
    row["ci_mrr@10"] = [ci_m.low, ci_m.high]
    row["retention"] = report.retention
    row["run_dir"] = str(Path(manifest.artifacts["best"]).parent)
    return row


def render_ablation(rows) -> str:
    """Combined table, best Recall@10 first; collapsed/failed rows show their status in place of CIs."""
    ranked = sorted(rows, key=lambda r: (-(r.get("recall@10") or -1.0), r["experiment"], r["seed"]))
    widths = (5, 18, 4, 9, 7, 8, 18, 7, 8, 18)
    lines = ["  ".join(f"{c:<{w}}" for c, w in zip(TABLE_COLUMNS, widths))]
    for r in ranked:
        head = [r["group"], r["experiment"], str(r["seed"]), r["status"]]
        if r["status"] == "failed":
            cells = head + ["-", "-", r.get("error", "")[:18], "-", "-", "-"]
        elif r["status"] == "collapsed":
            cells = head + [f"{r['recall@10']:.3f}", "collapsed", "", f"{r['mrr@10']:.3f}", "collapsed", ""]
        else:
            ci_r, ci_m = r["ci_recall@10"], r["ci_mrr@10"]
            cells = head + [
                f"{r['recall@10']:.3f}",
                f"{r['delta_recall@10']:+.3f}",
                f"[{ci_r[0]:+.3f}, {ci_r[1]:+.3f}]",
                f"{r['mrr@10']:.3f}",
                f"{r['delta_mrr@10']:+.3f}",
                f"[{ci_m[0]:+.3f}, {ci_m[1]:+.3f}]",
            ]
        lines.append("  ".join(f"{c:<{w}}" for c, w in zip(cells, widths)))
    return "\n".join(lines)


def run_experiment(world_dir, exp: Experiment, seed: int, out_dir, world=None, base_config: dict | None = None):
    """Train and evaluate one matrix entry against the teacher; returns ``(manifest, report)``."""
    world = world or so.load_world(world_dir)
    values = dict(base_config or {})
    values.update(exp.overrides)
    values["seed"] = seed
    train_config = tr.TrainConfig.from_dict(values)
    mapper_config = resolve_mapper(world.config, {}, seed)
    run_dir = Path(out_dir) / exp.name / f"seed{seed}"
    manifest = cmd_train(world_dir, train_config, run_dir, mapper_config, exp.name, exp.group, world=world)
    report = cmd_eval(
        run_dir / "best.hsph", world_dir, "teacher", run_dir / "eval", seed=seed, system=exp.name, world=world
    )
    return manifest, report


def cmd_ablate(world_dir, matrix=None, out_dir=None, seeds=(0,), base_config: dict | None = None) -> list:
    """Run every experiment sequentially; a failing run is recorded and the matrix continues."""
    world = so.load_world(world_dir)
    experiments = list(matrix if matrix is not None else DEFAULT_MATRIX)
    out = Path(out_dir)
    rows = []
    for exp in experiments:
        for seed in seeds:
            log.info("ablation %s (group %s) seed %d", exp.name, exp.group, seed)
            try:
                manifest, report = run_experiment(world_dir, exp, seed, out, world, base_config)
                rows.append(_ablation_row(exp, seed, manifest, report, None))
            except HsprojError as exc:
                log.error("ablation %s seed %d failed: %s", exp.name, seed, exc)
                rows.append(_ablation_row(exp, seed, None, None, f"{type(exc).__name__}: {exc}"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps({"rows": rows}, indent=2) + "\n", encoding="utf-8")
    (out / "ablation.txt").write_text(render_ablation(rows) + "\n", encoding="utf-8")
    return rows


def cmd_report(path) -> str:
    path = Path(path)
    if path.is_dir():
        for name in ("ablation.json", "report.json", "eval/report.json"):
            if (path / name).exists():
                path = path / name
                break
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{path}: no such report") from None
    except ValueError as exc:
        raise DataError(f"{path}: not JSON ({exc})") from exc
    if "rows" in data:
        return render_ablation(data["rows"])
    if "per_trigger" in data and "metrics" in data:
        ours = [PerTriggerResult(**r) for r in data["per_trigger"]]
        lines = [f"{data['system']}: " + ", ".join(f"{m}={data['metrics'][m]:.3f}" for m in METRICS)]
        if "baseline" in data:
            lines = [_render_saved(data)]
        lines.append(f"triggers: {len(ours)} ({len(data['excluded_triggers'])} without qrels)")
        return "\n".join(lines)
    raise DataError(f"{path}: unrecognised report")


def _render_saved(data: dict) -> str:
    rows = [f"{'':<12}" + "".join(f"{m:>18}" for m in METRICS)]
    rows.append(f"{data['baseline'][:12]:<12}" + "".join(f"{data['baseline_metrics'][m]:>18.3f}" for m in METRICS))
    rows.append(f"{data['system'][:12]:<12}" + "".join(f"{data['metrics'][m]:>18.3f}" for m in METRICS))
    rows.append(f"{'delta':<12}" + "".join(f"{data['deltas'][m]:>+18.3f}" for m in METRICS))
    rows.append(
        f"{'95% CI':<12}"
        + "".join(f"{f'[{lo:+.3f}, {hi:+.3f}]':>18}" for lo, hi in (data["confidence_intervals"][m] for m in METRICS))
    )
    mc, wtl = data["mcnemar"], data["win_tie_loss"]
    rows.append(f"McNemar chi2 = {mc['chi2']:.2f}, p = {mc['p']:.4f} (b={mc['b']}, c={mc['c']})")
    rows.append(f"win/tie/loss = {wtl['wins']}/{wtl['ties']}/{wtl['losses']}, agreement {100 * wtl['agreement']:.1f}%")
    rows.append(f"retention (Recall@10) = {100 * data['retention']:.1f}%")
    return "\n".join(rows)


# -- argument parsing ------------------------------------------------------------------------------------

def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsproj", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic world")
    p.add_argument("--config", help="INI config ([world] section)")
    p.add_argument("--seed", type=int, help="override world seed")
    p.add_argument("--out", help="output dir (default $HSPROJ_CACHE_ROOT/worlds/seed<N>)")

    p = sub.add_parser("train", help="train a projection head")
    p.add_argument("--world", help="world directory from gen-data")
    p.add_argument("--config", help="INI config ([mapper], [train], [loss] sections)")
    p.add_argument("--seed", type=int, help="override training and init seed")
    p.add_argument("--out", help="output dir (default $HSPROJ_CACHE_ROOT/runs/train-seed<N>)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt if present")
    p.add_argument("--manifest", help="replay the run recorded in this manifest")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--baseline", help="'teacher' or a report.json from a previous eval")
    p.add_argument("--split", default="test", choices=so.SPLITS)
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.add_argument("--out", help="output dir for report.json / report.txt")

    p = sub.add_parser("ablate", help="run the ablation matrix")
    p.add_argument("--world", required=True)
    p.add_argument("--matrix", help="INI matrix file (default: built-in 12 configurations)")
    p.add_argument("--config", help="INI config whose [train]/[loss] values apply to every run")
    p.add_argument("--seeds", type=_parse_seeds, default=(0,), help="comma-separated seeds")
    p.add_argument("--out", help="output dir (default $HSPROJ_CACHE_ROOT/ablation)")

    p = sub.add_parser("report", help="render a saved eval report or ablation table")
    p.add_argument("path")
    return parser


def _dispatch(args) -> None:
    if args.command == "gen-data":
        values = read_config(args.config)["world"] if args.config else {}
        if args.seed is not None:
            values["seed"] = args.seed
        config = so.WorldConfig.from_dict(values)
        out = Path(args.out) if args.out else cache_root() / "worlds" / f"seed{config.seed}"
        world = cmd_gen_data(config, out)
        print(f"world written to {out}")
        for key, value in world.summary().items():
            print(f"  {key}: {value}")
    elif args.command == "train":
        if args.manifest:
            if not args.out:
                raise ConfigurationError("--manifest needs --out")
            manifest = replay(args.manifest, args.out)
        else:
            if not args.world:
                raise ConfigurationError("train needs --world (or --manifest)")
            cfg = read_config(args.config) if args.config else {"mapper": {}, "train": {}, "world": {}}
            if cfg["world"]:
                raise ConfigurationError("[world] settings belong to gen-data, not train")
            if args.seed is not None:
                cfg["train"]["seed"] = args.seed
            train_config = tr.TrainConfig.from_dict(cfg["train"])
            world = so.load_world(args.world)
            mapper_config = resolve_mapper(world.config, cfg["mapper"], train_config.seed)
            out = Path(args.out) if args.out else cache_root() / "runs" / f"train-seed{train_config.seed}"
            manifest = cmd_train(args.world, train_config, out, mapper_config, resume=args.resume, world=world)
        print(json.dumps({"status": manifest.status, **manifest.metrics}, indent=2))
    elif args.command == "eval":
        report = cmd_eval(args.checkpoint, args.world, args.baseline, args.out, args.split, args.seed)
        print(report.render_table())
    elif args.command == "ablate":
        matrix = read_matrix(args.matrix) if args.matrix else None
        base = read_config(args.config)["train"] if args.config else None
        out = Path(args.out) if args.out else cache_root() / "ablation"
        rows = cmd_ablate(args.world, matrix, out, args.seeds, base)
        print(render_ablation(rows))
    elif args.command == "report":
        print(cmd_report(args.path))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _dispatch(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CacheMiss, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeFailure as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
