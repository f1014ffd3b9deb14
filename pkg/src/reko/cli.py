"""Command-line driver: ``reko <command> [--config c.json] [--set k=v ...] [--out DIR]``.

Every run writes into ``<out>/<command>-<hash12>-<timestamp>/`` the exact
config it used (``config.json``), its artifacts, and ``run.json``, a manifest
with artifact checksums that is written last. Downstream commands find their
inputs either from ``paths.*`` in the config or as the most recent completed
run whose config hash matches.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import kernels
from .attention import attention_map
from .evaluation import (
    MetricsReport,
    diagonality,
    localization_iou,
    quality_metrics,
    predict,
    save_attention_pgm,
    save_panel_ppm,
    save_similarity_pgm,
    stability_score,
)
from .losses import DistillConfig, ProjectionHead, ProjectionHeads, make_heads, similarity_map
from .serialize import file_sha256, load_checkpoint
from .synth import generate_dataset, load_dataset
from .tensor import Tensor, no_grad
from .trainer import (
    RunRecord,
    TeacherCache,
    TrainConfig,
    canonical_json,
    distill_student,
    format_table,
    load_generator,
    run_ablation_grid,
    run_sensitivity_sweep,
    save_generator,
    summarize,
    train_teacher,
)

log = logging.getLogger("reko")

COMMANDS = ("gen-data", "train-teacher", "distill", "ablate", "sweep", "eval", "viz")
RUN_MANIFEST = "run.json"

_TRAIN_DEFAULTS = {k: v for k, v in TrainConfig().to_dict().items() if k != "distill"}

DEFAULT_CONFIG = {
    "data": {"seed": 0, "n_train": 512, "n_eval": 64},
    "train": _TRAIN_DEFAULTS,
    "teacher": {},
    "distill": DistillConfig().to_dict(),
    "ablate": {"seeds": [0, 1, 2, 3, 4]},
    "sweep": {"alphas": [0.5, 1.0, 2.0, 4.0], "ks": [8, 16, 32], "seeds": [0]},
    "eval": {"k": 16, "n_diag": 32},
    "viz": {"samples": 4, "query_region": 27},
    "paths": {"data": None, "teacher": None, "student": None},
}

# config sections each command depends on; these alone are hashed
SECTIONS = {
    "gen-data": ("data",),
    "train-teacher": ("data", "train", "teacher", "paths"),
    "distill": ("data", "train", "teacher", "distill", "paths"),
    "ablate": ("data", "train", "teacher", "distill", "ablate", "paths"),
    "sweep": ("data", "train", "teacher", "distill", "sweep", "paths"),
    "eval": ("data", "train", "teacher", "distill", "eval", "paths"),
    "viz": ("data", "train", "teacher", "distill", "viz", "paths"),
}


class UsageError(Exception):
    """Bad flags or config; exit code 2."""


# -- config ------------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"--set expects KEY=VALUE, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"--set {key}: unknown config section {p!r}")
        node = node[p]
    leaf = parts[-1]
    # the teacher section holds optional overrides of train fields
    allowed = leaf in node or (parts[:-1] == ["teacher"] and leaf in _TRAIN_DEFAULTS)
    if not allowed:
        raise UsageError(f"--set {key}: unknown config key")
    node[leaf] = _parse_value(raw)


def _merge(base: dict, update: dict, where: str = "") -> None:
    for k, v in update.items():
        path = f"{where}{k}"
        if where == "teacher.":
            if k not in _TRAIN_DEFAULTS:
                raise UsageError(f"config: unknown key {path!r}")
            base[k] = v
        elif k not in base:
            raise UsageError(f"config: unknown key {path!r}")
        elif isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config: {path!r} must be an object")
            _merge(base[k], v, path + ".")
        else:
            base[k] = v


def load_config(path, overrides=(), seed=None, command=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(user, dict):
            raise UsageError(f"config {path} must be a JSON object")
        _merge(cfg, user)
    for o in overrides:
        apply_override(cfg, o)
    if seed is not None:
        _apply_seed(cfg, seed, command)
    _validate(cfg)
    return cfg


def _apply_seed(cfg: dict, seed: int, command) -> None:
    if command == "gen-data":
        cfg["data"]["seed"] = seed
    elif command in ("ablate", "sweep"):
        cfg[command]["seeds"] = [seed]
    else:
        cfg["train"]["seed"] = seed


def _validate(cfg: dict) -> None:
    try:
        teacher_config(cfg)
        student_config(cfg)
        d = cfg["data"]
        for k in ("seed", "n_train", "n_eval"):
            if not isinstance(d[k], int) or isinstance(d[k], bool):
                raise ValueError(f"data.{k} must be an integer")
        if d["n_train"] < 1 or d["n_eval"] < 1:
            raise ValueError("data.n_train and data.n_eval must be positive")
        for name in ("ablate", "sweep"):
            if not cfg[name]["seeds"]:
                raise ValueError(f"{name}.seeds must be non-empty")
        if not cfg["sweep"]["alphas"] or not cfg["sweep"]["ks"]:
            raise ValueError("sweep.alphas and sweep.ks must be non-empty")
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad config: {e}") from None


def teacher_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], **cfg["teacher"]})


def student_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], "distill": cfg["distill"]})


def command_config(cfg: dict, command: str) -> dict:
    return {k: cfg[k] for k in SECTIONS[command]}


def command_hash(cfg: dict, command: str) -> str:
    return hashlib.sha256((canonical_json(command_config(cfg, command)) + "\n").encode()).hexdigest()


# -- run directories -------------------------------------------------------------------


def _read_manifest(run_dir: Path):
    try:
        return json.loads((run_dir / RUN_MANIFEST).read_text())
    except (OSError, json.JSONDecodeError):
        return None


def find_runs(out_root: Path, command: str, chash: str) -> list[Path]:
    """Completed runs of ``command`` with config hash ``chash``, oldest first."""
    if not out_root.is_dir():
        return []
    found = []
    for d in out_root.glob(f"{command}-{chash[:12]}-*"):
        m = _read_manifest(d)
        if m and m.get("status") == "complete" and m.get("config_hash") == chash:
            found.append((m.get("finished", ""), d.name, d))
    return [d for _, _, d in sorted(found)]


def _new_run_dir(out_root: Path, command: str, chash: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = out_root / f"{command}-{chash[:12]}-{stamp}"
    d, n = base, 1
    while d.exists():
        d = Path(f"{base}-{n}")
        n += 1
    d.mkdir(parents=True)
    return d


def artifact_checksums(run_dir: Path) -> dict:
    return {
        p.relative_to(run_dir).as_posix(): file_sha256(p)
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p.name != RUN_MANIFEST and not p.name.endswith(".tmp")
    }


def write_run_manifest(run_dir: Path, command: str, config_path, chash: str, status: str, inputs: dict, started: float):
    manifest = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "config_hash": chash,
        "output_dir": str(run_dir),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "artifacts": artifact_checksums(run_dir),
        "status": status,
        "exit_code": 0 if status == "complete" else 1,
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "backend": kernels.BACKEND,
    }
    tmp = run_dir / (RUN_MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, run_dir / RUN_MANIFEST)
    return manifest


# -- input resolution ----------------------------------------------------------------------


def _resolve(cfg: dict, out_root: Path, key: str, command: str) -> Path:
    """Directory holding the input ``key`` (data / teacher / student)."""
    explicit = cfg["paths"][key]
    if explicit:
        return Path(explicit)
    runs = find_runs(out_root, command, command_hash(cfg, command))
    if not runs:
        raise FileNotFoundError(
            f"no {key} given (paths.{key}) and no completed '{command}' run with a matching config under {out_root}"
        )
    return runs[-1]


def _data_dir(run_or_data: Path) -> Path:
    return run_or_data / "data" if (run_or_data / "data" / "manifest.json").exists() else run_or_data


def _checkpoint_dir(run_or_ckpt: Path) -> Path:
    ckpt = run_or_ckpt / "checkpoint"
    return ckpt if ckpt.is_dir() else run_or_ckpt


def _load_data(cfg, out_root):
    d = _data_dir(_resolve(cfg, out_root, "data", "gen-data"))
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"dataset manifest not found: {d / 'manifest.json'}")
    return d, load_dataset(d)


def _load_model(cfg, out_root, key, command):
    src = _resolve(cfg, out_root, key, command)
    ckpt = _checkpoint_dir(src)
    if not (ckpt / "manifest.json").exists():
        raise FileNotFoundError(f"{key} checkpoint not found: {ckpt}")
    return src, load_generator(ckpt)


# -- commands -------------------------------------------------------------------------------


def cmd_gen_data(cfg, out_root, run_dir):
    d = cfg["data"]
    generate_dataset(d["seed"], d["n_train"], d["n_eval"], run_dir / "data")
    return {}


def cmd_train_teacher(cfg, out_root, run_dir):
    data_dir, ds = _load_data(cfg, out_root)
    teacher, record = train_teacher(teacher_config(cfg), ds)
    save_generator(run_dir / "checkpoint", teacher)
    record.write(run_dir / "train")
    return {"data": data_dir}


def cmd_distill(cfg, out_root, run_dir):
    data_dir, ds = _load_data(cfg, out_root)
    teacher_dir, teacher = _load_model(cfg, out_root, "teacher", "train-teacher")
    _, record, _ = distill_student(student_config(cfg), teacher, ds, run_dir)
    record.write(run_dir / "train")
    return {"data": data_dir, "teacher": teacher_dir}


def _grid_outputs(run_dir, rows, keys, name):
    for r in rows:
        sub = run_dir / "runs" / "-".join(f"{k}{r[k]}" for k in keys + ("seed",))
        r["record"].write(sub)
        save_generator(sub / "checkpoint", r["student"])
    table = format_table(summarize(rows, keys), keys)
    summary = [
        {**{k: r[k] for k in keys + ("seed", "config_hash")}, **{m: r[m] for m in ("fg_mse", "bg_mse", "psnr")}}
        for r in rows
    ]
    (run_dir / f"{name}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (run_dir / f"{name}.txt").write_text(table + "\n")
    print(table)


def cmd_ablate(cfg, out_root, run_dir):
    data_dir, ds = _load_data(cfg, out_root)
    teacher_dir, teacher = _load_model(cfg, out_root, "teacher", "train-teacher")
    cache = TeacherCache.build(teacher, ds.train.inputs)
    rows = run_ablation_grid(student_config(cfg), teacher, ds, tuple(cfg["ablate"]["seeds"]), cache)
    _grid_outputs(run_dir, rows, ("baseline",), "ablation")
    return {"data": data_dir, "teacher": teacher_dir}


def cmd_sweep(cfg, out_root, run_dir):
    data_dir, ds = _load_data(cfg, out_root)
    teacher_dir, teacher = _load_model(cfg, out_root, "teacher", "train-teacher")
    cache = TeacherCache.build(teacher, ds.train.inputs)
    sw = cfg["sweep"]
    rows = run_sensitivity_sweep(student_config(cfg), teacher, ds, sw["alphas"], sw["ks"], tuple(sw["seeds"]), cache)
    _grid_outputs(run_dir, rows, ("alpha", "k"), "sweep")
    return {"data": data_dir, "teacher": teacher_dir}


def _student_and_heads(cfg, out_root):
    student_dir, student = _load_model(cfg, out_root, "student", "distill")
    heads_dir = student_dir / "heads"
    dc = DistillConfig(**cfg["distill"])
    heads = None
    if (heads_dir / "manifest.json").exists():
        params, _ = load_checkpoint(heads_dir)
        heads = ProjectionHeads(ProjectionHead.from_weight(params["student"]), ProjectionHead.from_weight(params["teacher"]))
    return student_dir, student, heads, dc


def cmd_eval(cfg, out_root, run_dir):
    data_dir, ds = _load_data(cfg, out_root)
    teacher_dir, teacher = _load_model(cfg, out_root, "teacher", "train-teacher")
    student_dir, student, heads, dc = _student_and_heads(cfg, out_root)
    if heads is None:
        heads = make_heads(student.spec.bottleneck_channels, teacher.spec.bottleneck_channels, dc.embed_dim, dc.head_seed)
    q = quality_metrics(student, ds.eval)
    ev = cfg["eval"]
    iou = float(np.mean(localization_iou(teacher, ds.eval, ev["k"])))
    diag = diagonality(student, teacher, ds.eval.inputs[: ev["n_diag"]], heads)
    variance = None
    rec_dir = student_dir / "train"
    if (rec_dir / "record.jsonl").exists():
        rec = RunRecord.read(rec_dir)
        if len(rec.series("fg_mse")) >= 6:
            variance = stability_score(rec)
    teacher_q = quality_metrics(teacher, ds.eval)
    report = MetricsReport(
        q["fg_mse"], q["bg_mse"], q["psnr"], region_iou=iou, diagonality=diag, metric_variance=variance,
        extra={"teacher_fg_mse": teacher_q["fg_mse"], "teacher_psnr": teacher_q["psnr"], "mse": q["mse"]},
    )
    report.to_json(run_dir / "metrics.json")
    print(report.to_json())
    return {"data": data_dir, "teacher": teacher_dir, "student": student_dir}


def cmd_viz(cfg, out_root, run_dir):
    data_dir, ds = _load_data(cfg, out_root)
    teacher_dir, teacher = _load_model(cfg, out_root, "teacher", "train-teacher")
    student_dir, student, heads, dc = _student_and_heads(cfg, out_root)
    if heads is None:
        heads = make_heads(student.spec.bottleneck_channels, teacher.spec.bottleneck_channels, dc.embed_dim, dc.head_seed)
    v = cfg["viz"]
    n = min(int(v["samples"]), len(ds.eval))
    grid = (teacher.spec.bottleneck_size,) * 2
    if not 0 <= v["query_region"] < grid[0] * grid[1]:
        raise ValueError(f"viz.query_region {v['query_region']} outside the {grid[0]}x{grid[1]} grid")
    x = ds.eval.inputs[:n]
    with no_grad():
        ft = teacher.encode(Tensor(x))
        fs = student.encode(Tensor(x))
    ft = ft.data.reshape(n, ft.shape[1], -1)
    fs = fs.data.reshape(n, fs.shape[1], -1)
    att = attention_map(Tensor(ft)).data
    s_out, t_out = predict(student, x), predict(teacher, x)
    for i in range(n):
        save_attention_pgm(run_dir / f"attention_{i:02d}.pgm", att[i], grid)
        sim = similarity_map(Tensor(fs[i]), Tensor(ft[i]), v["query_region"], heads)
        save_similarity_pgm(run_dir / f"similarity_{i:02d}.pgm", sim, grid)
        save_panel_ppm(run_dir / f"panel_{i:02d}.ppm", x[i], s_out[i], t_out[i], ds.eval.targets[i])
    return {"data": data_dir, "teacher": teacher_dir, "student": student_dir}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "viz": cmd_viz,
}


# -- entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reko", description="Region-aware distillation experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "gen-data": "generate the synthetic paired dataset",
        "train-teacher": "train the wide teacher generator",
        "distill": "distill a student from a trained teacher",
        "ablate": "run the crucial-region / contrastive ablation grid",
        "sweep": "run the alpha x K sensitivity sweep",
        "eval": "evaluate a distilled student",
        "viz": "write attention, similarity and output images",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value by dotted path (repeatable)")
        p.add_argument("--out", type=Path, default=Path("runs"), help="root directory for run outputs")
        p.add_argument("--seed", type=int, help="override the command's seed")
        p.add_argument("--force", action="store_true", help="rerun even if an identical run completed")
        p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    return parser


def _threads_env() -> None:
    raw = os.environ.get("REKO_THREADS")
    if raw is None:
        return
    try:
        ok = int(raw) >= 1
    except ValueError:
        ok = False
    if not ok:
        raise UsageError(f"REKO_THREADS must be a positive integer, got {raw!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        _threads_env()
        cfg = load_config(args.config, args.overrides, args.seed, args.command)
    except UsageError as e:
        print(f"reko {args.command}: error: {e}", file=sys.stderr)
        return 2

    chash = command_hash(cfg, args.command)
    out_root = args.out
    done = find_runs(out_root, args.command, chash)
    if done and not args.force:
        print(
            f"reko {args.command}: error: identical run already completed at {done[-1]}; pass --force to rerun",
            file=sys.stderr,
        )
        return 2

    started = time.time()
    run_dir = _new_run_dir(out_root, args.command, chash)
    (run_dir / "config.json").write_text(canonical_json(command_config(cfg, args.command)) + "\n")
    try:
        inputs = HANDLERS[args.command](cfg, out_root, run_dir)
    except Exception as e:  # any runtime failure: record it, report it, exit 1
        log.debug("run failed", exc_info=True)
        write_run_manifest(run_dir, args.command, args.config, chash, "failed", {}, started)
        print(f"reko {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    write_run_manifest(run_dir, args.command, args.config, chash, "complete", inputs, started)
    print(run_dir)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
