"""Run configuration, content-addressed run directories, and the experiment grids.

A run configuration is one JSON document with the sections ``global``,
``phantom``, ``pipeline``, ``fae``, ``mtfs``, ``cfp``, ``translate``,
``metrics`` and ``matrix``. Values resolve as defaults <- preset <- config
file <- ``--set`` overrides. Unknown keys are rejected.

Each command writes ``out/runs/<command>-<hash>/`` holding ``config.json``,
``manifest.json``, logs and outputs. The hash covers the config sections the
command reads plus the hashes of its inputs, so a repeated request finds its
finished run and reuses it.
"""

from __future__ import annotations

import copy
import hashlib
import json
import subprocess
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import __version__
from .cfp import CfpConfig, style_loss
from .data import load_prepared, prepare_dataset
from .errors import ConfigurationError, ValidationError
from .fae import FaeConfig, freeze, load_fae
from .metrics import DEFAULT_METRICS, RegionRule, evaluate_pairs
from .mtfs import ABLATION_SUBSETS, MtfsConfig, train_mtfs
from .phantom import DEFAULT_HU_LEVELS, DatasetManifest, DegradationRanges, PhantomSpec, make_dataset
from .pipeline import save_volume
from .seeding import derive_seed
from .translate import TranslateConfig, infer as infer_volume, load_translation, train_translation, translate_slices

DEFAULTS: dict[str, dict[str, Any]] = {
    "global": {"seed": 0, "out_dir": "runs", "device": "cpu", "preset": "paper-shape", "torch_threads": 1},
    "phantom": {
        "n_pairs": 100,
        "image_size": 256,
        "n_slices": 1,
        "lung_count": 2,
        "vessel_tree_depth": 5,
        "lesion_present": True,
        "hu_levels": dict(DEFAULT_HU_LEVELS),
        "ranges": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(DegradationRanges()).items()},
    },
    "pipeline": {"out_size": 256, "use_true_rigid": False},
    "fae": FaeConfig().to_dict(),
    "mtfs": {
        "tasks": [1, 2, 3],
        "epochs": 20,
        "batch_size": 16,
        "lr": 1e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "alpha": 1.5,
        "lr_w": 0.025,
        "recovery_modalities": "both",
        "aug_rotation": 10.0,
        "aug_offset": 10.0,
        "reg_direction": "cbct_to_ct",
        "max_train_pairs": None,
    },
    "cfp": {"a": 0.5, "b": 0.5, "s1": 2, "s2": 4},
    "translate": {
        "model_kind": "unet",
        "loss_kind": "mse",
        "base_channels": 32,
        "res_blocks_per_level": [2, 4, 6, 8],
        "se_reduction": 16,
        "adv_weight": 0.01,
        "cycle_weight": 10.0,
        "paired_recon": True,
        "lr": 1e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "batch_size": 16,
        "epochs": 20,
        "max_train_pairs": None,
    },
    "metrics": {"metrics": list(DEFAULT_METRICS), "region_percentile": 70.0, "split": "test"},
    "matrix": {"grid": "table1", "replicates": 3},
}

PRESETS: dict[str, dict[str, Any]] = {
    "paper-shape": {},
    "desk": {
        "phantom": {"n_pairs": 667, "image_size": 64, "vessel_tree_depth": 4},
        "pipeline": {"out_size": 64},
        "fae": {"input_size": 64, "width_multiplier": 0.25, "blocks_per_stage": [1, 1, 3, 1], "residual_layers": 6},
        "mtfs": {"epochs": 12, "lr": 1e-3, "max_train_pairs": 200},
        "translate": {"base_channels": 8, "se_reduction": 4, "lr": 1e-3, "batch_size": 8, "epochs": 20, "max_train_pairs": 200},
    },
}

# config sections each command depends on (for run ids)
COMMAND_SECTIONS = {
    "phantom-gen": ("phantom",),
    "prep": ("pipeline",),
    "mtfs-train": ("fae", "mtfs"),
    "translate-train": ("translate", "cfp"),
    "infer": (),
    "eval": ("metrics",),
    "matrix": ("phantom", "pipeline", "fae", "mtfs", "cfp", "translate", "metrics", "matrix"),
}

TABLE1_ROWS = ("base", "unet-mse", "unet-cfp", "gan", "gan-cfp", "cyclegan", "cyclegan-cfp")
TABLE2_ROWS = ("cbct", "mse") + tuple("cfp-" + "".join(map(str, s)) for s in ABLATION_SUBSETS)
NON_COMPARABLE = "phantom-derived desk-scale numbers; not comparable to published clinical absolutes"


# --------------------------------------------------------------------------
# config


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _unknown_keys(doc: dict, schema: dict, prefix: str = "") -> list[str]:
    bad = []
    for k, v in doc.items():
        path = f"{prefix}{k}"
        if k not in schema:
            bad.append(path)
        elif isinstance(schema[k], dict) and isinstance(v, dict):
            bad.extend(_unknown_keys(v, schema[k], path + "."))
    return bad


def parse_override(item: str) -> dict:
    """``"mtfs.epochs=5"`` -> ``{"mtfs": {"epochs": 5}}`` (values parsed as JSON when possible)."""
    if "=" not in item:
        raise ValidationError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    cur = out
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def resolve_config(preset: str | None = None, file_doc: dict | None = None, overrides: Sequence[dict] = ()) -> dict:
    """Fully resolved config; raises listing every unknown key and bad value."""
    layers = [file_doc or {}, *overrides]
    chosen = preset
    for layer in layers:
        chosen = layer.get("global", {}).get("preset", chosen)
    chosen = chosen or DEFAULTS["global"]["preset"]
    if chosen not in PRESETS:
        raise ValidationError(f"unknown preset {chosen!r}; choose from {sorted(PRESETS)}")
    errors = []
    for layer in layers:
        errors.extend(_unknown_keys(layer, DEFAULTS))
    if errors:
        raise ValidationError("unknown config keys: " + ", ".join(sorted(set(errors))))
    cfg = _merge(DEFAULTS, PRESETS[chosen])
    for layer in layers:
        cfg = _merge(cfg, layer)
    cfg["global"]["preset"] = chosen
    problems = validate_config(cfg)
    if problems:
        raise ValidationError("invalid config: " + "; ".join(problems))
    return cfg


def validate_config(cfg: dict) -> list[str]:
    problems = []
    for name, build in (("phantom", phantom_spec), ("fae", fae_config), ("mtfs", mtfs_config), ("cfp", cfp_config), ("translate", translate_config)):
        try:
            obj = build(cfg)
            if hasattr(obj, "validate"):
                obj.validate()
        except (ValidationError, TypeError, ValueError) as exc:
            problems.append(f"{name}: {exc}")
    size = cfg["pipeline"]["out_size"]
    if cfg["fae"]["input_size"] != size:
        problems.append(f"fae.input_size={cfg['fae']['input_size']} must equal pipeline.out_size={size}")
    if cfg["matrix"]["grid"] not in ("table1", "table2"):
        problems.append(f"matrix.grid must be table1 or table2, got {cfg['matrix']['grid']!r}")
    if int(cfg["matrix"]["replicates"]) < 1:
        problems.append("matrix.replicates must be >= 1")
    bad_tasks = [t for t in cfg["mtfs"]["tasks"] if t not in (1, 2, 3)]
    if bad_tasks or not cfg["mtfs"]["tasks"]:
        problems.append(f"mtfs.tasks must be a non-empty subset of [1, 2, 3], got {cfg['mtfs']['tasks']}")
    unknown_metrics = [m for m in cfg["metrics"]["metrics"] if m not in DEFAULT_METRICS]
    if unknown_metrics:
        problems.append(f"unknown metrics {unknown_metrics}")
    return problems


def phantom_spec(cfg: dict) -> PhantomSpec:
    p = cfg["phantom"]
    return PhantomSpec(p["image_size"], p["n_slices"], p["lung_count"], p["vessel_tree_depth"], p["lesion_present"], dict(p["hu_levels"]))


def degradation_ranges(cfg: dict) -> DegradationRanges:
    r = cfg["phantom"]["ranges"]
    return DegradationRanges(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in r.items()})


def fae_config(cfg: dict) -> FaeConfig:
    return FaeConfig.from_dict(cfg["fae"])


def mtfs_config(cfg: dict) -> MtfsConfig:
    m = {k: v for k, v in cfg["mtfs"].items() if k != "tasks"}
    return MtfsConfig(fae=fae_config(cfg), **m)


def cfp_config(cfg: dict) -> CfpConfig:
    return CfpConfig(**cfg["cfp"])


def translate_config(cfg: dict, **changes) -> TranslateConfig:
    t = dict(cfg["translate"])
    t.update(changes)
    t["res_blocks_per_level"] = tuple(t["res_blocks_per_level"])
    return TranslateConfig(input_size=cfg["pipeline"]["out_size"], cfp=cfp_config(cfg), **t)


# --------------------------------------------------------------------------
# runs


def file_hash(path: str | Path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def source_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Run:
    """One command execution in a content-addressed directory."""

    def __init__(self, command: str, cfg: dict, inputs: dict[str, str | Path] | None = None, params: dict | None = None, root: str | Path | None = None):
        self.command = command
        self.cfg = cfg
        self.params = params or {}
        self.inputs = {k: {"path": str(v), "hash": file_hash(v)} for k, v in (inputs or {}).items()}
        key = {
            "command": command,
            "seed": cfg["global"]["seed"],
            "sections": {s: cfg[s] for s in COMMAND_SECTIONS[command]},
            "params": self.params,
            "inputs": {k: v["hash"] for k, v in self.inputs.items()},
        }
        digest = hashlib.sha256(json.dumps(key, sort_keys=True, default=str).encode()).hexdigest()[:16]
        self.run_id = f"{command}-{digest}"
        root = Path(root if root is not None else cfg["global"]["out_dir"])
        self.dir = root / "runs" / self.run_id
        self._t0 = None

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    def finished(self) -> dict | None:
        if self.manifest_path.exists():
            doc = json.loads(self.manifest_path.read_text())
            if doc.get("status") == "ok":
                return doc
        return None

    def start(self) -> "Run":
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_text(json.dumps(self.cfg, indent=2, sort_keys=True))
        self._t0 = time.time()
        torch.set_num_threads(int(self.cfg["global"]["torch_threads"]))
        return self

    def finish(self, outputs: dict, status: str = "ok", extra: dict | None = None) -> dict:
        t1 = time.time()
        doc = {
            "command": self.command,
            "run_id": self.run_id,
            "status": status,
            "params": self.params,
            "config": self.cfg,
            "source_version": source_version(),
            "inputs": self.inputs,
            "outputs": {k: str(Path(v).relative_to(self.dir)) if Path(v).is_absolute() or str(v).startswith(str(self.dir)) else str(v) for k, v in outputs.items()},
            "timings": {"start": self._t0, "end": t1, "seconds": t1 - (self._t0 or t1)},
            **(extra or {}),
        }
        self.manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
        return doc

    def output(self, doc: dict, key: str) -> Path:
        return self.dir / doc["outputs"][key]


def _run_or_reuse(run: Run, body, reuse: bool = True) -> tuple[Run, dict]:
    if reuse:
        done = run.finished()
        if done is not None:
            return run, done
    run.start()
    try:
        outputs, extra = body(run.dir)
    except Exception as exc:
        run.finish({}, status=f"failed: {type(exc).__name__}: {exc}")
        raise
    return run, run.finish(outputs, extra=extra)


# --------------------------------------------------------------------------
# commands


def cmd_phantom_gen(cfg: dict, reuse: bool = True, root=None) -> tuple[Run, dict]:
    run = Run("phantom-gen", cfg, root=root)

    def body(d: Path):
        m = make_dataset(cfg["phantom"]["n_pairs"], phantom_spec(cfg), degradation_ranges(cfg), d / "dataset", derive_seed(cfg["global"]["seed"], "phantom"))
        return {"dataset": d / "dataset"}, {"dataset_hash": m.content_hash(), "n_pairs": len(m.pairs)}

    return _run_or_reuse(run, body, reuse)


def cmd_prep(cfg: dict, dataset_dir: str | Path, reuse: bool = True, root=None) -> tuple[Run, dict]:
    dataset_dir = Path(dataset_dir)
    run = Run("prep", cfg, inputs={"dataset_manifest": dataset_dir / "manifest.json"}, root=root)

    def body(d: Path):
        manifest = DatasetManifest.load(dataset_dir)
        manifest.root = str(dataset_dir)
        doc = prepare_dataset(manifest, d / "prepared", cfg["pipeline"]["out_size"], cfg["pipeline"]["use_true_rigid"])
        splits = {s: sum(1 for e in doc["pairs"] if e["split"] == s) for s in ("train", "val", "test")}
        return {"prepared": d / "prepared"}, {"splits": splits}

    return _run_or_reuse(run, body, reuse)


def cmd_mtfs_train(cfg: dict, prepared_dir: str | Path, tasks: Sequence[int] | None = None, reuse: bool = True, root=None) -> tuple[Run, dict]:
    prepared_dir = Path(prepared_dir)
    tasks = sorted(tasks if tasks is not None else cfg["mtfs"]["tasks"])
    run = Run("mtfs-train", cfg, inputs={"prepared": prepared_dir / "prepared.json"}, params={"tasks": tasks}, root=root)

    def body(d: Path):
        train = load_prepared(prepared_dir, "train")
        res = train_mtfs(train, tasks, mtfs_config(cfg), derive_seed(cfg["global"]["seed"], "mtfs", *tasks), out_dir=d)
        return {"checkpoint": res.checkpoint, "log": d / "train_log.jsonl"}, {"final_epoch": res.log[-1]}

    return _run_or_reuse(run, body, reuse)


def cmd_translate_train(cfg: dict, prepared_dir: str | Path, fae_checkpoint: str | Path | None = None, model_kind: str | None = None, loss_kind: str | None = None, reuse: bool = True, root=None) -> tuple[Run, dict]:
    prepared_dir = Path(prepared_dir)
    changes = {k: v for k, v in (("model_kind", model_kind), ("loss_kind", loss_kind)) if v is not None}
    tcfg = translate_config(cfg, **changes)
    if tcfg.loss_kind == "cfp" and fae_checkpoint is None:
        raise ConfigurationError("translate train with loss_kind=cfp needs --fae CHECKPOINT")
    inputs = {"prepared": prepared_dir / "prepared.json"}
    if fae_checkpoint is not None and tcfg.loss_kind == "cfp":
        inputs["fae"] = Path(fae_checkpoint)
    run = Run("translate-train", cfg, inputs=inputs, params=changes, root=root)

    def body(d: Path):
        train = load_prepared(prepared_dir, "train")
        fae = inputs.get("fae")
        res = train_translation(train, fae, tcfg, derive_seed(cfg["global"]["seed"], "translate", tcfg.model_kind, tcfg.loss_kind), out_dir=d)
        return {"checkpoint": res.checkpoint, "log": d / "train_log.jsonl"}, {"final_epoch": res.log[-1]}

    return _run_or_reuse(run, body, reuse)


def cmd_infer(cfg: dict, checkpoint: str | Path, prepared_dir: str | Path, split: str | None = None, reuse: bool = True, root=None) -> tuple[Run, dict]:
    prepared_dir = Path(prepared_dir)
    split = split or cfg["metrics"]["split"]
    run = Run("infer", cfg, inputs={"checkpoint": checkpoint, "prepared": prepared_dir / "prepared.json"}, params={"split": split}, root=root)

    def body(d: Path):
        from .pipeline import load_volume

        model = load_translation(checkpoint)
        doc = json.loads((prepared_dir / "prepared.json").read_text())
        n = 0
        for e in doc["pairs"]:
            if e["split"] != split:
                continue
            cb = load_volume(prepared_dir / e["id"] / "cbct")
            save_volume(infer_volume(model, cb), d / "sct" / e["id"])
            n += 1
        return {"sct": d / "sct"}, {"n_volumes": n}

    return _run_or_reuse(run, body, reuse)


def cmd_eval(cfg: dict, prepared_dir: str | Path, checkpoint: str | Path, reuse: bool = True, root=None) -> tuple[Run, dict]:
    prepared_dir = Path(prepared_dir)
    inputs = {"prepared": prepared_dir / "prepared.json"}
    params = {}
    if str(checkpoint) == "identity":
        params["model"] = "identity"
    else:
        inputs["checkpoint"] = Path(checkpoint)
    run = Run("eval", cfg, inputs=inputs, params=params, root=root)

    def body(d: Path):
        data = load_prepared(prepared_dir, cfg["metrics"]["split"])
        report = evaluate_pairs(data, checkpoint, cfg["metrics"]["metrics"], RegionRule(cfg["metrics"]["region_percentile"]))
        csv_path, json_path = report.write(d)
        return {"csv": csv_path, "aggregate": json_path}, {"aggregate": report.aggregate()}

    return _run_or_reuse(run, body, reuse)


# --------------------------------------------------------------------------
# matrix


def _read_report(path: Path) -> list[dict]:
    import csv

    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [{k: (v if k == "pair_id" else float(v)) for k, v in r.items()} for r in rows]


def level4_style(fae_path: str | Path, prepared_dir: Path, checkpoint: str | Path, split: str) -> float:
    """Mean level-4 style loss between sCT and CT under the given loss net."""
    fae = freeze(load_fae(fae_path))
    data = load_prepared(prepared_dir, split)
    if str(checkpoint) == "identity":
        sct = data.cbct
    else:
        sct = translate_slices(load_translation(checkpoint).generator, data.cbct)
    vals = []
    with torch.no_grad():
        for i in range(0, len(data), 64):
            a = fae(torch.from_numpy(np.ascontiguousarray(sct[i : i + 64])).unsqueeze(1))[3]
            b = fae(torch.from_numpy(data.ct[i : i + 64]).unsqueeze(1))[3]
            for k in range(len(a)):
                vals.append(float(style_loss(a[k], b[k])))
    return float(np.mean(vals))


def _row_spec(grid: str, row: str) -> tuple[str, str, tuple | None] | None:
    """(model_kind, loss_kind, fae task subset) for a matrix row; None for baselines."""
    if grid == "table1":
        if row == "base":
            return None
        kind, _, loss = row.partition("-")
        return kind, (loss or "mse"), ((1, 2, 3) if loss == "cfp" else None)
    if row == "cbct":
        return None
    if row == "mse":
        return "unet", "mse", None
    return "unet", "cfp", tuple(int(c) for c in row.split("-")[1])


def cmd_matrix(cfg: dict, grid: str | None = None, reuse: bool = True, root=None, rows: Sequence[str] | None = None) -> tuple[Run, dict]:
    """Run a Table-1 (model grid) or Table-2 (ablation grid) experiment.

    Cells that fail are recorded with their error and the grid continues.
    """
    grid = grid or cfg["matrix"]["grid"]
    all_rows = TABLE1_ROWS if grid == "table1" else TABLE2_ROWS
    rows = tuple(rows) if rows is not None else all_rows
    root = Path(root if root is not None else cfg["global"]["out_dir"])
    run = Run("matrix", cfg, params={"grid": grid, "rows": list(rows)}, root=root)

    def body(d: Path):
        _, gen = cmd_phantom_gen(cfg, reuse, root)
        prep_run, prep = cmd_prep(cfg, Run("phantom-gen", cfg, root=root).dir / gen["outputs"]["dataset"], reuse, root)
        prepared = prep_run.output(prep, "prepared")
        split = cfg["metrics"]["split"]
        cells = []
        n_rep = int(cfg["matrix"]["replicates"])
        for rep in range(n_rep):
            rep_cfg = copy.deepcopy(cfg)
            rep_cfg["global"]["seed"] = derive_seed(cfg["global"]["seed"], "replicate", rep) if rep else cfg["global"]["seed"]
            ref_fae = None
            for row in rows:
                cell = {"row": row, "replicate": rep, "seed": rep_cfg["global"]["seed"]}
                try:
                    spec = _row_spec(grid, row)
                    fae_path = None
                    if spec is None:
                        ckpt = "identity"
                    else:
                        kind, loss, tasks = spec
                        if tasks is not None:
                            mrun, mdoc = cmd_mtfs_train(rep_cfg, prepared, tasks, reuse, root)
                            fae_path = mrun.output(mdoc, "checkpoint")
                            cell["mtfs_run"] = mrun.run_id
                        trun, tdoc = cmd_translate_train(rep_cfg, prepared, fae_path, kind, loss, reuse, root)
                        ckpt = trun.output(tdoc, "checkpoint")
                        cell["translate_run"] = trun.run_id
                    erun, edoc = cmd_eval(rep_cfg, prepared, ckpt, reuse, root)
                    cell["eval_run"] = erun.run_id
                    per_pair = _read_report(erun.output(edoc, "csv"))
                    prefix = "base_" if spec is None else "sct_"
                    for m in cfg["metrics"]["metrics"]:
                        cell[m] = float(np.mean([r[prefix + m] for r in per_pair]))
                    cell["_pairs"] = [{m: r[prefix + m] for m in cfg["metrics"]["metrics"]} for r in per_pair]
                    if ref_fae is None:
                        mrun, mdoc = cmd_mtfs_train(rep_cfg, prepared, (1, 2, 3), reuse, root)
                        ref_fae = mrun.output(mdoc, "checkpoint")
                    cell["style_l4"] = level4_style(ref_fae, prepared, ckpt, split)
                    cell["status"] = "ok"
                except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
                    cell["status"] = f"failed: {type(exc).__name__}: {exc}"
                cells.append(cell)
        table = _combine(cells, rows, cfg["metrics"]["metrics"])
        cells_path = d / "matrix_cells.csv"
        table_path = d / "matrix_table.csv"
        _write_cells(cells_path, cells, cfg["metrics"]["metrics"])
        _write_table(table_path, table, cfg["metrics"]["metrics"], grid)
        statuses = {f"{c['row']}#{c['replicate']}": c["status"] for c in cells}
        extra = {"grid": grid, "cells": [{k: v for k, v in c.items() if k != "_pairs"} for c in cells], "cell_status": statuses,
                 "prep_run": prep_run.run_id, "note": NON_COMPARABLE}
        return {"cells": cells_path, "table": table_path}, extra

    return _run_or_reuse(run, body, reuse)


def _combine(cells: list[dict], rows: Sequence[str], metrics: Sequence[str]) -> list[dict]:
    out = []
    for row in rows:
        ok = [c for c in cells if c["row"] == row and c["status"] == "ok"]
        rec = {"row": row, "n_ok": len(ok), "n_cells": sum(1 for c in cells if c["row"] == row)}
        for m in list(metrics) + ["style_l4"]:
            if not ok:
                rec[m + "_mean"] = float("nan")
                rec[m + "_std"] = float("nan")
                continue
            rec[m + "_mean"] = float(np.mean([c[m] for c in ok]))
            if m == "style_l4":
                rec[m + "_std"] = float(np.std([c[m] for c in ok], ddof=1)) if len(ok) > 1 else 0.0
            else:
                pooled = [p[m] for c in ok for p in c["_pairs"]]
                rec[m + "_std"] = float(np.std(pooled, ddof=1)) if len(pooled) > 1 else 0.0
        out.append(rec)
    return out


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_cells(path: Path, cells: list[dict], metrics: Sequence[str]) -> None:
    cols = ["row", "replicate", "seed", "status"] + list(metrics) + ["style_l4"]
    lines = [f"# {NON_COMPARABLE}", ",".join(cols)]
    for c in cells:
        lines.append(",".join(_fmt(c.get(k, "")) if k != "status" else json.dumps(c[k]) for k in cols))
    path.write_text("\n".join(lines) + "\n")


def _write_table(path: Path, table: list[dict], metrics: Sequence[str], grid: str) -> None:
    cols = ["row", "n_ok", "n_cells"] + [f"{m}_{s}" for m in list(metrics) + ["style_l4"] for s in ("mean", "std")]
    lines = [f"# grid: {grid}", f"# {NON_COMPARABLE}", "# mean: mean over replicates of per-pair means; std: sample std over pooled pairs", ",".join(cols)]
    for r in table:
        lines.append(",".join(_fmt(r[k]) for k in cols))
    path.write_text("\n".join(lines) + "\n")


def read_table(path: str | Path) -> dict[str, dict]:
    import csv

    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    out = {}
    for r in csv.DictReader(lines):
        out[r["row"]] = {k: (v if k == "row" else float(v)) for k, v in r.items()}
    return out


# --------------------------------------------------------------------------
# re-execution


COMMANDS = {
    "phantom-gen": lambda cfg, m, root: cmd_phantom_gen(cfg, False, root),
    "prep": lambda cfg, m, root: cmd_prep(cfg, Path(m["inputs"]["dataset_manifest"]["path"]).parent, False, root),
    "mtfs-train": lambda cfg, m, root: cmd_mtfs_train(cfg, Path(m["inputs"]["prepared"]["path"]).parent, m["params"]["tasks"], False, root),
    "translate-train": lambda cfg, m, root: cmd_translate_train(
        cfg, Path(m["inputs"]["prepared"]["path"]).parent, m["inputs"].get("fae", {}).get("path"),
        m["params"].get("model_kind"), m["params"].get("loss_kind"), False, root),
    "infer": lambda cfg, m, root: cmd_infer(cfg, m["inputs"]["checkpoint"]["path"], Path(m["inputs"]["prepared"]["path"]).parent, m["params"]["split"], False, root),
    "eval": lambda cfg, m, root: cmd_eval(
        cfg, Path(m["inputs"]["prepared"]["path"]).parent,
        m["params"].get("model") or m["inputs"]["checkpoint"]["path"], False, root),
    "matrix": lambda cfg, m, root: cmd_matrix(cfg, m["params"]["grid"], False, root, m["params"]["rows"]),
}


def rerun(manifest_path: str | Path, root: str | Path) -> tuple[Run, dict]:
    """Execute the run described by ``manifest_path`` again under ``root``.

    Inputs are read from the paths recorded in the manifest; their hashes
    must still match.
    """
    m = json.loads(Path(manifest_path).read_text())
    for name, inp in m.get("inputs", {}).items():
        if file_hash(inp["path"]) != inp["hash"]:
            raise ConfigurationError(f"input {name} at {inp['path']} changed since the run was recorded")
    cfg = m["config"]
    return COMMANDS[m["command"]](cfg, m, root)
