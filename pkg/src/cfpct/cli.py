"""Command line front end for the harness.

    cfpct phantom gen    [--config F] [--seed N] [--out DIR] [--preset desk|paper-shape] [--set k=v ...]
    cfpct prep run       --dataset DIR
    cfpct mtfs train     --prepared DIR [--tasks 123]
    cfpct translate train --prepared DIR [--model unet|gan|cyclegan] [--loss mse|cfp] [--fae CKPT]
    cfpct infer          --prepared DIR --checkpoint CKPT [--split test]
    cfpct eval           --prepared DIR --checkpoint CKPT|identity
    cfpct matrix         [--grid table1|table2]
    cfpct rerun          MANIFEST [--out DIR]

Each command prints the run directory. Exit status is 0 only when the run
finished and (for ``matrix``) every cell succeeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .errors import ConfigurationError, TrainingError, ValidationError

log = logging.getLogger("cfpct")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--out", help="output root (run directories go under OUT/runs)")
    p.add_argument("--preset", choices=sorted(harness.PRESETS))
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (JSON-parsed); repeatable")
    p.add_argument("--no-reuse", action="store_true", help="execute even if an identical finished run exists")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfpct", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    phantom = sub.add_parser("phantom").add_subparsers(dest="action", required=True)
    _common(phantom.add_parser("gen", help="generate a phantom CT/CBCT dataset"))

    prep = sub.add_parser("prep").add_subparsers(dest="action", required=True)
    p = prep.add_parser("run", help="align, mask, crop, clip and convert a dataset")
    _common(p)
    p.add_argument("--dataset", type=Path, required=True)

    mtfs = sub.add_parser("mtfs").add_subparsers(dest="action", required=True)
    p = mtfs.add_parser("train", help="pre-train the FAE on a task subset")
    _common(p)
    p.add_argument("--prepared", type=Path, required=True)
    p.add_argument("--tasks", help="task subset, e.g. 123 or 2")

    tr = sub.add_parser("translate").add_subparsers(dest="action", required=True)
    p = tr.add_parser("train", help="train a CBCT->CT translator")
    _common(p)
    p.add_argument("--prepared", type=Path, required=True)
    p.add_argument("--model", choices=["unet", "gan", "cyclegan"])
    p.add_argument("--loss", choices=["mse", "cfp"])
    p.add_argument("--fae", type=Path, help="FAE checkpoint (required for --loss cfp)")

    p = sub.add_parser("infer", help="translate CBCT volumes of one split")
    _common(p)
    p.add_argument("--prepared", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val", "test"])

    p = sub.add_parser("eval", help="per-pair metrics for a translator (or 'identity')")
    _common(p)
    p.add_argument("--prepared", type=Path, required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("matrix", help="run the Table-1 or Table-2 grid")
    _common(p)
    p.add_argument("--grid", choices=["table1", "table2"])

    p = sub.add_parser("rerun", help="re-execute a recorded run from its manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", required=True)
    return ap


def resolve(args) -> dict:
    file_doc = json.loads(args.config.read_text()) if args.config else {}
    overrides = [harness.parse_override(s) for s in args.overrides]
    flags = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.out is not None:
        flags["out_dir"] = args.out
    if flags:
        overrides.append({"global": flags})
    return harness.resolve_config(args.preset, file_doc, overrides)


def dispatch(args, cfg: dict):
    reuse = not args.no_reuse
    verb = args.verb
    if verb == "phantom":
        return harness.cmd_phantom_gen(cfg, reuse)
    if verb == "prep":
        return harness.cmd_prep(cfg, args.dataset, reuse)
    if verb == "mtfs":
        tasks = [int(c) for c in args.tasks] if args.tasks else None
        return harness.cmd_mtfs_train(cfg, args.prepared, tasks, reuse)
    if verb == "translate":
        return harness.cmd_translate_train(cfg, args.prepared, args.fae, args.model, args.loss, reuse)
    if verb == "infer":
        return harness.cmd_infer(cfg, args.checkpoint, args.prepared, args.split, reuse)
    if verb == "eval":
        return harness.cmd_eval(cfg, args.prepared, args.checkpoint, reuse)
    if verb == "matrix":
        return harness.cmd_matrix(cfg, args.grid, reuse)
    raise ValidationError(f"unknown verb {verb}")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "rerun":
            run, doc = harness.rerun(args.manifest, args.out)
        else:
            cfg = resolve(args)
            if args.print_config:
                print(json.dumps(cfg, indent=2, sort_keys=True))
                return 0
            run, doc = dispatch(args, cfg)
    except (ValidationError, ConfigurationError) as exc:
        log.error("error: %s", exc)
        return 2
    except TrainingError as exc:
        log.error("training failed: %s", exc)
        return 1
    print(run.dir)
    if doc.get("status") != "ok":
        return 1
    failed = [k for k, v in doc.get("cell_status", {}).items() if v != "ok"]
    if failed:
        log.error("failed cells: %s", ", ".join(failed))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
