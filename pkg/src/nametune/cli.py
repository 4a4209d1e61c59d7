"""Command-line entry point: ``nametune <command> ...``.

Exit status is 0 on success, 1 when an error was collected and 2 for usage errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from ._fileio import atomic_write_bytes, atomic_write_text
from .classify import DEFAULT_PROMPT, PromptSpec, build_head
from .config import load_config
from .core import relabel
from .encoder import ENCODERS, make_encoder
from .errors import CacheBuildError, ConfigurationError, NameTuneError
from .manifest import load_manifest
from .pipeline import build_cache, load_split
from .protocol import TUNING_METHODS, RunRecord, evaluate, run_protocol
from .textparams import encode_checkpoint
from .toydata import make_toy_dataset, write_toy_dataset

BASELINES = {"linear_probe", "vl_prototype"}


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def cmd_cache(args) -> int:
    manifest = load_manifest(args.manifest)
    enc = make_encoder(args.encoder, args.encoder_seed)
    digest = build_cache(manifest, enc, args.out)
    info = {
        "command": "cache",
        "manifest": args.manifest,
        "encoder": {"kind": args.encoder, "seed": args.encoder_seed, "digest": enc.digest()},
        "entries": len(manifest.rows),
        "sha256": digest,
    }
    atomic_write_text(f"{args.out}.json", _dump(info))
    print(f"wrote {len(manifest.rows)} entries to {args.out} (sha256 {digest})")
    return 0


def zero_shot_accuracy(manifest, enc, cache, prompt: str, split_tag: Optional[str] = None) -> tuple[float, str, int]:
    split, enc = load_split(manifest, enc, cache)
    tag = split_tag or ("test" if split.paradigm.value == "traditional" else "meta_test")
    part = split.part(tag)
    ids = sorted(set(part.labels.tolist()))
    classes = relabel([split.classes[i] for i in ids])
    local = {g: i for i, g in enumerate(ids)}
    query = type(part)(part.features, [local[y] for y in part.labels.tolist()], part.ids)
    head = build_head(enc, PromptSpec.from_template(prompt, enc.tokenize), classes)
    return evaluate(head, query), tag, len(query)


def cmd_zero_shot(args) -> int:
    manifest = load_manifest(args.manifest)
    enc = make_encoder(args.encoder, args.encoder_seed)
    acc, tag, count = zero_shot_accuracy(manifest, enc, Path(args.cache) if args.cache else None, args.prompt,
                                         args.split)
    report = {
        "command": "zero-shot",
        "manifest": args.manifest,
        "cache": args.cache,
        "encoder": {"kind": args.encoder, "seed": args.encoder_seed, "digest": enc.digest()},
        "prompt": args.prompt,
        "split": tag,
        "queries": count,
        "accuracy": acc,
    }
    _emit(_dump(report), args.out)
    return 0


def _run(args, allowed: set) -> int:
    cfg_path = Path(args.config)
    cfg = load_config(cfg_path, allowed)
    root = cfg_path.parent
    manifest = load_manifest(cfg.resolve_path(cfg.data.manifest, root))
    if cfg.paradigm is not None and manifest.paradigm != cfg.paradigm.value:
        raise ConfigurationError(
            f"config key 'paradigm': {cfg.paradigm.value} does not match the manifest ({manifest.paradigm})"
        )
    enc = make_encoder(cfg.encoder.kind, cfg.encoder.seed, **cfg.encoder.options)
    cache = cfg.resolve_path(cfg.data.cache, root) if cfg.data.cache else None
    split, model_enc = load_split(manifest, enc, cache)
    out_dir = cfg.resolve_path(args.out or cfg.output, root)

    checkpoints: dict[str, bytes] = {}

    def keep(seed, result):
        checkpoints[f"seed-{seed}.ntpc"] = encode_checkpoint(result.selected, result.selected_epoch, seed)

    record = run_protocol(
        split, cfg.method, model_enc, cfg.k, seeds=cfg.seeds, grids=cfg.grids, n=cfg.n, base=cfg.base(),
        selection_episodes=cfg.selection_episodes, query_per_class=cfg.query_per_class, on_result=keep,
    )
    resolved = cfg.model_dump(mode="json")
    resolved.update(paradigm=record.paradigm, n=record.n_way, seeds=record.seeds, grids=record.config["grids"],
                    output=args.out or cfg.output)
    record.config["run_config"] = resolved
    record.config["encoder_digest"] = enc.digest()
    record.config["checkpoints"] = {name: hashlib.sha256(b).hexdigest() for name, b in sorted(checkpoints.items())}
    for name, data in sorted(checkpoints.items()):
        atomic_write_bytes(out_dir / "checkpoints" / name, data)
    atomic_write_text(out_dir / "run_record.json", record.to_json())
    print(f"{record.method}: {100 * record.mean:.1f} ± {100 * record.std:.1f} over seeds {record.seeds}"
          f" -> {out_dir / 'run_record.json'}")
    return 0


def cmd_tune(args) -> int:
    return _run(args, TUNING_METHODS)


def cmd_baseline(args) -> int:
    return _run(args, BASELINES)


def load_records(runs_dir) -> list[RunRecord]:
    paths = sorted(Path(runs_dir).rglob("*.json"))
    records = []
    for p in paths:
        try:
            obj = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict) and "schema_version" in obj and "accuracies" in obj:
            records.append(RunRecord.from_dict(obj))
    return records


def _label(r: RunRecord) -> str:
    return r.method + (" (random names)" if r.ablation.get("random_names") else "")


def report_rows(records: Sequence[RunRecord]) -> tuple[list[int], list[dict]]:
    """Rows keyed by method/paradigm/n-way with one cell per shot count."""
    shots = sorted({r.k_shot for r in records})
    rows: dict[tuple, dict] = {}
    for r in records:
        key = (_label(r), r.paradigm, r.n_way)
        row = rows.setdefault(key, {"method": key[0], "paradigm": key[1], "n_way": key[2], "cells": {}})
        if r.k_shot in row["cells"]:
            raise ConfigurationError(f"two runs for {key[0]} / {key[1]} / {key[2]}-way / {r.k_shot}-shot")
        row["cells"][r.k_shot] = {"mean": r.mean, "std": r.std, "seeds": len(r.seeds)}
    return shots, [rows[k] for k in sorted(rows)]


def format_table(shots: list[int], rows: list[dict]) -> str:
    header = ["method", "paradigm", "n-way"] + [f"{k}-shot" for k in shots]
    body = []
    for row in rows:
        cells = [row["method"], row["paradigm"], str(row["n_way"])]
        for k in shots:
            c = row["cells"].get(k)
            cells.append(f"{100 * c['mean']:.1f} ± {100 * c['std']:.1f}" if c else "-")
        body.append(cells)
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    records = load_records(args.runs)
    if not records:
        raise ConfigurationError(f"no run records under {args.runs}")
    shots, rows = report_rows(records)
    if args.format == "json":
        payload = [
            {**{k: v for k, v in row.items() if k != "cells"},
             "cells": {str(k): {**c, "mean_pct": round(100 * c["mean"], 1), "std_pct": round(100 * c["std"], 1)}
                       for k, c in sorted(row["cells"].items())}}
            for row in rows
        ]
        text = _dump({"shots": shots, "rows": payload})
    else:
        text = format_table(shots, rows)
    _emit(text, args.out)
    return 0


def cmd_toy_data(args) -> int:
    ds = make_toy_dataset(args.paradigm, args.encoder, args.encoder_seed, args.seed)
    path = write_toy_dataset(args.out, ds)
    print(f"wrote {len(ds.rows)} items to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nametune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def encoder_flags(sp):
        sp.add_argument("--encoder", default="toy-transformer", choices=sorted(ENCODERS))
        sp.add_argument("--encoder-seed", type=int, default=0)

    sp = sub.add_parser("cache", help="encode every manifest item into a feature cache")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    encoder_flags(sp)
    sp.set_defaults(func=cmd_cache)

    sp = sub.add_parser("zero-shot", help="accuracy of the fixed-prompt classifier")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--cache")
    sp.add_argument("--prompt", default=DEFAULT_PROMPT)
    sp.add_argument("--split", help="split tag to score (default: test or meta_test)")
    sp.add_argument("--out")
    encoder_flags(sp)
    sp.set_defaults(func=cmd_zero_shot)

    for name, func, what in (("tune", cmd_tune, "name-tuning | coop | coop-csc | cona"),
                             ("baseline", cmd_baseline, "linear-probe | vl-prototype")):
        sp = sub.add_parser(name, help=f"run the evaluation protocol for {what}")
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", help="output directory (overrides the config's 'output')")
        sp.set_defaults(func=func)

    sp = sub.add_parser("report", help="aggregate run records into a table")
    sp.add_argument("--runs", required=True)
    sp.add_argument("--format", choices=("table", "json"), default="table")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("toy-data", help="write the synthetic toy dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--paradigm", choices=("traditional", "meta_learning"), default="traditional")
    sp.add_argument("--seed", type=int, default=0)
    encoder_flags(sp)
    sp.set_defaults(func=cmd_toy_data)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CacheBuildError as exc:
        for item, reason in exc.failures:
            print(f"error: {item}: {reason}", file=sys.stderr)
        return 1
    except (NameTuneError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
