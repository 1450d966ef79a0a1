"""Command-line entry point: compress / apply / eval / bench-load / inspect.

Exit codes: 0 success, 2 usage, 3 data or fingerprint error, 4 numeric
divergence. The default seed comes from AXISDELTA_SEED when set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import defaultdict

import numpy as np

from . import artifact as art
from .calibration import CalibConfig, DataSourceError, FileTokenSource, TokenSource
from .fitting import (
    CalibCache,
    DivergenceError,
    E2EConfig,
    FitConfig,
    PipelineConfig,
    StudentState,
    build_cache,
    cache_teacher_logits,
    end_loss,
    layer_mse,
    report_lines,
    run_pipeline,
)
from .codec import unpack_signs, PackedSignMask, AxisScaleVector
from .model import linear_layer_names, load_model
from .tensor import ContainerError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _default_seed() -> int:
    return int(os.environ.get("AXISDELTA_SEED", "0"))


def _add_calib_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--calib-train", type=int, default=50,
                   help="train calibration batches (default 50)")
    p.add_argument("--calib-val", type=int, default=None,
                   help="validation batches (default ceil(train/4))")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seq-len", type=int, default=16)
    p.add_argument("--calib-file", default=None,
                   help="newline-delimited token-id file instead of synthetic batches")
    p.add_argument("--seed", type=int, default=_default_seed())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="axisdelta")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress a fine-tune into a delta artifact")
    p.add_argument("--base", required=True)
    p.add_argument("--finetuned", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--calib-e2e", type=int, default=150,
                   help="end-to-end calibration batches (default 150)")
    p.add_argument("--e2e-epochs", type=int, default=1)
    p.add_argument("--select-by", choices=("end", "layer"), default="end")
    p.add_argument("--scalar-baseline", action="store_true",
                   help="fit a single scalar per matrix for one epoch instead of a vector")
    _add_calib_flags(p)

    p = sub.add_parser("apply", help="apply a delta artifact onto a base container")
    p.add_argument("--base", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skip-fingerprint", action="store_true")

    p = sub.add_parser("eval", help="end loss of base+artifact vs the fine-tuned model")
    p.add_argument("--base", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--finetuned", required=True)
    p.add_argument("--skip-fingerprint", action="store_true")
    _add_calib_flags(p)

    p = sub.add_parser("bench-load", help="delta apply vs full FP16 checkpoint load")
    p.add_argument("--base", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--finetuned", required=True)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--out", default=None, help="write the timing table here too")

    p = sub.add_parser("inspect", help="axis statistics of an artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--json", action="store_true", dest="as_json")
    return ap


def _make_source(model, args) -> object:
    cfg = CalibConfig(
        train_batches=args.calib_train,
        val_batches=args.calib_val,
        batch_size=args.batch_size,
        seq_len=args.seq_len,
        seed=args.seed,
    )
    if args.calib_file:
        return FileTokenSource(args.calib_file, cfg), cfg
    return TokenSource(model.spec.vocab, cfg), cfg


def cmd_compress(args) -> int:
    base = load_model(args.base)
    finetuned = load_model(args.finetuned)
    source, calib_cfg = _make_source(base, args)
    cfg = PipelineConfig(
        fit=FitConfig(lr=args.lr, epochs=args.epochs),
        calib=calib_cfg,
        e2e=E2EConfig(epochs=args.e2e_epochs, lr=args.lr,
                      calib_batches=args.calib_e2e),
        select_by=args.select_by,
        scalar_baseline=args.scalar_baseline,
    )
    result = run_pipeline(base, finetuned, cfg, source)
    records = art.records_from_state(result.state)
    fingerprint = art.fingerprint_file(args.base)
    nbytes = art.save_artifact(args.out, records, fingerprint)
    report_path = os.path.splitext(args.out)[0] + ".report.txt"
    with open(report_path, "w") as f:
        f.write("\n".join(report_lines(result)) + "\n")
    print(f"wrote {args.out} ({nbytes} bytes), report {report_path}")
    print(f"final end loss {result.final_end_loss:.8e} "
          f"(initial {result.initial_end_loss:.8e})")
    return EXIT_OK


def cmd_apply(args) -> int:
    base = load_model(args.base)
    expected = art.fingerprint_file(args.base)
    patched, report = art.load_and_apply(
        base, args.artifact, expected_fingerprint=expected,
        skip_fingerprint=args.skip_fingerprint,
    )
    from .model import save_model

    save_model(args.out, patched)
    for line in report.lines():
        print(line)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    base = load_model(args.base)
    finetuned = load_model(args.finetuned)
    expected = art.fingerprint_file(args.base)
    patched, _ = art.load_and_apply(
        base, args.artifact, expected_fingerprint=expected,
        skip_fingerprint=args.skip_fingerprint,
    )
    source, calib_cfg = _make_source(base, args)
    T, E = calib_cfg.train_batches, calib_cfg.n_val
    val_batches = [source.batch(T + i) for i in range(E)]
    teacher_logits = cache_teacher_logits(finetuned, val_batches)
    loss = end_loss(patched, teacher_logits, val_batches)
    print(f"end_loss={loss:.8e}")
    _, records = art.load_artifact(args.artifact)
    by_name = {r.name: r for r in records}
    for name in linear_layer_names(patched):
        if name not in by_name:
            continue
        r = by_name[name]
        cache = build_cache(finetuned, patched, name, calib_cfg, source)
        signs = unpack_signs(PackedSignMask.frombytes(r.d_out, r.d_in, r.mask_bytes))
        mse = layer_mse(
            cache.X_val, cache.Y_val, base.params[name], signs, r.axis,
            np.asarray(r.vector, dtype=np.float32),
        )
        print(f"layer={name} axis={r.axis} val_mse={mse:.8e}")
    return EXIT_OK


def cmd_bench_load(args) -> int:
    base = load_model(args.base)
    finetuned = load_model(args.finetuned)
    ckpt_path = os.path.splitext(args.artifact)[0] + ".fp16ckpt"
    art.write_fp16_checkpoint(ckpt_path, finetuned)
    result = art.bench_load(base, args.artifact, ckpt_path, runs=args.runs)
    lines = result.lines()
    for line in lines:
        print(line)
    if args.out:
        with open(args.out, "w") as f:
            f.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_inspect(args) -> int:
    _, records = art.load_artifact(args.artifact)
    per_subtype: dict[str, dict[str, int]] = defaultdict(lambda: {"row": 0, "col": 0})
    per_depth: dict[int, list[str]] = defaultdict(list)
    for r in records:
        parts = r.name.split(".")
        subtype = ".".join(parts[2:]) if parts[0] == "blocks" else r.name
        per_subtype[subtype][r.axis] += 1
        if parts[0] == "blocks":
            per_depth[int(parts[1])].append(f"{subtype}={r.axis}")
    if args.as_json:
        print(json.dumps({
            "records": len(records),
            "per_subtype": dict(per_subtype),
            "per_depth": {str(k): v for k, v in sorted(per_depth.items())},
        }, indent=2, sort_keys=True))
    else:
        print(f"records={len(records)}")
        for subtype in sorted(per_subtype):
            c = per_subtype[subtype]
            print(f"subtype={subtype} row={c['row']} col={c['col']}")
        for depth in sorted(per_depth):
            print(f"depth={depth} " + " ".join(sorted(per_depth[depth])))
    return EXIT_OK


COMMANDS = {
    "compress": cmd_compress,
    "apply": cmd_apply,
    "eval": cmd_eval,
    "bench-load": cmd_bench_load,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (art.ArtifactError, ContainerError, DataSourceError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
