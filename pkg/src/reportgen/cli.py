"""Command-line entry point: ``reportgen <command> [options]``.

Exit codes: 0 success, 1 check failure, 2 usage/config/data error,
3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import tempfile
from pathlib import Path

from . import __version__
from .config import PROFILES, RunConfig, load_config
from .data import MIN_CASES, generate_dataset, load_manifest, load_reports, load_split
from .errors import ConfigError, DataError, NumericAbort, ReportGenError
from .generation import generate_ids
from .metrics import evaluate_corpus, format_table
from .tokenizer import decode
from .training import load_checkpoint, save_checkpoint, split_for_training, train, write_history

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

CHECKPOINT = "model.ckpt"
HISTORY = "history.csv"


def _out(text: str = "") -> None:
    print(text, flush=True)


def _resolve(path: str | None, cfg: RunConfig, key: str, flag: str) -> Path:
    value = path or cfg.paths.get(key)
    if not value:
        raise ConfigError(f"{flag} is required (or set paths.{key} in the config)")
    return Path(value)


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise DataError(f"{what} directory not found: {path}")
    return path


# -- commands ----------------------------------------------------------------

def cmd_generate_data(args) -> int:
    if args.n < MIN_CASES:
        raise DataError(f"--n must be at least {MIN_CASES}, got {args.n}")
    written: list[Path] = []
    manifest = generate_dataset(args.n, args.seed, args.out, written=written)
    counts = manifest["split_counts"]
    _out(f"train={counts['train']} val={counts['val']} test={counts['test']}")
    dist = " ".join(f"{k}={v}" for k, v in manifest["class_distribution"].items())
    _out(f"classes: {dist}")
    _out("unchanged (idempotent)" if not written else f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


def _train_and_save(cfg: RunConfig, data_dir: Path, out_dir: Path, *, quiet: bool = False):
    train_cases, val_cases = split_for_training(data_dir, cfg)

    def report(r):
        if not quiet:
            _out(f"epoch {r.epoch:4d}  train_loss {r.train_loss:.6f}  val_loss {r.val_loss:.6f}  lr {r.lr:.3g}")

    result = train(train_cases, val_cases, cfg, on_epoch=report)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / CHECKPOINT, result, cfg)
    write_history(out_dir / HISTORY, result.history)
    return result


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data_dir = _require_dir(_resolve(args.data, cfg, "data", "--data"), "data")
    out_dir = _resolve(args.out, cfg, "out", "--out")
    result = _train_and_save(cfg, data_dir, out_dir)
    if result.stopped_early:
        _out(f"early stop after {len(result.history)} epochs")
    _out(f"best epoch {result.state.best_epoch}  val_loss {result.state.best_val:.6f}")
    _out(f"final train loss {result.final_train_loss:.6f}")
    _out(f"checkpoint {out_dir / CHECKPOINT}")
    return EXIT_OK


def _generate_records(model, vocab, cases, *, beam: int, alpha: float, max_len: int) -> list[dict]:
    records = []
    for case in cases:
        hyp = generate_ids(model, case.image, beam_width=beam, alpha=alpha, max_len=max_len)
        records.append({"id": case.id, "report": decode(hyp.tokens, vocab)})
    return records


def _write_jsonl(path: Path, records: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def cmd_generate(args) -> int:
    model, vocab, cfg, _ = load_checkpoint(args.checkpoint)
    data_dir = _require_dir(_resolve(args.data, cfg, "data", "--data"), "data")
    gen = cfg.generation
    beam = gen.beam_width if args.beam is None else args.beam
    if beam < 1:
        raise ConfigError(f"--beam must be >= 1, got {beam}")
    alpha = gen.length_penalty_alpha if args.alpha is None else args.alpha
    max_len = gen.max_len if args.max_len is None else args.max_len
    cases = load_split(data_dir, args.split)
    records = _generate_records(model, vocab, cases, beam=beam, alpha=alpha, max_len=max_len)
    _write_jsonl(Path(args.out), records)
    _out(f"generated {len(records)} reports ({args.split}, beam={beam}) -> {args.out}")
    return EXIT_OK


def _load_truth(path: Path, split: str | None) -> dict[str, str]:
    if path.is_dir():
        manifest = load_manifest(path)
        records = load_reports(path / "reports.jsonl")
        if split in (None, "all"):
            ids = manifest["ids"]
        else:
            splits = json.loads((path / "splits.json").read_text())
            if split not in splits:
                raise DataError(f"unknown split {split!r}")
            ids = splits[split]
        return {i: records[i]["report"] for i in ids}
    return {k: r["report"] for k, r in load_reports(path).items()}


def _aligned(generated: list[dict], truth: dict[str, str]) -> tuple[list[str], list[str]]:
    gen_ids = [r["id"] for r in generated]
    missing_truth = [i for i in gen_ids if i not in truth]
    missing_gen = sorted(set(truth) - set(gen_ids))
    if missing_truth or missing_gen:
        parts = []
        if missing_gen:
            parts.append(f"no generated report for: {', '.join(missing_gen)}")
        if missing_truth:
            parts.append(f"no ground truth for: {', '.join(missing_truth)}")
        raise DataError("id misalignment; " + "; ".join(parts))
    return [r["report"] for r in generated], [truth[i] for i in gen_ids]


def cmd_evaluate(args) -> int:
    generated = list(load_reports(args.generated).values())
    truth_path = Path(args.truth)
    split = args.split if args.split is not None else ("test" if truth_path.is_dir() else None)
    gen_text, truth_text = _aligned(generated, _load_truth(truth_path, split))
    report = evaluate_corpus(gen_text, truth_text)
    table = format_table([(args.name, report)])
    _out(table.rstrip("\n"))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "table.txt").write_text(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import check_model, check_primitives

    seed = load_config(args.config).train.seed if args.config else 0
    failed = []
    _out("primitives")
    for line in check_primitives(seed):
        _out(f"  {line.group:<40s} {line.error:.3e}  {'ok' if line.ok else 'FAIL'}")
        failed += [] if line.ok else [line.group]
    _out("micro model (d_model=8, 1 layer, 2 heads, 2 levels)")
    for line in check_model(seed, max_entries=args.max_entries):
        _out(f"  {line.group:<40s} {line.error:.3e}  {'ok' if line.ok else 'FAIL'}")
        failed += [] if line.ok else [line.group]
    if failed:
        _out(f"gradient check FAILED: {', '.join(failed)}")
        return EXIT_CHECK
    _out("gradient check passed")
    return EXIT_OK


def _eval_cases(data_dir: Path, cfg: RunConfig):
    return load_split(data_dir, "all" if cfg.train.overfit else "test")


def cmd_compare(args) -> int:
    if args.out:
        return _compare(args, Path(args.out))
    with tempfile.TemporaryDirectory() as tmp:
        return _compare(args, Path(tmp), keep=False)


def _compare(args, out: Path, keep: bool = True) -> int:
    base_cfg = load_config(args.config)
    data_dir = _require_dir(_resolve(args.data, base_cfg, "data", "--data"), "data")
    eval_cases = _eval_cases(data_dir, base_cfg)
    gen = base_cfg.generation
    rows, outputs = [], {}
    for kind, label in (("baseline", "baseline"), ("ac-bifpn", "ac-bifpn")):
        cfg = copy.deepcopy(base_cfg)
        cfg.encoder.kind = kind
        _out(f"training {label} encoder")
        result = _train_and_save(cfg, data_dir, out / label, quiet=not args.verbose)
        records = _generate_records(result.model, result.vocab, eval_cases, beam=gen.beam_width,
                                    alpha=gen.length_penalty_alpha, max_len=gen.max_len)
        outputs[label] = records
        rows.append((label, evaluate_corpus([r["report"] for r in records], [c.report for c in eval_cases])))
    table = format_table(rows, first_header="Encoder")
    _out(table.rstrip("\n"))
    if keep:
        (out / "compare.txt").write_text(table)
        (out / "compare.json").write_text(json.dumps({name: rep.to_dict() for name, rep in rows},
                                                     indent=2, sort_keys=True) + "\n")
        for label, records in outputs.items():
            _write_jsonl(out / label / "generated.jsonl", records)
    return EXIT_OK


def cmd_grid(args) -> int:
    """Train once per profile and keep the one with the lowest validation loss."""
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    results = []
    for profile in args.profiles:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        cfg = RunConfig.from_dict(dict(doc, profile=profile))
        data_dir = _require_dir(_resolve(args.data, cfg, "data", "--data"), "data")
        _out(f"training profile {profile}")
        result = _train_and_save(cfg, data_dir, Path(args.out) / profile, quiet=not args.verbose)
        results.append((profile, result.state.best_val))
        _out(f"  {profile}: best val_loss {result.state.best_val:.6f}")
    best = min(results, key=lambda r: r[1])
    _out(f"selected profile {best[0]} (val_loss {best[1]:.6f})")
    (Path(args.out) / "selected.txt").write_text(f"{best[0]}\n")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reportgen", description="Synthetic scan report generation pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of cases")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate reports for one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--beam", type=int, help="beam width; 1 means greedy")
    p.add_argument("--alpha", type=float, help="length penalty exponent")
    p.add_argument("--max-len", type=int, help="maximum length including the start token")
    p.add_argument("--out", required=True, help="output JSONL")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated reports against the ground truth")
    p.add_argument("--generated", required=True)
    p.add_argument("--truth", required=True, help="reports JSONL or a dataset directory")
    p.add_argument("--split", help="split to score when --truth is a dataset directory (default test)")
    p.add_argument("--name", default="generated", help="row label in the table")
    p.add_argument("--out", help="directory for metrics.json and table.txt")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--config")
    p.add_argument("--max-entries", type=int, help="probe at most this many entries per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", help="pyramid encoder versus baseline under one budget")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("grid", help="train each profile, keep the lowest validation loss")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--profiles", nargs="+", default=sorted(PROFILES))
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ReportGenError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
