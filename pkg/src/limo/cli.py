"""``limo`` command line: synth, extract, image, train, index, compress, query, eval, bench, explain.

Every successful command prints one JSON summary line on stdout; logs go to
stderr. Failures exit with 2 (usage), 3 (data) or 4 (internal) and print a
JSON error object on stderr. All outputs are written atomically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
STOCHASTIC = {"synth", "train", "compress", "bench"}


class UsageError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True), flush=True)


def _apply_thread_cap() -> None:
    """Honour LIMO_THREADS before numpy (and its BLAS) is first imported."""
    cap = os.environ.get("LIMO_THREADS")
    if cap is None:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise UsageError(f"LIMO_THREADS must be a positive integer, got {cap!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = cap


def load_config(path: str | None, section: str) -> dict[str, Any]:
    """Flat JSON/TOML mapping; a table named after the subcommand overrides top-level keys."""
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    text = p.read_text(encoding="utf-8")
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise UsageError("config must be a mapping")
    flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
    flat.update(data.get(section, {}))
    return flat


def _seed(args, cfg: dict) -> int | None:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None and args.command in STOCHASTIC:
        raise UsageError(f"'{args.command}' is stochastic and needs --seed (or a seed in --config)")
    if seed is not None and not (isinstance(seed, int) and 0 <= seed < 2**64):
        raise UsageError("seed must be an unsigned 64-bit integer")
    return seed


def _k_list(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be positive")
    return ks


def _need(path: str | None, what: str, kind: str = "any") -> Path:
    if not path:
        raise UsageError(f"missing {what}")
    p = Path(path)
    ok = p.is_dir() if kind == "dir" else p.is_file() if kind == "file" else p.exists()
    if not ok:
        raise UsageError(f"{what} not found: {path}")
    return p


# -- shared loaders -----------------------------------------------------------------


def _corpus(root: Path, split: str | None = None) -> list[dict]:
    from .errors import FormatError

    man = root / "manifest.json"
    if not man.is_file():
        raise UsageError(f"{root} has no manifest.json")
    try:
        items = json.loads(man.read_text(encoding="utf-8"))["items"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{man}: malformed manifest ({exc})") from exc
    if split and split != "all":
        items = [it for it in items if it["split"] == split]
    if not items:
        raise UsageError(f"no items in split {split!r}")
    return items


def _features(root: Path, item: dict):
    """Extracted features if present, otherwise extract from the motion file."""
    from .kinematics import SkeletonDefinition, extract_sequence, load_features_csv, load_motion

    if "features" in item:
        return load_features_csv(root / item["features"]).rows
    return extract_sequence(load_motion(root / item["motion"]), SkeletonDefinition.default()).rows


def _model(path: str | None):
    """(params, vocab) from a run directory or a checkpoint file with a sibling vocab.json."""
    from .encoders import EncoderParams, Vocabulary

    p = _need(path, "--checkpoint")
    ckpt = p / "model.liep" if p.is_dir() else p
    vocab = ckpt.parent / "vocab.json"
    if not ckpt.is_file() or not vocab.is_file():
        raise UsageError(f"checkpoint needs model.liep and vocab.json: {p}")
    return EncoderParams.load(ckpt), Vocabulary.load(vocab)


def _skeleton(cfg: dict):
    from .kinematics import SkeletonDefinition

    return SkeletonDefinition.load(cfg["skeleton"]) if "skeleton" in cfg else SkeletonDefinition.default()


# -- commands --------------------------------------------------------------------------


def cmd_synth(args, cfg) -> dict:
    from .synth import generate_dataset, write_dataset

    out = Path(args.out or cfg.get("out") or "")
    if not str(out) or str(out) == ".":
        raise UsageError("synth needs --out")
    ds = generate_dataset(
        n_train=int(cfg.get("n_train", 200)),
        n_val=int(cfg.get("n_val", 50)),
        n_test=int(cfg.get("n_test", 50)),
        seed=args.seed_value,
        joints_per_item=int(cfg.get("joints_per_item", 1)),
        canonical=bool(cfg.get("canonical", True)),
    )
    manifest = write_dataset(ds, out)
    counts = {s: len(ds.split(s)) for s in ("train", "val", "test")}
    return {"command": "synth", "manifest": str(manifest), "items": len(ds.items), "splits": counts}


def cmd_extract(args, cfg) -> dict:
    from .kinematics import extract_sequence, load_motion, save_features_bin, save_features_csv

    src = _need(args.input, "input motion file or corpus directory")
    skel = _skeleton(cfg)
    fmt = args.format or "csv"
    if fmt not in ("csv", "bin"):
        raise UsageError("extract --format must be csv or bin")
    if src.is_dir():
        out = Path(args.out or src)
        items = _corpus(src)
        flagged = 0
        for it in items:
            fs = extract_sequence(load_motion(src / it["motion"]), skel)
            flagged += sum(1 for f in fs.flags if f)
            rel = f"features/{it['id']}.csv"
            save_features_csv(out / rel, fs)
            it["features"] = rel
            if out != src:
                it["motion"] = str((src / it["motion"]).resolve())
        from ._io import write_atomic

        write_atomic(out / "manifest.json", json.dumps({"items": items}, indent=1))
        return {"command": "extract", "items": len(items), "out": str(out), "flagged_frames": flagged}
    if not args.out:
        raise UsageError("extract of a single file needs --out")
    fs = extract_sequence(load_motion(src), skel)
    (save_features_bin if fmt == "bin" else save_features_csv)(args.out, fs)
    return {"command": "extract", "frames": fs.n_frames, "out": args.out, "flagged_frames": sum(1 for f in fs.flags if f)}


def _read_features(path: Path):
    from .kinematics import load_features_bin, load_features_csv

    return load_features_csv(path) if path.suffix.lower() == ".csv" else load_features_bin(path)


def cmd_image(args, cfg) -> dict:
    from .motion_image import PartProjectionSet, build_motion_image, save_grayscale, save_image

    src = _need(args.input, "input feature file", "file")
    if not args.out:
        raise UsageError("image needs --out")
    if args.checkpoint:
        params, _ = _model(args.checkpoint)
        proj = params.parts
    else:
        proj = PartProjectionSet.init(args.seed_value or 0)
    img = build_motion_image(_read_features(src), proj)
    fmt = args.format or Path(args.out).suffix.lstrip(".").lower() or "limi"
    if fmt in ("pgm", "png"):
        save_grayscale(args.out, img.pixels, fmt)
    else:
        save_image(args.out, img)
    return {"command": "image", "out": args.out, "valid_frames": img.valid_frames, "format": fmt}


def cmd_train(args, cfg) -> dict:
    from .encoders import Vocabulary
    from .retrieval import evaluate_examples
    from .training import LossConfig, make_example, save_history, train_loop
    from ._io import write_atomic

    root = _need(args.input, "corpus directory", "dir")
    if not args.out:
        raise UsageError("train needs --out")
    opts = {k: cfg[k] for k in LossConfig.__dataclass_fields__ if k in cfg}
    opts["seed"] = args.seed_value
    config = LossConfig.from_dict(opts)
    train_items, val_items = _corpus(root, "train"), [it for it in _corpus(root) if it["split"] == "val"]
    vocab = Vocabulary.build([it["text"] for it in train_items])
    mk = lambda items: [make_example(_features(root, it), it["text"], vocab) for it in items]
    train, val = mk(train_items), mk(val_items)
    state, history = train_loop(
        train, config, len(vocab), val or None,
        on_epoch=lambda h: _log(f"epoch {h.epoch}: t2m={h.t2m:.4f} m2t={h.m2t:.4f} mlm={h.mlm:.4f} val_R@1={h.val_r1:.1f}"),
    )
    out = Path(args.out)
    state.params.save(out / "model.liep")
    vocab.save(out / "vocab.json")
    save_history(out / "history.csv", history)
    write_atomic(out / "config.json", json.dumps(opts, indent=1, sort_keys=True))
    summary = {"command": "train", "out": str(out), "epochs": config.epochs, "steps": state.step, "tau": state.tau}
    if val:
        summary["val_R@1"] = evaluate_examples(state.params, val).t2m.recall[1]
    return summary


def _encode_split(root: Path, split: str, params, vocab):
    from .encoders import encode_features, encode_text, tokenize

    items = _corpus(root, split)
    motions = [encode_features(_features(root, it), params) for it in items]
    texts = [encode_text(tokenize(it["text"], vocab), params) for it in items]
    return items, texts, motions


def cmd_index(args, cfg) -> dict:
    from .retrieval import build_index, save_index

    root = _need(args.input, "corpus directory", "dir")
    if not args.out:
        raise UsageError("index needs --out")
    params, vocab = _model(args.checkpoint)
    items, texts, motions = _encode_split(root, args.split, params, vocab)
    gallery = motions if args.direction == "t2m" else texts
    index = build_index(zip((it["id"] for it in items), gallery), args.direction)
    save_index(args.out, index)
    return {"command": "index", "out": args.out, "items": index.size, "bytes": index.payload_bytes, "direction": args.direction}


def cmd_compress(args, cfg) -> dict:
    from .retrieval import compress, load_index, save_index

    src = _need(args.input, "input index", "file")
    mode = args.mode or "pq"
    if not args.out:
        raise UsageError("compress needs --out")
    index = load_index(src)
    packed = compress(index, mode, seed=args.seed_value, iterations=int(cfg.get("kmeans_iterations", 25)))
    save_index(args.out, packed)
    return {
        "command": "compress",
        "mode": mode,
        "out": args.out,
        "bytes": packed.payload_bytes,
        "float32_bytes": index.payload_bytes,
        "ratio": index.payload_bytes / packed.payload_bytes,
        "side_bytes": packed.side_bytes,
    }


def cmd_query(args, cfg) -> dict:
    from .encoders import encode_text, tokenize
    from .retrieval import load_index

    if not args.input:
        raise UsageError("query needs the query text")
    index = load_index(_need(args.index, "--index", "file"))
    if index.direction != "t2m":
        raise UsageError("query expects a text-to-motion index")
    params, vocab = _model(args.checkpoint)
    k = args.k[0] if args.k else 10
    hits = index.search(encode_text(tokenize(args.input, vocab), params), k)
    summary = {
        "command": "query",
        "mode": index.mode,
        "hits": [{"id": h.id, "score": h.score} for h in hits],
        "bytes": index.payload_bytes,
    }
    if index.mode != "float32":
        from .retrieval import payload_bytes

        summary["ratio"] = payload_bytes(index.n_rows, index.d) / index.payload_bytes
    return summary


def cmd_eval(args, cfg) -> dict:
    from ._io import write_atomic
    from .retrieval import EvalReport, compress, build_index, eval_csv, evaluate, rank_order, K_LIST

    ks = tuple(args.k or K_LIST)
    src = _need(args.input, "corpus directory or rankings file")
    if src.is_file():
        # precomputed rankings: {"direction": ..., "queries": [{"ranking": [...], "relevant": [...]}]}
        data = json.loads(src.read_text(encoding="utf-8"))
        qs = data["queries"]
        reports = [evaluate([q["ranking"] for q in qs], [q["relevant"] for q in qs], data.get("direction", "t2m"), ks)]
    else:
        params, vocab = _model(args.checkpoint)
        items, texts, motions = _encode_split(src, args.split, params, vocab)
        ids = [it["id"] for it in items]
        labels = [it["text"] for it in items]
        mode = args.mode or "float32"
        reports = []
        for direction, gallery, queries in (("t2m", motions, texts), ("m2t", texts, motions)):
            index = compress(build_index(zip(ids, gallery), direction), mode, seed=args.seed_value or 0)
            rankings = [[ids[i] for i in rank_order(index.scores(q), ids)] for q in queries]
            relevant = [[j for j, lab in zip(ids, labels) if lab == labels[i]] for i in range(len(ids))]
            reports.append(evaluate(rankings, relevant, direction, ks))
    fmt = args.format or "csv"
    text = eval_csv(reports) if fmt == "csv" else json.dumps([r.row() for r in reports], indent=1, sort_keys=True)
    if args.out:
        write_atomic(args.out, text)
    return {"command": "eval", "reports": [r.row() for r in reports], "out": args.out}


def cmd_bench(args, cfg) -> dict:
    from ._io import write_atomic
    from .retrieval import bench_csv, bench_latency, build_index, compress, synthetic_benchmark

    sizes = [int(x) for x in str(cfg.get("sizes", args.sizes)).split(",")]
    modes = (args.mode or cfg.get("mode") or "float32").split(",")
    reports = []
    for G in sizes:
        bench = synthetic_benchmark(n_items=G, n_queries=20, seed=args.seed_value)
        base = build_index(zip(bench.ids, bench.gallery))
        for mode in modes:
            index = compress(base, mode, seed=args.seed_value)
            rep = bench_latency(index, bench.queries, warmup=int(cfg.get("warmup", 10)), repeats=int(cfg.get("repeats", 100)))
            _log(f"G={G} mode={mode}: mean {rep.mean_ms:.3f} ms (single-vector {rep.baseline_mean_ms:.3f} ms)")
            reports.append(rep)
    text = bench_csv(reports)
    if args.out:
        write_atomic(args.out, text)
    rows = [
        {"mode": r.mode, "G": r.gallery_size, "mean_ms": r.mean_ms, "p50_ms": r.p50_ms, "p95_ms": r.p95_ms,
         "bytes": r.bytes, "baseline_mean_ms": r.baseline_mean_ms}
        for r in reports
    ]
    return {"command": "bench", "results": rows, "out": args.out}


def cmd_explain(args, cfg) -> dict:
    from .encoders import encode_features, encode_text, tokenize, words
    from .interaction_map import compute_map, export_map
    from .kinematics import extract_sequence, load_motion
    from .late_interaction import interaction_matrix

    if not args.input:
        raise UsageError("explain needs the query text")
    motion_path = _need(args.motion, "--motion", "file")
    if not args.out:
        raise UsageError("explain needs --out")
    params, vocab = _model(args.checkpoint)
    skel = _skeleton(cfg)
    if motion_path.suffix.lower() == ".json":
        rows = extract_sequence(load_motion(motion_path), skel).rows
    else:
        rows = _read_features(motion_path).rows
    S = interaction_matrix(encode_text(tokenize(args.input, vocab), params), encode_features(rows, params))
    imap = compute_map(S, words(args.input))
    path = export_map(imap, args.out, args.format, [fj.name for fj in skel.feature_joints], rows.shape[0])
    k, w = imap.argmax_cell
    return {
        "command": "explain",
        "out": str(path),
        "argmax_row": imap.argmax_row,
        "argmax_joint": skel.feature_joints[imap.argmax_row].name,
        "argmax_cell": [k, w],
        "total": float(imap.grid.sum()),
    }


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "image": cmd_image,
    "train": cmd_train,
    "index": cmd_index,
    "compress": cmd_compress,
    "query": cmd_query,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "explain": cmd_explain,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 2 with a JSON payload
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="limo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("input", nargs="?", help="primary input (file, directory or query text)")
        p.add_argument("--config", help="JSON or TOML config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--mode", help="float32 | pq | binary (bench accepts a comma list)")
        p.add_argument("--k", type=_k_list, help="comma-separated K list, e.g. 1,2,3,5,10")
        p.add_argument("--format", choices=["csv", "json", "bin", "pgm", "png", "limi"])
        p.add_argument("--checkpoint", help="run directory or model.liep")
        p.add_argument("--index", help="index file")
        p.add_argument("--split", default="test")
        p.add_argument("--direction", choices=["t2m", "m2t"], default="t2m")
        p.add_argument("--motion", help="motion JSON or feature file (explain)")
        p.add_argument("--sizes", default="100,1000", help="gallery sizes (bench)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_thread_cap()
        cfg = load_config(args.config, args.command)
        args.seed_value = _seed(args, cfg)
        _emit(COMMANDS[args.command](args, cfg))
        return EXIT_OK
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        from .errors import LimoError

        if isinstance(exc, LimoError) or isinstance(exc, (OSError, ValueError, KeyError)):
            code = getattr(exc, "code", "data_error")
            print(json.dumps({"error": code, "message": str(exc), "command": args.command}), file=sys.stderr)
            return EXIT_DATA
        print(json.dumps({"error": "internal", "message": repr(exc), "command": args.command}), file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
