"""Command-line interface.

Subcommands: extract, train, evaluate, search, cross-rank. Exit codes:
0 success, 1 usage error, 2 data error, 3 internal error.

A ``--config`` TOML file may preset any option of the chosen subcommand
(keys are option names with dashes or underscores). Command-line flags
override the file, which overrides built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .data import Manifest, ManifestError, dump_manifest, load_manifest, split_counts, split_dataset
from .features.extract import EXTRACTORS, extract_channel
from .features.fvec import FeatureChannel, FeatureFileError, load_external_channel, write_fvec
from .fusion import LeakageError, load_bundle, load_content_scores, save_bundle
from .imageproc import DecodeError
from .learner import LOSSES, Hyperparams, TrainingError
from .pipeline import evaluate_model, fit, rank_by_style
from .report import FORMATS, render_report

log = logging.getLogger("stylerec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DATA_ERRORS = (
    ManifestError,
    FeatureFileError,
    DecodeError,
    LeakageError,
    TrainingError,
    KeyError,
    ValueError,
    FileNotFoundError,
    json.JSONDecodeError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file presetting options for this command")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="stylerec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sp = {}

    p = sp["extract"] = subs.add_parser("extract", help="compute a native feature channel")
    p.add_argument("--manifest", required=True)
    p.add_argument("--channel", required=True, choices=sorted(EXTRACTORS))
    p.add_argument("--out", required=True, help="FVEC1 output path (index written alongside)")
    p.add_argument("--workers", type=int, default=1)
    _add_common(p)

    p = sp["train"] = subs.add_parser("train", help="select hyperparameters and train models")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", nargs="+", required=True, help="FVEC1 files, one per channel")
    p.add_argument("--mode", choices=("single", "fusion", "fusion_x_content"), default="single")
    p.add_argument("--content", help="content-score JSON Lines file (fusion_x_content)")
    p.add_argument("--lambda1", type=_floats, default=[0.0, 1e-7, 1e-5, 1e-3])
    p.add_argument("--lambda2", type=_floats, default=[0.0, 1e-7, 1e-5, 1e-3])
    p.add_argument("--loss", nargs="+", choices=LOSSES, default=list(LOSSES))
    p.add_argument("--eta0", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--fractions", type=_floats, default=[0.6, 0.2, 0.2], help="split fractions if unsplit")
    p.add_argument("--out", required=True, help="output model directory")
    _add_common(p)

    p = sp["evaluate"] = subs.add_parser("evaluate", help="evaluate models on a split")
    p.add_argument("--models", required=True)
    p.add_argument("--manifest", required=True, help="split manifest (train writes one)")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--content")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--format", nargs="+", choices=FORMATS, default=list(FORMATS))
    p.add_argument("--out", required=True, help="output directory for report.{json,csv,html}")
    _add_common(p)

    p = sp["search"] = subs.add_parser("search", help="caption search filtered by a style classifier")
    p.add_argument("--manifest", required=True, help="corpus manifest; records may carry captions")
    p.add_argument("--models", required=True)
    p.add_argument("--features", nargs="*", default=[], help="corpus features; native channels are extracted if absent")
    p.add_argument("--content")
    p.add_argument("--style", required=True)
    p.add_argument("--text")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--min-score", type=float)
    p.add_argument("--out", help="JSON result path (stdout if omitted)")
    p.add_argument("--html", help="write an HTML gallery here")
    _add_common(p)

    p = sp["cross-rank"] = subs.add_parser("cross-rank", help="rank another corpus by every style")
    p.add_argument("--manifest", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--features", nargs="*", default=[])
    p.add_argument("--content")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out", help="JSON result path (stdout if omitted)")
    p.add_argument("--html", help="write an HTML gallery here")
    _add_common(p)
    return parser, sp


def _load_config(path: str, sub: argparse.ArgumentParser) -> dict:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = {a.dest for a in sub._actions}
    out = {}
    for key, value in raw.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"config key {key!r} is not an option of this command")
        out[dest] = value
    return out


def _prescan(argv) -> tuple[str | None, str | None]:
    command = next((a for a in argv if not a.startswith("-")), None)
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    return command, config


def parse_args(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    command, config = _prescan(argv)
    if config and command in subs:
        sub = subs[command]
        try:
            defaults = _load_config(config, sub)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise UsageError(f"cannot read config {config}: {exc}") from None
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _load_channels(paths) -> dict[str, FeatureChannel]:
    channels = {}
    for p in paths:
        ch = load_external_channel(p)
        if ch.name in channels:
            raise UsageError(f"two feature files map to channel {ch.name!r}")
        channels[ch.name] = ch
    return channels


def _corpus_channels(args, manifest: Manifest, needed) -> dict[str, FeatureChannel]:
    channels = _load_channels(args.features)
    for name in needed:
        if name in channels:
            continue
        if name not in EXTRACTORS:
            raise KeyError(f"model channel {name!r} is not available for this corpus")
        ch, errors = extract_channel(manifest, name)
        for rid, err in errors:
            log.warning("skipping %s: %s", rid, err)
        channels[name] = ch
    return channels


def cmd_extract(args) -> int:
    manifest = load_manifest(args.manifest)
    if not manifest.records:
        raise ManifestError("manifest has no records")
    channel, errors = extract_channel(manifest, args.channel, workers=args.workers)
    for rid, err in errors:
        log.warning("failed %s: %s", rid, err)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_fvec(args.out, channel.ids, channel.matrix)
    print(f"channel={args.channel} dim={channel.dim} rows={len(channel)} failures={len(errors)}")
    return EXIT_OK


def _grid(args) -> list[Hyperparams]:
    return [
        Hyperparams(lambda1=l1, lambda2=l2, loss=loss, eta0=args.eta0, epochs=args.epochs, seed=args.seed)
        for loss in args.loss
        for l1 in args.lambda1
        for l2 in args.lambda2
    ]


def _write_table(path: Path, table) -> None:
    cols = ["stage", "channel", "index", "loss", "lambda1", "lambda2", "eta0", "epochs", "mean_ap", "error"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in table:
            vals = ["" if row.get(c) is None else str(row[c]).replace(",", ";") for c in cols]
            fh.write(",".join(vals) + "\n")


def cmd_train(args) -> int:
    if args.mode == "fusion_x_content" and not args.content:
        raise UsageError("--mode fusion_x_content requires --content")
    if args.mode == "single" and len(args.features) != 1:
        raise UsageError("--mode single takes exactly one --features file")
    manifest = load_manifest(args.manifest)
    if not manifest.records:
        raise ManifestError("manifest has no records")
    if all(r.split == "unassigned" for r in manifest.records):
        if len(args.fractions) != 3:
            raise UsageError("--fractions needs three values")
        manifest = split_dataset(manifest, args.seed, tuple(args.fractions))
    channels = _load_channels(args.features)
    content = load_content_scores(args.content) if args.content else None
    model, table = fit(manifest, list(channels.values()), args.mode, _grid(args), args.seed, content)

    out = Path(args.out)
    save_bundle(model, out)
    _write_table(out / "validation.csv", table)
    split_path = out / "manifest.split.jsonl"
    dump_manifest(_absolute_paths(manifest, Path(args.manifest).parent), split_path)
    counts = split_counts(manifest)
    print(
        f"mode={args.mode} channels={','.join(channels)} classes={len(manifest.classes)} "
        f"train={counts['train']} val={counts['val']} test={counts['test']} out={out}"
    )
    return EXIT_OK


def _absolute_paths(manifest: Manifest, root: Path) -> Manifest:
    recs = [r if os.path.isabs(r.path) else replace(r, path=str((root / r.path).resolve())) for r in manifest.records]
    return Manifest(manifest.classes, recs, manifest.source)


def cmd_evaluate(args) -> int:
    model = load_bundle(args.models)
    manifest = load_manifest(args.manifest)
    channels = _load_channels(args.features)
    content = load_content_scores(args.content) if args.content else None
    if model.needs_content and content is None:
        raise UsageError("this model needs --content")
    report = evaluate_model(model, manifest, channels, args.seed, args.split, content)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fmt in args.format:
        _write_text(str(out / f"report.{fmt}"), render_report(report, fmt))
    print(f"mean_ap={report.mean_ap:.4f} mean_accuracy={report.mean_accuracy:.4f} out={out}")
    return EXIT_OK


def _gallery(title: str, sections, html_path: str, manifest: Manifest) -> str:
    import html as h

    base = Path(html_path).resolve().parent
    recs = manifest.by_id()
    parts = [
        "<!DOCTYPE html>",
        f'<html><head><meta charset="utf-8"><title>{h.escape(title)}</title>',
        "<style>body{font-family:sans-serif}figure{display:inline-block;margin:4px;width:180px;"
        "vertical-align:top}img{max-width:180px;max-height:180px}figcaption{font-size:11px}</style>",
        "</head><body>",
        f"<h1>{h.escape(title)}</h1>",
    ]
    for heading, hits in sections:
        parts.append(f"<h2>{h.escape(heading)}</h2><div>")
        for hit in hits:
            src = os.path.relpath(manifest.resolve(recs[hit["id"]]).resolve(), base)
            parts.append(
                f'<figure><img src="{h.escape(Path(src).as_posix())}" alt="{h.escape(hit["id"])}">'
                f'<figcaption>#{hit["rank"]} {h.escape(hit["id"])} ({hit["score"]:.3f})</figcaption></figure>'
            )
        parts.append("</div>")
    parts.append("</body></html>\n")
    return "\n".join(parts)


def _hits(ranked, manifest: Manifest, top_k: int, min_score=None):
    recs = manifest.by_id()
    out = []
    for rid, score in ranked:
        if min_score is not None and score < min_score:
            continue
        if len(out) == top_k:
            break
        r = recs[rid]
        hit = {"rank": len(out) + 1, "id": rid, "path": r.path, "score": score}
        if r.caption is not None:
            hit["caption"] = r.caption
        out.append(hit)
    return out


def cmd_search(args) -> int:
    if args.top_k < 1:
        raise UsageError("--top-k must be at least 1")
    model = load_bundle(args.models)
    if args.style not in model.classes:
        raise UsageError(f"unknown style {args.style!r}; model styles: {', '.join(model.classes)}")
    manifest = load_manifest(args.manifest)
    if args.text:
        needle = args.text.casefold()
        candidates = [r for r in manifest.records if r.caption and needle in r.caption.casefold()]
    else:
        candidates = list(manifest.records)
    content = load_content_scores(args.content) if args.content else None
    if model.needs_content and content is None:
        raise UsageError("this model needs --content")
    if not candidates:
        log.warning("no records match the query; empty result")
        hits = []
    else:
        sub = Manifest(manifest.classes, candidates, manifest.source, manifest.root)
        channels = _corpus_channels(args, sub, model.channels)
        ids = [r.id for r in candidates if all(r.id in channels[c] for c in model.channels)]
        hits = _hits(rank_by_style(model, channels, ids, args.style, content), manifest, args.top_k, args.min_score)
    query = {"text": args.text, "style": args.style, "top_k": args.top_k, "min_score": args.min_score}
    _write_text(args.out, json.dumps({"query": query, "results": hits}, indent=1, sort_keys=True) + "\n")
    if args.html:
        title = f"{args.style} results" + (f" for '{args.text}'" if args.text else "")
        _write_text(args.html, _gallery(title, [(args.style, hits)], args.html, manifest))
    return EXIT_OK


def cmd_cross_rank(args) -> int:
    if args.top_k < 1:
        raise UsageError("--top-k must be at least 1")
    model = load_bundle(args.models)
    manifest = load_manifest(args.manifest)
    content = load_content_scores(args.content) if args.content else None
    if model.needs_content and content is None:
        raise UsageError("this model needs --content")
    result = {}
    if manifest.records:
        channels = _corpus_channels(args, manifest, model.channels)
        ids = [r.id for r in manifest.records if all(r.id in channels[c] for c in model.channels)]
    else:
        ids = []
    for style in model.classes:
        ranked = rank_by_style(model, channels, ids, style, content) if ids else []
        result[style] = _hits(ranked, manifest, args.top_k)
    _write_text(args.out, json.dumps({"styles": result}, indent=1, sort_keys=True) + "\n")
    if args.html:
        _write_text(args.html, _gallery("Cross-dataset style ranking", list(result.items()), args.html, manifest))
    return EXIT_OK


COMMANDS = {
    "extract": cmd_extract,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "search": cmd_search,
    "cross-rank": cmd_cross_rank,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"stylerec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"stylerec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"stylerec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"stylerec: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
