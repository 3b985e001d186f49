"""Command-line entry point for the count, match, eval, sweep and bench stages.

Every flag can also be given in a ``--config`` JSON file, either at the top
level of a ``"common"`` section or inside a section named after the
subcommand. Keys are the flag names with dashes turned into underscores.
Precedence is flags, then the subcommand section, then ``"common"``, then
built-in defaults.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import statistics
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from . import __version__
from .core.coco import GroundTruth, detections_to_coco, load_detections, load_ground_truth, read_json, write_json
from .core.types import CountPrediction, Setting
from .errors import CountMatchError, InputError
from .metrics.detection import sweep_thresholds
from .metrics.report import evaluate
from .pipeline.counter import CounterClientConfig, HttpCounter, ReplayCounter, audit_path
from .pipeline.prompts import build_count_prompt, load_prompt_spec, parse_preset
from .pipeline.runner import STAGES, ProposalConfig, StageTiming, load_manifest, run_counting, run_matching
from .similarity import DEFAULT_EQUIVALENCE_THRESHOLD, DEFAULT_TEMPLATE, FileEmbeddingProvider

log = logging.getLogger("countmatch")

EXIT_OK, EXIT_USAGE = 0, 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Flags:
    """Registers flags with a ``None`` default so config-file values can fill gaps."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.defaults: dict[str, Any] = {}
        self.required: set[str] = set()

    def add(self, flag: str, default: Any = None, required: bool = False, **kw) -> None:
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        if required:
            self.required.add(dest)
        help_text = kw.pop("help", "")
        if default is not None:
            help_text = f"{help_text} (default: {default})".strip()
        elif required:
            help_text = f"{help_text} (required)".strip()
        self.parser.add_argument(flag, dest=dest, default=None, help=help_text, **kw)


def _common(flags: _Flags) -> None:
    flags.add("--out", required=True, help="output directory")
    flags.add("--config", help="JSON config file")
    flags.add("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, _Flags]]:
    parser = _Parser(prog="countmatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"countmatch {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    registry: dict[str, _Flags] = {}

    p = sub.add_parser("count", help="query the counting model for every manifest image")
    f = registry["count"] = _Flags(p)
    _common(f)
    f.add("--manifest", required=True, help="manifest JSON")
    f.add("--prompt", default="nwpu:open-vocabulary", help="preset dataset:setting[:parent] or a prompt-spec JSON file")
    f.add("--format", default="json", choices=["json", "markdown"], help="prompt rendering")
    f.add("--replay", help="serve replies from this audit directory instead of the network")
    f.add("--endpoint", default=CounterClientConfig.endpoint, help="chat-completions URL")
    f.add("--model", default=CounterClientConfig.model)
    f.add("--temperature", default=CounterClientConfig.temperature, type=float)
    f.add("--top-p", default=CounterClientConfig.top_p, type=float)
    f.add("--timeout", default=CounterClientConfig.timeout, type=float, help="seconds per request")
    f.add("--max-retries", default=CounterClientConfig.max_retries, type=int, help="attempts per image")
    f.add("--backoff", default=CounterClientConfig.backoff, type=float, help="initial retry delay in seconds")
    f.add("--api-key-env", default=CounterClientConfig.api_key_env, help="environment variable holding the API key")
    f.add("--max-concurrent", default=CounterClientConfig.max_concurrent, type=int, help="concurrent request ceiling")
    f.add("--workers", default=1, type=int)
    f.add("--keep-going", default=False, action=argparse.BooleanOptionalAction, help="log per-image failures and continue")

    p = sub.add_parser("match", help="label proposals with counted categories")
    f = registry["match"] = _Flags(p)
    _common(f)
    f.add("--manifest", required=True, help="manifest JSON")
    f.add("--counts", required=True, help="directory of per-image counts written by 'count'")
    f.add("--audit", help="audit directory; adds counter latency and tokens to timing")
    f.add("--category-embeddings", help="overrides the manifest's category embedding directory")
    f.add("--template", default=DEFAULT_TEMPLATE, help="category prompt template")
    f.add("--workers", default=1, type=int)
    f.add("--keep-going", default=False, action=argparse.BooleanOptionalAction, help="log per-image failures and continue")
    for name, value in ProposalConfig().to_dict().items():
        f.add("--" + name.replace("_", "-"), default=value, type=type(value), help="mask generator setting, recorded only")

    p = sub.add_parser("eval", help="score detections against ground truth")
    f = registry["eval"] = _Flags(p)
    _common(f)
    f.add("--detections", required=True, help="COCO-style detections JSON")
    f.add("--ground-truth", required=True, help="COCO ground truth JSON")
    f.add("--setting", default=Setting.OPEN_VOCABULARY.value, choices=[s.value for s in Setting])
    f.add("--classes", help="comma-separated class list (default: ground-truth categories)")
    f.add("--counts", help="directory of per-image counts; otherwise counts come from detections")
    f.add("--text-embeddings", help="embedding directory for category-name equivalence")
    f.add("--equivalence-threshold", default=DEFAULT_EQUIVALENCE_THRESHOLD, type=float)
    f.add("--template", default=DEFAULT_TEMPLATE, help="category prompt template")
    f.add("--iou", default=0.5, type=float, help="IoU threshold")
    f.add("--mask", action=argparse.BooleanOptionalAction, help="force (or skip) mask metrics")

    p = sub.add_parser("sweep", help="mF1 over score thresholds for scored detections")
    f = registry["sweep"] = _Flags(p)
    _common(f)
    f.add("--detections", required=True, help="COCO-style detections JSON with scores")
    f.add("--ground-truth", required=True, help="COCO ground truth JSON")
    f.add("--classes", help="comma-separated class list (default: ground-truth categories)")
    f.add("--step", default=0.02, type=float)
    f.add("--iou", default=0.5, type=float, help="IoU threshold")
    f.add("--iou-type", default="box", choices=["box", "mask"])

    p = sub.add_parser("bench", help="summarize per-stage timing records")
    f = registry["bench"] = _Flags(p)
    _common(f)
    f.add("--timing", required=True, nargs="+", help="timing.jsonl files written by 'match'")

    return parser, registry


def resolve_config(command: str, args: argparse.Namespace, flags: _Flags) -> dict[str, Any]:
    file_cfg: dict[str, Any] = {}
    if args.config:
        data = read_json(args.config)
        if not isinstance(data, dict):
            raise InputError(f"{args.config}: config must be a JSON object")
        common = data.get("common", {})
        section = data.get(command, {})
        for name, block in (("common", common), (command, section)):
            if not isinstance(block, dict):
                raise InputError(f"{args.config}: section {name!r} must be an object")
        file_cfg = {**common, **section}
        unknown = sorted(set(file_cfg) - set(flags.defaults))
        if unknown:
            raise UsageError(f"{args.config}: unknown keys for '{command}': {', '.join(unknown)}")
    resolved = {}
    for dest, default in flags.defaults.items():
        value = getattr(args, dest)
        if value is None:
            value = file_cfg.get(dest, default)
        resolved[dest] = value
    missing = sorted("--" + d.replace("_", "-") for d in flags.required if resolved[d] is None)
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    return resolved


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_csv(path: Path, rows: Sequence[Sequence[Any]]) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    _write_text(path, buf.getvalue())


def _metadata(out: Path, command: str, cfg: dict[str, Any], extra: Optional[dict] = None) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "config": cfg,
    }
    if extra:
        payload.update(extra)
    write_json(out / "run_metadata.json", payload)


def _classes(cfg: dict[str, Any]) -> Optional[list[str]]:
    if not cfg.get("classes"):
        return None
    return [c.strip() for c in str(cfg["classes"]).split(",") if c.strip()]


def _load_counts_dir(directory: Path, image_ids: Sequence[str], strict: bool) -> dict[str, CountPrediction]:
    out = {}
    for image_id in image_ids:
        path = audit_path(directory, image_id)
        if not path.exists():
            if strict:
                raise InputError(f"counts file not found: {path}")
            continue
        data = read_json(path)
        counts = data.get("counts", data) if isinstance(data, dict) else None
        if not isinstance(counts, dict):
            raise InputError(f"{path}: expected a JSON object of counts")
        out[image_id] = CountPrediction(image_id, counts)
    return out


def cmd_count(cfg: dict[str, Any], out: Path) -> int:
    manifest = load_manifest(cfg["manifest"])
    text = cfg["prompt"]
    if Path(text).is_file():
        spec = load_prompt_spec(text, cfg["format"])
    else:
        spec = parse_preset(text, cfg["format"])
    prompt = build_count_prompt(spec)
    if cfg["replay"]:
        counter = ReplayCounter(cfg["replay"])
    else:
        counter = HttpCounter(
            CounterClientConfig(
                endpoint=cfg["endpoint"],
                model=cfg["model"],
                temperature=cfg["temperature"],
                top_p=cfg["top_p"],
                timeout=cfg["timeout"],
                max_retries=cfg["max_retries"],
                api_key_env=cfg["api_key_env"],
                backoff=cfg["backoff"],
                max_concurrent=cfg["max_concurrent"],
            )
        )
    counts, failures = run_counting(
        manifest, counter, prompt, out / "audit", cfg["workers"], cfg["keep_going"]
    )
    for image_id, pred in counts.items():
        write_json(audit_path(out / "counts", image_id), {"image_id": image_id, "counts": dict(pred.counts)})
    if failures:
        write_json(out / "errors.json", [f.to_dict() for f in failures])
    _metadata(out, "count", cfg, {"prompt": prompt})
    return EXIT_OK


def cmd_match(cfg: dict[str, Any], out: Path) -> int:
    manifest = load_manifest(cfg["manifest"])
    ids = [e.id for e in manifest.images]
    counts = _load_counts_dir(Path(cfg["counts"]), ids, strict=not cfg["keep_going"])
    records = None
    if cfg["audit"]:
        records = {}
        for image_id in ids:
            path = audit_path(cfg["audit"], image_id)
            if path.exists():
                records[image_id] = read_json(path)
    cat_provider = FileEmbeddingProvider(cfg["category_embeddings"]) if cfg["category_embeddings"] else None
    result = run_matching(
        manifest, counts, cat_provider, cfg["template"], cfg["workers"], cfg["keep_going"], records
    )
    category_ids = None
    if manifest.ground_truth is not None and manifest.ground_truth.exists():
        category_ids = load_ground_truth(manifest.ground_truth).category_ids
    write_json(out / "detections.json", detections_to_coco(result.detections, category_ids))
    _write_text(out / "timing.jsonl", "".join(json.dumps(t.to_dict()) + "\n" for t in result.timings))
    if result.failures:
        write_json(out / "errors.json", [f.to_dict() for f in result.failures])
    proposal_cfg = {k: cfg[k] for k in ProposalConfig().to_dict()}
    _metadata(out, "match", cfg, {"proposal_config": proposal_cfg, "warnings": result.warnings})
    return EXIT_OK


def _gt_and_dets(cfg: dict[str, Any]) -> tuple[GroundTruth, list]:
    gt = load_ground_truth(cfg["ground_truth"])
    return gt, load_detections(cfg["detections"], gt)


def cmd_eval(cfg: dict[str, Any], out: Path) -> int:
    gt, dets = _gt_and_dets(cfg)
    pred_counts = None
    if cfg["counts"]:
        loaded = _load_counts_dir(Path(cfg["counts"]), list(gt.images), strict=False)
        pred_counts = {k: dict(v.counts) for k, v in loaded.items()}
    provider = FileEmbeddingProvider(cfg["text_embeddings"]) if cfg["text_embeddings"] else None
    report = evaluate(
        dets,
        gt,
        setting=cfg["setting"],
        classes=_classes(cfg),
        pred_counts=pred_counts,
        text_provider=provider,
        equivalence_threshold=cfg["equivalence_threshold"],
        iou_thresh=cfg["iou"],
        mask=cfg["mask"],
        template=cfg["template"],
    )
    for w in report.diagnostics.get("warnings", []):
        log.warning(w)
    _write_text(out / "report.json", report.to_json())
    _write_text(out / "report.csv", report.to_csv())
    _metadata(out, "eval", cfg)
    return EXIT_OK


def cmd_sweep(cfg: dict[str, Any], out: Path) -> int:
    gt, dets = _gt_and_dets(cfg)
    if any(d.score is None for d in dets):
        raise InputError("detections carry no scores; use 'countmatch eval' for confidence-free metrics")
    classes = _classes(cfg) or gt.category_names
    res = sweep_thresholds(dets, gt.instances, classes, cfg["step"], cfg["iou_type"], cfg["iou"])
    rows: list[list[Any]] = [["threshold", "mf1", "survivors", "best"]]
    for (t, v), n in zip(res.curve, res.survivors):
        rows.append([t, v, n, int(t == res.best_threshold)])
    _write_csv(out / "curve.csv", rows)
    write_json(out / "sweep.json", {"best_threshold": res.best_threshold, "best_mf1": res.best_mf1, "points": len(res.curve)})
    _metadata(out, "sweep", cfg)
    return EXIT_OK


def _read_timings(paths: Sequence[str]) -> list[StageTiming]:
    fields = set(StageTiming.__dataclass_fields__)
    out = []
    for path in paths:
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except FileNotFoundError:
            raise InputError(f"timing file not found: {path}") from None
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{n}: invalid JSON ({exc})") from None
            out.append(StageTiming(**{k: v for k, v in rec.items() if k in fields}))
    return out


def _blank(v: Any) -> Any:
    return "" if v is None else v


def bench_tables(timings: Sequence[StageTiming]) -> tuple[list[list[Any]], list[list[Any]]]:
    """Per-stage summary rows and per-image scatter rows."""
    summary: list[list[Any]] = [["stage", "images", "mean_ms", "median_ms", "total_ms", "slope_ms_per_box"]]
    for stage in STAGES:
        pts = [(t.n_detections, getattr(t, stage)) for t in timings if getattr(t, stage) is not None]
        if not pts:
            continue
        vals = [v for _, v in pts]
        xs = [x for x, _ in pts]
        slope = statistics.linear_regression(xs, vals).slope if len(set(xs)) > 1 else None
        summary.append([stage, len(vals), statistics.fmean(vals), statistics.median(vals), sum(vals), _blank(slope)])
    cols = ["image_id", "n_boxes", "n_proposals", *STAGES, "prompt_tokens", "completion_tokens"]
    per_image: list[list[Any]] = [cols]
    for t in timings:
        per_image.append(
            [t.image_id, t.n_detections, t.n_proposals]
            + [_blank(getattr(t, s)) for s in STAGES]
            + [_blank(t.prompt_tokens), _blank(t.completion_tokens)]
        )
    return summary, per_image


def cmd_bench(cfg: dict[str, Any], out: Path) -> int:
    summary, per_image = bench_tables(_read_timings(cfg["timing"]))
    _write_csv(out / "summary.csv", summary)
    _write_csv(out / "per_image.csv", per_image)
    _metadata(out, "bench", cfg)
    return EXIT_OK


COMMANDS = {"count": cmd_count, "match": cmd_match, "eval": cmd_eval, "sweep": cmd_sweep, "bench": cmd_bench}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser, registry = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = resolve_config(args.command, args, registry[args.command])
    except UsageError as exc:
        print(f"countmatch {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CountMatchError as exc:
        print(f"countmatch {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=cfg["log_level"], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"countmatch {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CountMatchError as exc:
        print(f"countmatch {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"countmatch {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        log.exception("internal error")
        return 4


if __name__ == "__main__":
    sys.exit(main())
