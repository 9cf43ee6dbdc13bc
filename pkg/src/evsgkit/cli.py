"""Command-line entry point.

Exit codes:

    0  success
    1  unexpected error
    2  configuration error (bad config file, missing template or lexicon)
    3  data error (malformed input, invalid graph, empty prediction set)
    4  endpoint error (transport failure, HTTP error, missing mock fixture)

Batch commands that isolate per-item failures exit with the most severe
failure class among the items after writing every successful output.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import __version__
from .config import RunConfig
from .errors import DataError, EndpointError, EvsgError, GraphParseError, TransportError
from .graph import Issue, ValidationReport, serialize, validate
from .graph import parse as parse_graph
from .grpo import TrainReport, train_toy
from .metrics import compute_metrics, load_predictions, write_report
from .pipeline import (
    MultiGrainedCaptions,
    VideoRef,
    cross_level_check,
    generate_captions,
    generate_initial_graph,
    refine_graph,
    unsupported_captions,
)
from .schemas import ErrorEntry, RewardRequest, RewardResponse, score_request

log = logging.getLogger("evsg")


# --- helpers -----------------------------------------------------------------------


def _read_text(path: Path, what: str) -> str:
    if not path.is_file():
        raise DataError(f"{what} not found: {path}")
    return path.read_text(encoding="utf-8")


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    target = out / name
    target.write_text(text, encoding="utf-8")
    return target


def _jsonl(path: Path, what: str) -> list[tuple[int, str]]:
    return [(n, line) for n, line in enumerate(_read_text(path, what).splitlines(), start=1) if line.strip()]


def _workers(args: argparse.Namespace, cfg: RunConfig) -> int:
    n = args.parallelism or os.cpu_count() or 1
    if cfg.max_in_flight is not None:
        n = min(n, cfg.max_in_flight)
    return max(1, n)


def _run_isolated(items: Sequence[Any], fn: Callable[[Any], None], label: Callable[[Any], str],
                  workers: int) -> list[tuple[str, EvsgError | Exception]]:
    """Run ``fn`` per item; collect failures instead of stopping at the first."""

    def guarded(item):
        try:
            fn(item)
            return None
        except Exception as exc:  # isolated per item, reported in the summary
            return label(item), exc

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return [f for f in pool.map(guarded, items) if f is not None]


def _failure_exit(failures: list[tuple[str, Exception]], out: Path, name: str) -> int:
    if not failures:
        return 0
    summary = [{"item": item, "error": str(exc), "kind": type(exc).__name__} for item, exc in failures]
    _write(out, name, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for item, exc in failures:
        print(f"error: {item}: {exc}", file=sys.stderr)
    return max(getattr(exc, "exit_code", 1) for _, exc in failures)


# --- subcommands -------------------------------------------------------------------


def cmd_caption(args: argparse.Namespace, cfg: RunConfig) -> int:
    manifest = Path(args.manifest)
    videos = []
    for lineno, line in _jsonl(manifest, "video manifest"):
        try:
            videos.append(VideoRef.from_dict(json.loads(line)))
        except (json.JSONDecodeError, AttributeError) as exc:
            raise DataError(f"{manifest}:{lineno}: malformed manifest entry: {exc}") from None
    ids = [v.video_id for v in videos]
    if len(set(ids)) != len(ids):
        raise DataError(f"{manifest}: duplicate video ids")
    client, templates, out = cfg.client(), cfg.templates(), Path(args.out)

    def run(video: VideoRef) -> None:
        captions = generate_captions(client, video, cfg.pipeline, templates)
        _write(out, f"{video.video_id}.captions.json", captions.to_json())

    failures = _run_isolated(videos, run, lambda v: v.video_id, _workers(args, cfg))
    print(f"captioned {len(videos) - len(failures)}/{len(videos)} videos into {out}")
    return _failure_exit(failures, out, "caption_failures.json")


def _load_captions(path: Path) -> MultiGrainedCaptions:
    return MultiGrainedCaptions.from_json(_read_text(path, "captions file"))


def cmd_graph_build(args: argparse.Namespace, cfg: RunConfig) -> int:
    client, templates, out = cfg.client(), cfg.templates(), Path(args.out)

    def run(path: str) -> None:
        captions = _load_captions(Path(path))
        graph = generate_initial_graph(client, captions.middle, captions.video_id, cfg.pipeline, templates)
        _write(out, f"{captions.video_id}.init.json", serialize(graph))

    failures = _run_isolated(args.captions, run, str, _workers(args, cfg))
    return _failure_exit(failures, out, "build_failures.json")


def cmd_graph_refine(args: argparse.Namespace, cfg: RunConfig) -> int:
    captions = _load_captions(Path(args.captions))
    g_init = parse_graph(_read_text(Path(args.init), "initial graph"))
    if g_init.video_id != captions.video_id:
        raise DataError(f"graph is for {g_init.video_id!r} but captions are for {captions.video_id!r}")
    report = cross_level_check(captions, cfg.pipeline.cross_level_threshold)
    refined, rlog = refine_graph(
        cfg.client(), g_init, captions.coarse, captions.fine, cfg.lexicon(), cfg.pipeline, cfg.templates(),
        unsupported=unsupported_captions(captions, report),
    )
    out = Path(args.out)
    _write(out, f"{refined.video_id}.consistency.json", json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    _write(out, f"{refined.video_id}.graph.json", serialize(refined))
    _write(out, f"{refined.video_id}.refine_log.json", rlog.to_json())
    return 0


def cmd_graph_validate(args: argparse.Namespace, cfg: RunConfig) -> int:
    code = 0
    results = {}
    for path in args.graphs:
        try:
            report = validate(parse_graph(_read_text(Path(path), "graph file")), cfg.pipeline.min_event_seconds)
        except GraphParseError as exc:
            if exc.report is None:
                report = ValidationReport((Issue("unreadable", str(exc)),))
            else:
                report = exc.report
        except DataError as exc:
            report = ValidationReport((Issue("unreadable", str(exc)),))
        results[path] = report.to_dict()
        if report.errors:
            code = DataError.exit_code
    text = json.dumps(results, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write(Path(args.out), "validation.json", text)
    sys.stdout.write(text)
    return code


def _score_local(cfg: RunConfig, base_dir: Path) -> Callable[[RewardRequest], RewardResponse]:
    return lambda req: score_request(req, cfg.reward, base_dir=base_dir)


def _score_remote(url: str) -> Callable[[RewardRequest], RewardResponse]:
    import httpx

    client = httpx.Client(base_url=url.rstrip("/"), timeout=60.0)

    def score(req: RewardRequest) -> RewardResponse:
        if req.attention_ref is not None:
            raise DataError("attention_ref cannot be sent to the service; inline the dump")
        try:
            resp = client.post("/score", json=req.model_dump(mode="json", exclude_none=True))
        except httpx.HTTPError as exc:
            raise TransportError(f"reward service unreachable: {exc}") from None
        if resp.status_code == 422:
            raise DataError(str(resp.json().get("detail")))
        if not resp.is_success:
            raise EndpointError(resp.status_code, resp.text)
        return RewardResponse.model_validate(resp.json())

    return score


def cmd_reward(args: argparse.Namespace, cfg: RunConfig) -> int:
    from pydantic import ValidationError

    batch = Path(args.batch)
    lines = _jsonl(batch, "reward batch")
    scorer = _score_remote(args.url) if args.url else _score_local(cfg, batch.resolve().parent)

    def one(item: tuple[int, str]) -> dict:
        lineno, line = item
        rid = None
        try:
            raw = json.loads(line)
            rid = str(raw.get("id")) if isinstance(raw, dict) and raw.get("id") is not None else None
            return scorer(RewardRequest.model_validate(raw)).model_dump()
        except ValidationError as exc:
            msg = "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())
            return ErrorEntry(id=rid, line=lineno, error=msg).model_dump()
        except (json.JSONDecodeError, EvsgError) as exc:
            return ErrorEntry(id=rid, line=lineno, error=str(exc)).model_dump()

    workers = args.parallelism or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, lines))
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in results)
    _write(Path(args.out), "rewards.jsonl", text)
    n_err = sum("error" in r for r in results)
    print(f"scored {len(results) - n_err}/{len(results)} records into {Path(args.out) / 'rewards.jsonl'}")
    return 3 if n_err else 0


def cmd_serve(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .service import serve_rewards

    serve_rewards(cfg.reward, host=args.host, port=args.port)
    return 0


def cmd_train_toy(args: argparse.Namespace, cfg: RunConfig) -> int:
    grpo = cfg.grpo
    overrides = {k: getattr(args, k) for k in ("iterations", "beta") if getattr(args, k) is not None}
    if overrides:
        grpo = dataclasses.replace(grpo, **overrides)
    out = Path(args.out)
    stream = None
    if args.metrics_stream:
        out.mkdir(parents=True, exist_ok=True)
        stream = (out / "train_metrics.jsonl").open("w", encoding="utf-8")

    def on_iteration(it: int, stats: dict[str, float]) -> None:
        stream.write(json.dumps({"iteration": it, **stats}, sort_keys=True) + "\n")

    try:
        report: TrainReport = train_toy(grpo, cfg.env, cfg.reward, on_iteration if stream else None)
    finally:
        if stream is not None:
            stream.close()
    _write(out, "train_report.json", report.to_json())
    ratio = report.final_eval / report.initial_eval if report.initial_eval else float("inf")
    print(f"eval reward {report.initial_eval:.4f} -> {report.final_eval:.4f} ({ratio:.2f}x), "
          f"KL to reference {report.final_kl:.4g}")
    return 0


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    report = compute_metrics(load_predictions(args.predictions, cfg.matcher))
    write_report(report, args.out)
    sys.stdout.write(report.to_text())
    return 0


# --- parser --------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="run configuration (YAML)")
    p.add_argument("--mock", metavar="DIR", help="answer model calls from scripted fixtures in DIR")
    p.add_argument("--out", default="evsg-out", help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--parallelism", type=int, help="worker count (default: cores, capped by endpoint in-flight limit)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="evsg", description="Event-based video scene graph toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("caption", parents=[common], help="multi-grained captions for a video manifest")
    p.add_argument("manifest", help="JSONL manifest: {uri, duration, video_id?}")
    p.set_defaults(func=cmd_caption)

    g = sub.add_parser("graph", help="build, refine or validate scene graphs")
    gsub = g.add_subparsers(dest="stage", required=True)
    p = gsub.add_parser("build", parents=[common], help="initial graph from captions")
    p.add_argument("captions", nargs="+", help="*.captions.json files")
    p.set_defaults(func=cmd_graph_build)
    p = gsub.add_parser("refine", parents=[common], help="refine an initial graph and apply constraints")
    p.add_argument("--init", required=True, help="initial graph JSON")
    p.add_argument("--captions", required=True, help="captions JSON for the same video")
    p.set_defaults(func=cmd_graph_refine)
    p = gsub.add_parser("validate", parents=[common], help="check graph invariants")
    p.add_argument("graphs", nargs="+")
    p.set_defaults(func=cmd_graph_validate, out=None)

    p = sub.add_parser("reward", parents=[common], help="score a JSONL batch of model outputs")
    p.add_argument("batch")
    p.add_argument("--url", help="score through a running reward service instead of locally")
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("serve", parents=[common], help="run the reward scoring service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("train-toy", parents=[common], help="train the toy policy with GRPO")
    p.add_argument("--iterations", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--metrics-stream", action="store_true", help="also write per-iteration JSONL stats")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", parents=[common], help="grounded-QA metrics for a prediction file")
    p.add_argument("predictions")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Iterable[str] | None = None) -> int:
    args = build_parser().parse_args(list(argv) if argv is not None else None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.mock:
            cfg = cfg.with_mock(args.mock)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return args.func(args, cfg)
    except EvsgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        log.exception("unexpected failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
