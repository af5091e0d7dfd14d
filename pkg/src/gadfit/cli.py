"""Thin command-line client for the pipeline service.

Every subcommand reads a JSON run configuration, builds the service
request, and either POSTs it to a remote server (``--server``) or calls
the same endpoint handler in process.  Exit codes: 0 on success, 2 on
usage or configuration errors, 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys

from pydantic import ValidationError

from . import __version__
from .config import RunConfig, load_config

USAGE_EXIT = 2
FAILURE_EXIT = 1

_ENDPOINTS = {
    "gen-data": "/corpus/generate",
    "pretrain": "/pretrain",
    "fit": "/fit",
    "finetune": "/finetune",
    "evaluate": "/evaluate",
    "segment": "/segment",
    "ablate": "/ablate",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gadfit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"gadfit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the JSON run configuration")
        p.add_argument("--server", default=None, help="base URL of a running gadfit service")

    common(sub.add_parser("gen-data", help="generate or ingest the corpus into the run directory"))
    common(sub.add_parser("pretrain", help="pretrain the feature extractor and save weights"))
    common(sub.add_parser("fit", help="fit frozen-baseline Gaussians per category and evaluate"))
    common(sub.add_parser("finetune", help="fine-tune per category/fold and evaluate"))
    p_eval = sub.add_parser("evaluate", help="evaluate configured variants side by side")
    common(p_eval)
    p_eval.add_argument("--variants", nargs="+", default=None, help="variant names to evaluate")
    p_eval.add_argument("--report-name", default="evaluation")
    p_seg = sub.add_parser("segment", help="emit heatmap PNGs for every test image")
    common(p_seg)
    p_seg.add_argument("--variant", default="frozen")
    p_abl = sub.add_parser("ablate", help="run a configuration grid")
    common(p_abl)
    p_abl.add_argument("--axis", choices=("criterion", "augment", "gaussian"), default="criterion")
    p_srv = sub.add_parser("serve", help="run the HTTP service")
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=8000)
    return parser


def _request_payload(args, cfg: RunConfig) -> dict:
    payload = {"config": cfg.model_dump()}
    if args.command == "evaluate":
        if args.variants:
            payload["variants"] = args.variants
        payload["report_name"] = args.report_name
    elif args.command == "segment":
        payload["variant"] = args.variant
    elif args.command == "ablate":
        payload["axis"] = args.axis
    return payload


def _call_remote(server: str, path: str, payload: dict) -> dict:
    import httpx

    response = httpx.post(server.rstrip("/") + path, json=payload, timeout=None)
    if response.status_code >= 400:
        raise RuntimeError(f"server returned {response.status_code}: {response.text}")
    return response.json()


def _call_local(path: str, payload: dict) -> dict:
    from . import service

    handlers = {
        "/corpus/generate": (service.corpus_generate, service.ConfigRequest),
        "/pretrain": (service.pretrain, service.ConfigRequest),
        "/fit": (service.fit, service.ConfigRequest),
        "/finetune": (service.finetune, service.ConfigRequest),
        "/evaluate": (service.evaluate, service.EvaluateRequest),
        "/segment": (service.segment, service.SegmentRequest),
        "/ablate": (service.ablate, service.AblateRequest),
    }
    handler, model = handlers[path]
    return handler(model.model_validate(payload)).model_dump()


def _summarize(command: str, result: dict) -> str:
    if command == "gen-data":
        return f"corpus written to {result['corpus_dir']} ({len(result['categories'])} categories)"
    if command == "pretrain":
        return f"weights at {result['weights']} (holdout accuracy {result['holdout_accuracy']:.3f})"
    if command == "segment":
        total = sum(result["heatmaps"].values())
        return f"{total} heatmaps under {result['dir']}"
    if "aggregate" in result:
        lines = []
        for variant, agg in sorted(result["aggregate"].items()):
            img = agg["image_auroc"]
            lines.append(
                f"{variant}: image AUROC {img['mean']:.4f} +/- {img['sem']:.4f} "
                f"pixel AUROC {agg['pixel_auroc']['mean']:.4f} PRO30 {agg['pro_30']['mean']:.4f}"
            )
        if "csv" in result:
            lines.append(f"report: {result['csv']}")
        return "\n".join(lines)
    return json.dumps(result, indent=2)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)

    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        print(f"error: config file {args.config} not found", file=sys.stderr)
        return USAGE_EXIT
    except (ValidationError, json.JSONDecodeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return USAGE_EXIT

    path = _ENDPOINTS[args.command]
    payload = _request_payload(args, cfg)
    try:
        if args.server:
            result = _call_remote(args.server, path, payload)
        else:
            result = _call_local(path, payload)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FAILURE_EXIT
    print(_summarize(args.command, result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
