"""Command-line entry points.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 I/O or checkpoint-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from .ablation import SCHEDULES, run_ablation_matrix
from .accounting import flops_report, memory_report
from .adaptor import Model, even_depths, init_adaptor
from .backbone import build_backbone, train_text_lm
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .runtime import RequestError, WorkflowRequest, bench_latency, generate
from .trainer import STAGES, run_pipeline, run_stage
from .verify import run_verify

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("iaa")


class UsageError(Exception):
    pass


def _write_jsonl(path: Path, records):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def _config(args) -> dict:
    if getattr(args, "config", None):
        return C.load_config(args.config)
    return C.preset(getattr(args, "preset", "default"))


def _datasets(cfg: dict, data_dir) -> dict[str, list[D.Sample]]:
    if data_dir:
        return D.read_datasets(data_dir)
    return D.generate_all(cfg["seed"], cfg["data"])


def _splits(cfg: dict, datasets):
    train, held = {}, {}
    for kind, samples in datasets.items():
        train[kind], held[kind] = D.split_parity(samples)
    limits = cfg.get("eval", {})
    evals = {k: held[k][: limits.get(k, len(held[k]))] for k in ("caption", "instruction", "grounding") if k in held}
    text_held = held.get("text", [])[: limits.get("text", len(held.get("text", [])))]
    return train, evals, text_held


def _attach_adaptor(model: Model, cfg: dict) -> Model:
    a = cfg["adaptor"]
    depths = even_depths(model.backbone.config.n_layers, a["n_insert"])
    stack = init_adaptor(
        model.backbone,
        depths,
        a["variant"],
        a.get("gate_mode"),
        a.get("duplicate_io", True),
        a.get("patch_size", 4),
        a.get("feature_width", 64),
        a.get("encoder_seed", 1234),
        cfg["seed"],
    )
    return Model(model.backbone, stack, dict(model.meta or {}))


def _pretrain(cfg: dict, datasets, metrics: Path | None) -> Model:
    train, _, text_held = _splits(cfg, {"text": datasets["text"]})
    bb = build_backbone(C.backbone_config(cfg))
    p = cfg["pretrain"]
    rep = train_text_lm(bb, train["text"], p["steps"], p["learning_rate"], p.get("batch_size", 32), cfg["seed"], heldout=text_held)
    if metrics is not None:
        recs = [{"stage": "pretrain", "step": i, "lr": lr, "loss": v, "split": "train", "metric_name": "loss", "value": v, "seed": cfg["seed"]} for i, (lr, v) in enumerate(zip(rep.lrs, rep.losses))]
        recs.append({"stage": "pretrain", "step": p["steps"], "lr": None, "loss": None, "split": "heldout", "metric_name": "text_loss", "value": rep.heldout_loss, "seed": cfg["seed"]})
        _write_jsonl(metrics, recs)
    return Model(bb, None, {"stage": "pretrain", "seed": cfg["seed"], "step": p["steps"], "backbone_sha256": bb.sha256()})


# -- subcommands --------------------------------------------------------------


def cmd_show_config(args):
    _emit(C.preset(args.preset))


def cmd_gen_data(args):
    cfg = _config(args)
    cfg["seed"] = args.seed if args.seed is not None else cfg["seed"]
    datasets = D.generate_all(cfg["seed"], cfg["data"])
    D.write_datasets(args.out, datasets)
    _emit({kind: len(v) for kind, v in datasets.items()})


def cmd_pretrain_lm(args):
    cfg = _config(args)
    out = Path(args.out)
    model = _pretrain(cfg, _datasets(cfg, args.data), out.with_suffix(".metrics.jsonl"))
    save_checkpoint(model, out, model.meta)
    _emit({"checkpoint": str(out), "backbone_sha256": model.meta["backbone_sha256"]})


def cmd_train(args):
    cfg = _config(args)
    model = load_checkpoint(args.input)
    if model.adaptor is None:
        model = _attach_adaptor(model, cfg)
    stages = {s.stage: s for s in C.stage_configs(cfg)}
    if args.stage not in stages:
        raise UsageError(f"stage {args.stage!r} is not in the config's stage list")
    train, evals, _ = _splits(cfg, _datasets(cfg, args.data))
    report = run_stage(model, stages[args.stage], train, evals, log_every=0)
    out = Path(args.out)
    meta = dict(model.meta or {})
    meta.update({"stage": args.stage, "seed": cfg["seed"], "step": stages[args.stage].steps})
    save_checkpoint(model, out, meta)
    _write_jsonl(out.with_suffix(".metrics.jsonl"), report.to_records())
    _emit({"checkpoint": str(out), "stage": args.stage, **report.metrics})


def cmd_pipeline(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.jsonl"
    datasets = _datasets(cfg, args.data)
    if args.input:
        base = load_checkpoint(args.input)
    else:
        base = _pretrain(cfg, datasets, metrics)
        save_checkpoint(base, out / "00-pretrain.ckpt", base.meta)
    train, evals, text_held = _splits(cfg, datasets)
    model = _attach_adaptor(Model(base.backbone, None, dict(base.meta or {})), cfg)
    probes = [s.prompt_ids + s.response_ids[:4] for s in text_held[:4]]
    model, report = run_pipeline(model, C.stage_configs(cfg), train, evals, text_held, probes, checkpoint_dir=out)
    _write_jsonl(metrics, report.to_records())
    verdict = report.verdict()
    verdict["final_metrics"] = report.stages[-1].metrics if report.stages else {}
    (out / "verdict.json").write_text(json.dumps(verdict, indent=2, sort_keys=True))
    _emit(verdict)
    return EXIT_OK if verdict["nlp_preserved"] else EXIT_VERIFY


def _parse_axes(text: str | None, cfg: dict) -> dict:
    axes = dict(cfg.get("ablation", {}))
    if not text:
        return axes
    for part in text.split(";"):
        if not part.strip():
            continue
        key, _, vals = part.partition("=")
        key = key.strip()
        items = [v.strip() for v in vals.split(",") if v.strip()]
        if key == "variants":
            bad = set(items) - {"A", "B", "C"}
        elif key == "duplicate_io":
            bad = set(items) - {"on", "off"}
            items = [v == "on" for v in items]
        elif key in ("n_insert", "seeds"):
            try:
                items = [int(v) for v in items]
            except ValueError:
                raise UsageError(f"--axes {key} takes integers") from None
            bad = set()
        elif key == "schedules":
            bad = set(items) - set(SCHEDULES)
        else:
            raise UsageError(f"unknown ablation axis {key!r}")
        if bad or not items:
            raise UsageError(f"bad values for axis {key}: {sorted(map(str, bad)) or 'empty'}")
        axes[key] = items
    return axes


def cmd_ablate(args):
    cfg = _config(args)
    axes = _parse_axes(args.axes, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datasets = _datasets(cfg, args.data)
    base = load_checkpoint(args.input) if args.input else _pretrain(cfg, datasets, None)
    train, evals, _ = _splits(cfg, datasets)
    rows_path = out / "ablation.jsonl"
    rows_path.unlink(missing_ok=True)
    report = run_ablation_matrix(
        base.backbone,
        C.stage_configs(cfg),
        train,
        evals,
        variants=axes.get("variants", ("A", "B", "C")),
        duplicate_io=axes.get("duplicate_io", (True, False)),
        n_insert=axes.get("n_insert", (1, 2, 4)),
        schedules=axes.get("schedules", SCHEDULES),
        seeds=axes.get("seeds", (0, 1, 2)),
        on_cell=lambda res: _write_jsonl(rows_path, [res.row()]),
    )
    _write_jsonl(out / "metrics.jsonl", report.to_records())
    (out / "verdicts.json").write_text(json.dumps(report.verdicts, indent=2, sort_keys=True))
    print(report.table())


def _parse_tokens(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"--prompt must be integer token ids, got {text!r}") from None


def _load_image(args) -> D.GridImage | None:
    if args.image:
        path = Path(args.image)
        rec = json.loads(path.read_text())
        if "image" in rec:
            rec = rec["image"]
        if "pixels" in rec:
            px = np.asarray(rec["pixels"], np.float32)
            if px.ndim != 2:
                raise UsageError("image pixels must be a 2-D array")
            return D.GridImage(px.shape[1], px.shape[0], px)
        return D.record_to_sample({"kind": "caption", "image": rec, "prompt_ids": [], "response_ids": [], "boxes": []}).image
    if args.scene_seed is not None:
        return D.render(D.random_scene(np.random.default_rng(args.scene_seed)))
    return None


def cmd_infer(args):
    model = load_checkpoint(args.checkpoint)
    image = _load_image(args)
    req = WorkflowRequest(args.mode, _parse_tokens(args.prompt), image, args.max_new_tokens)
    try:
        gen = generate(model, req, stop_token=None if args.no_stop else D.EOS)
    except RequestError as exc:
        raise UsageError(str(exc)) from None
    _emit({"mode": args.mode, "prompt": req.prompt, "tokens": gen.tokens, "boxes": D.parse_boxes(gen.tokens)})


def cmd_bench(args):
    model = load_checkpoint(args.checkpoint)
    if model.adaptor is None:
        raise UsageError("bench needs a checkpoint with an adaptor stack")
    rng = np.random.default_rng(args.seed)
    workload = [
        WorkflowRequest("multimodal", [D.BOS, D.CAPTION, D.SEP], D.render(D.random_scene(rng)), args.max_new_tokens)
        for _ in range(args.requests)
    ]
    rep = bench_latency(model, workload, warmup=1, repeats=args.repeats)
    for rec in rep.to_records():
        _emit(rec)
    cfg = model.backbone.config
    seq = 16 + 3 + args.max_new_tokens
    _emit({"metric_name": "flops", **flops_report(cfg, model.adaptor.depths, seq, 16).to_dict()})
    _emit({"metric_name": "flops_reference_full_scale", "layer_stack_ratio": 40 / 32})
    _emit({"metric_name": "memory", **memory_report(model.backbone, model.adaptor).to_dict()})


def cmd_verify(args):
    model = load_checkpoint(args.checkpoint)
    rep = run_verify(model, n_coords=args.coords, identity_trials=args.trials, decode_tokens=args.decode_tokens)
    for c in rep.checks:
        print(c.line())
    print("verify: " + ("PASS" if rep.passed else "FAIL"))
    return EXIT_OK if rep.passed else EXIT_VERIFY


# -- parser ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iaa", description="Frozen-backbone multimodal adaptor toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file (default: built-in preset)")
        sp.add_argument("--preset", default="default", choices=sorted(C.PRESETS))
        return sp

    s = sub.add_parser("show-config", help="print a preset configuration")
    s.add_argument("--preset", default="default", choices=sorted(C.PRESETS))
    s.set_defaults(fn=cmd_show_config)

    s = with_config(sub.add_parser("gen-data", help="write synthetic datasets"))
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = with_config(sub.add_parser("pretrain-lm", help="pretrain the text backbone"))
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_pretrain_lm)

    s = with_config(sub.add_parser("train", help="run one training stage"))
    s.add_argument("--stage", required=True, choices=STAGES)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = with_config(sub.add_parser("pipeline", help="run every stage and report NLP preservation"))
    s.add_argument("--in", dest="input", help="pretrained backbone checkpoint (default: pretrain first)")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_pipeline)

    s = with_config(sub.add_parser("ablate", help="run the ablation matrix"))
    s.add_argument("--axes", help='e.g. "variants=A,C;duplicate_io=on,off;n_insert=1,2;schedules=full;seeds=0,1"')
    s.add_argument("--in", dest="input")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("infer", help="greedy generation through either workflow")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mode", required=True, choices=("text", "multimodal"))
    s.add_argument("--prompt", required=True, help="token ids, comma or space separated")
    s.add_argument("--image", help="JSON file holding an image record or a 'pixels' array")
    s.add_argument("--scene-seed", type=int, help="render a random scene instead of --image")
    s.add_argument("--max-new-tokens", type=int, default=32)
    s.add_argument("--no-stop", action="store_true", help="do not stop at end-of-sequence")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("bench", help="latency, FLOP and memory reports")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--requests", type=int, default=4)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--max-new-tokens", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("verify", help="run the invariant suite on a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--coords", type=int, default=100)
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--decode-tokens", type=int, default=64)
    s.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.fn(args)
    except (UsageError, C.ConfigError, RequestError) as exc:
        print(f"iaa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"iaa: error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
