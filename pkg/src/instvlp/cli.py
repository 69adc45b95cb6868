"""Command-line entry point: ``instvlp <subcommand> ...``.

Exit codes: 0 success, 2 input or usage error, 3 numerical failure.
Every command echoes its resolved configuration to stderr as JSON.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRETEXT_CHOICES, GenConfig, TrainConfig, gen_config_from_dict, load_train_config, to_dict, with_pretext
from .encoders import ImageSample, InputError, TextSample
from .numerics import io as tio
from .objectives import TrainingError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
TASKS = ("classify", "itc-retrieval", "product-retrieval", "grounding")
DECODER_TASKS = ("classify", "product-retrieval")
MATCH_RULES = {"product": "same_product", "category": "same_category"}

log = logging.getLogger("instvlp")


class UsageError(ValueError):
    pass


def _echo(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, **resolved}, sort_keys=True, default=str), file=sys.stderr)


def _parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, obj) -> None:
    _parent(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---- gen-data ------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .synthdata import generate_dataset

    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if args.sources is not None:
        base["sources_per_product"] = args.sources
    cfg = gen_config_from_dict({**to_dict(GenConfig()), **base})
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not args.force:
        raise UsageError(f"--out {out} is not empty (pass --force to write into it)")
    if args.products < 1:
        raise UsageError("--products must be >= 1")
    _echo("gen-data", {"out": str(out), "products": args.products, "heldout": args.heldout, "seed": args.seed,
                       "gen_config": to_dict(cfg)})
    manifest = generate_dataset(np.random.default_rng(args.seed), args.products, cfg, out, heldout=args.heldout)
    print(manifest)
    return EXIT_OK


# ---- pretrain ------------------------------------------------------------


def _resolve_train_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """Config file (or ``base``) first, then flag overrides."""
    cfg = load_train_config(args.config) if args.config else (base or TrainConfig())
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.pretext is not None:
        cfg = with_pretext(cfg, args.pretext)
    cfg.validate()
    return cfg


def cmd_pretrain(args) -> int:
    from . import plotting, pretrain
    from .synthdata import load_manifest

    stages = {"1": (1,), "2": (2,), "all": (1, 2)}[args.stage]
    if args.resume:
        state = pretrain.load_state(args.resume)
        if to_dict(_resolve_train_config(args, state.config)) != to_dict(state.config):
            raise UsageError("--config/--seed/--pretext disagree with the configuration stored in --resume")
    else:
        if 2 in stages and 1 not in stages:
            raise UsageError("--stage 2 needs a stage-1 checkpoint passed with --resume")
        state = pretrain.new_state(_resolve_train_config(args))
    cfg = state.config
    if 2 in stages and 1 not in stages and 1 not in state.completed:
        raise UsageError("--resume checkpoint has not completed stage 1")
    dataset = load_manifest(args.data, cfg.model.vocab_size)
    gh, gw, d_in = dataset.grid
    if (gh, gw, d_in) != (cfg.model.grid_h, cfg.model.grid_w, cfg.model.d_in):
        raise InputError(f"dataset grid {gh}x{gw}x{d_in} does not match the model config")
    out = _parent(args.out)
    csv_path = _parent(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    _echo("pretrain", {"data": str(args.data), "stage": args.stage, "out": str(out), "resume": args.resume,
                       "loss_csv": str(csv_path), "max_steps": args.max_steps, "config": to_dict(cfg)})
    try:
        pretrain.run(state, dataset, stages=stages, max_steps=args.max_steps, dump_dir=out.parent)
    finally:
        # whatever happened, leave the loss log of the steps that did run
        csv_path.write_text(pretrain.loss_csv(state.log_rows), encoding="utf-8")
    pretrain.save_state(state, out)
    if state.log_rows:
        n1 = cfg.stage1_epochs * pretrain.steps_per_epoch(dataset, cfg.batch_size)
        plotting.loss_curves(state.log_rows, csv_path.with_suffix(".png"),
                             stage2_start=n1 if 2 in state.completed or state.stage == 2 else None)
    final = state.log_rows[-1][6] if state.log_rows else 0.0
    if not np.isfinite(final):
        return EXIT_NUMERIC
    print(json.dumps({"checkpoint": str(out), "steps": state.step, "completed": state.completed,
                      "final_total": final}))
    return EXIT_OK


# ---- eval ----------------------------------------------------------------


def cmd_eval(args) -> int:
    from . import eval_transfer as ev
    from . import plotting
    from .synthdata import load_manifest

    model = ev.load_model(args.ckpt)
    if args.task in DECODER_TASKS and not model.has_decoder_training:
        raise UsageError(f"task {args.task!r} needs a checkpoint that completed stage 2")
    if args.neg_mode == "ema" and model.query_ema is None:
        raise UsageError("--neg-mode ema needs a checkpoint with a negative-query EMA")
    dataset = load_manifest(args.data, model.mcfg.vocab_size)
    gh, gw, d_in = dataset.grid
    if (gh, gw, d_in) != (model.mcfg.grid_h, model.mcfg.grid_w, model.mcfg.d_in):
        raise InputError(f"dataset grid {gh}x{gw}x{d_in} does not match the checkpoint's model")
    rng = np.random.default_rng(args.seed)
    ks = tuple(args.k)
    resolved = {"task": args.task, "ckpt": str(args.ckpt), "data": str(args.data), "match_rule": args.match_rule,
                "neg_mode": args.neg_mode, "seed": args.seed, "ks": list(ks)}
    _echo("eval", {**resolved, "train_config": to_dict(model.config)})
    if args.task == "classify":
        gen = dataset.gen_config()
        n_cat = gen.num_categories if gen else 1 + max(dataset.category(i) for i in range(len(dataset)))
        metrics = ev.evaluate_classification(model, dataset, n_cat, rng, args.neg_mode)
    elif args.task == "itc-retrieval":
        metrics = ev.evaluate_itc_retrieval(model, dataset, ks)
    elif args.task == "product-retrieval":
        metrics = ev.evaluate_product_retrieval(model, dataset, rng, MATCH_RULES[args.match_rule], args.neg_mode, ks)
    else:
        metrics = ev.evaluate_grounding(model, dataset, rng, scale=args.scale)
    report = {"task": args.task, "metrics": metrics, "ks": list(ks), "num_products": len(dataset),
              "config": resolved}
    _write_json(args.report, report)
    plotting.metric_bars(metrics, Path(args.report).with_suffix(".png"), title=args.task)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


# ---- ground --------------------------------------------------------------


def _load_image(path) -> ImageSample:
    arr = tio.load(path)
    if arr.ndim != 3:
        raise InputError(f"{path}: expected a (grid_h, grid_w, d_in) tensor")
    return ImageSample(arr.shape[0], arr.shape[1], arr.reshape(-1, arr.shape[2]))


def _parse_tokens(text: str, vocab: int) -> TextSample:
    try:
        ids = [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise InputError("--text must be whitespace-separated token ids") from None
    return TextSample(ids, vocab)


def cmd_ground(args) -> int:
    from . import eval_transfer as ev
    from . import plotting

    model = ev.load_model(args.ckpt)
    proposals_path = Path(args.proposals)
    if not proposals_path.exists():
        raise InputError(f"proposals file not found: {proposals_path}")
    raw = json.loads(proposals_path.read_text(encoding="utf-8"))
    if not isinstance(raw, list) or not raw:
        raise InputError("proposals JSON must be a non-empty list of [x1, y1, x2, y2]")
    proposals = [ev.BoxProposal(*map(float, b)) for b in raw]
    image = _load_image(args.image)
    if args.text is not None:
        prompt = _parse_tokens(args.text, model.mcfg.vocab_size)
        prompt_desc = {"text": prompt.token_ids}
    else:
        prompt = _load_image(args.query_image)
        prompt_desc = {"query_image": str(args.query_image)}
    out_json = Path(args.out) if args.out else Path(args.out_map).with_suffix(".json")
    _echo("ground", {"ckpt": str(args.ckpt), "image": str(args.image), **prompt_desc, "proposals": str(proposals_path),
                     "out_map": str(args.out_map), "out": str(out_json), "scale": args.scale})
    smap = ev.grounding_score_map(model, image, prompt, args.scale)
    ranked = ev.rank_boxes(smap, proposals)
    _parent(args.out_map).write_bytes(ev.pgm_bytes(smap.S))
    tio.save(Path(args.out_map).with_suffix(".etns"), smap.S)
    plotting.score_map(smap.S, Path(args.out_map).with_suffix(".png"), ranked)
    result = {"ranked": [{"box": b.as_list(), "score": s} for b, s in ranked], "top": ranked[0][0].as_list(),
              "map_shape": list(smap.S.shape)}
    _write_json(out_json, result)
    print(json.dumps(result["top"]))
    return EXIT_OK


# ---- gradcheck -----------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from .audit import default_audit_config, gradient_audit, severance_audit

    cfg = default_audit_config(args.batch_size)
    _echo("gradcheck", {"seed": args.seed, "tol": args.tol, "seeds": args.seeds, "model": to_dict(cfg.model),
                        "batch_size": cfg.batch_size})
    report = gradient_audit(args.seed, args.seeds, args.tol, cfg)
    for name, err in report.worst.items():
        flag = "ok" if err <= args.tol else "FAIL"
        print(f"{name:8s} worst_rel_err={err:.3e} {flag}")
    sever = severance_audit(args.seed, cfg)
    severed = all(r["implemented_encoder_grad_absmax"] == 0.0 for r in sever.values())
    print(f"severed  encoder grads from decoder losses are zero: {'ok' if severed else 'FAIL'}")
    return EXIT_OK if report.passed and severed else EXIT_NUMERIC


# ---- wiring --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="instvlp", description="Instance-centric vision-language pretraining at desk scale.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic multi-source product dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--products", type=int, required=True)
    g.add_argument("--sources", type=int)
    g.add_argument("--heldout", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="JSON with generator fields")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="run stage 1, stage 2 or both")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--stage", choices=("1", "2", "all"), default="all")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--pretext", choices=PRETEXT_CHOICES, help="keep only these pretext tasks' losses")
    t.add_argument("--loss-csv")
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("eval", help="zero-shot evaluation report")
    e.add_argument("--task", choices=TASKS, required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--match-rule", choices=tuple(MATCH_RULES), default="product")
    e.add_argument("--neg-mode", choices=("random", "text", "ema"), default="random")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--k", type=int, nargs="+", default=[1, 5, 10])
    e.add_argument("--scale", type=int, default=4)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("ground", help="rank box proposals for one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    prompt = r.add_mutually_exclusive_group(required=True)
    prompt.add_argument("--text", help="token ids, e.g. '3 41 77'")
    prompt.add_argument("--query-image")
    r.add_argument("--proposals", required=True)
    r.add_argument("--out-map", required=True)
    r.add_argument("--out")
    r.add_argument("--scale", type=int, default=4)
    r.set_defaults(func=cmd_ground)

    c = sub.add_parser("gradcheck", help="finite-difference audit of every loss and the decoder")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seeds", type=int, default=100)
    c.add_argument("--batch-size", type=int, default=2)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
