"""Command-line front end: ``ctxscope <subcommand> [--config FILE] [--flags]``.

Every subcommand resolves its options as built-in default < config file
(flat JSON) < command-line flag, writes its artifacts into ``--out`` (default
``$CTXSCOPE_HOME/<subcommand>``) and finishes by writing ``manifest.json``.
Exit codes: 0 success, 1 domain error (one JSON line on stderr), 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import annotate as ann
from . import nih, pipeline, probe, qa, steering
from .errors import ConfigError, CtxScopeError
from .model import Model, ModelConfig, TrainParams, init_weights, train, write_loss_trace
from .tokenizer import (Conversation, Role, Turn, detokenize, load_template, read_conversations, render, tokenize,
                        write_conversations)

log = logging.getLogger("ctxscope")

_MODEL_OPTS = {
    "checkpoint": (str, None, "model checkpoint; a freshly initialized model is used when omitted"),
    "n_layers": (int, 2, "layers of a fresh model"),
    "n_heads": (int, 4, "heads of a fresh model"),
    "d_model": (int, 64, "width of a fresh model"),
    "max_seq_len": (int, 512, "context size of a fresh model"),
    "positional": (str, "rotary", "rotary or learned"),
    "seed": (int, 0, "global seed"),
}
_GRID_OPTS = {
    "min_len": (int, 200, "shortest NIH context"),
    "max_len": (int, 4000, "longest NIH context"),
    "n_lens": (int, 20, "number of context lengths"),
    "n_depths": (int, 20, "number of needle depths"),
    "template": (str, "null", "chat template name or JSON path"),
    "response_prefix": (bool, False, "append the template's response prefix"),
    "prompt_style": (str, "document", "NIH prompt layout"),
    "needle": (str, nih.DEFAULT_NEEDLE, "needle sentence"),
    "question": (str, nih.DEFAULT_QUESTION, "retrieval question"),
    "keywords": (str, ",".join(nih.DEFAULT_KEYWORDS), "comma-separated recall keywords"),
    "haystack": (str, None, "filler text file; bundled text when omitted"),
}

COMMANDS: dict = {}


def command(name, options, help):
    def deco(fn):
        COMMANDS[name] = (options, fn, help)
        return fn
    return deco


# ---------------------------------------------------------------- helpers

def _model(cfg) -> Model:
    if cfg.get("checkpoint"):
        return Model.load(cfg["checkpoint"])
    mc = ModelConfig(n_layers=cfg["n_layers"], n_heads=cfg["n_heads"], d_model=cfg["d_model"],
                     max_seq_len=cfg["max_seq_len"], rng_seed=cfg["seed"], positional=cfg["positional"])
    return Model(mc, init_weights(mc))


def _grid(cfg, indicator=False):
    return nih.build_grid(cfg["min_len"], cfg["max_len"], cfg["n_lens"], cfg["n_depths"], cfg["needle"],
                          cfg["question"], tuple(k for k in cfg["keywords"].split(",") if k),
                          load_template(cfg["template"]).name if not Path(str(cfg["template"])).exists()
                          else cfg["template"], cfg["response_prefix"], cfg["prompt_style"], indicator)


def _haystack(cfg):
    return Path(cfg["haystack"]).read_text() if cfg.get("haystack") else None


def _sample_case(cases, seed):
    i = int(np.random.default_rng(seed).integers(len(cases)))
    return cases[i]


def _selection(cfg, model, cases, haystack):
    if cfg.get("selection"):
        return steering.HeadSelection.load(cfg["selection"])
    case = _sample_case([c for c in cases if True], cfg["seed"])
    seq = nih.render_case(case, haystack)
    if len(seq) > model.config.max_seq_len:
        fitting = [c for c in cases if len(nih.render_case(c, haystack)) <= model.config.max_seq_len]
        if not fitting:
            raise CtxScopeError("no NIH case fits the model context for head probing")
        case = _sample_case(fitting, cfg["seed"])
        seq = nih.render_case(case, haystack)
    return steering.probe_heads(model, seq, probe_id=case.case_id)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _corpus(cfg):
    if cfg.get("corpus"):
        return read_conversations(cfg["corpus"])
    spec = pipeline.SyntheticSpec(n_conversations=cfg["n_conversations"],
                                  dependent_fraction=cfg["dependent_fraction"], rng_seed=cfg["seed"])
    return pipeline.synthesize_corpus(spec)


_CORPUS_OPTS = {
    "corpus": (str, None, "conversation JSONL; a synthetic corpus when omitted"),
    "n_conversations": (int, 200, "size of the synthetic corpus"),
    "dependent_fraction": (float, 0.5, "share of context-dependent synthetic conversations"),
}


# ---------------------------------------------------------------- subcommands

@command("tokenize", {"text": (str, None, "text to tokenize"), "input": (str, None, "file to tokenize")},
         "byte-level tokenization")
def cmd_tokenize(cfg, out):
    if cfg["text"] is None and cfg["input"] is None:
        raise ConfigError("one of --text or --input is required")
    data = Path(cfg["input"]).read_bytes() if cfg["input"] else cfg["text"].encode("utf-8")
    ids = tokenize(data)
    _write_json(out / "tokens.json", {"tokens": ids, "n_tokens": len(ids), "roundtrip": detokenize(ids) == data})
    return {"tokens": out / "tokens.json"}


@command("render", {**_CORPUS_OPTS, "template": (str, "tinyllama", "chat template"),
                    "response_prefix": (bool, False, "append the response prefix to open prompts"),
                    "seed": (int, 0, "seed for the synthetic corpus")},
         "render conversations into role-annotated token sequences")
def cmd_render(cfg, out):
    tmpl = load_template(cfg["template"])
    with open(out / "rendered.jsonl", "w") as f:
        for conv in _corpus(cfg):
            s = render(conv, tmpl, cfg["response_prefix"])
            f.write(json.dumps({"id": conv.id, "tokens": s.tokens.tolist(),
                                "roles": [Role(int(r)).name for r in s.roles],
                                "turn_index": s.turn_index.tolist()}) + "\n")
    return {"rendered": out / "rendered.jsonl"}


@command("train", {**_CORPUS_OPTS, **{k: v for k, v in _MODEL_OPTS.items() if k != "checkpoint"},
                   "template": (str, "tinyllama", "chat template"),
                   "lr": (float, 3e-3, "Adam learning rate"), "steps": (int, 500, "optimizer steps"),
                   "batch_size": (int, 8, "sequences per step"), "clip": (float, 1.0, "gradient norm clip"),
                   "trunc_len": (int, 4096, "training truncation length")},
         "supervised fine-tuning with assistant-only loss")
def cmd_train(cfg, out):
    corpus, _ = ann.preprocess(_corpus(cfg))
    seqs, _ = ann.render_corpus(corpus, cfg["template"], cfg["trunc_len"])
    mc = ModelConfig(n_layers=cfg["n_layers"], n_heads=cfg["n_heads"], d_model=cfg["d_model"],
                     max_seq_len=cfg["max_seq_len"], rng_seed=cfg["seed"], positional=cfg["positional"])
    tp = TrainParams(lr=cfg["lr"], steps=cfg["steps"], batch_size=cfg["batch_size"], clip=cfg["clip"],
                     trunc_len=cfg["trunc_len"])
    weights, trace = train(seqs, mc, tp, logger=log, log_every=50)
    Model(mc, weights).save(out / "model.ckpt")
    write_loss_trace(out / "loss.csv", trace)
    _write_json(out / "train_summary.json", {"steps": len(trace), "initial_loss": trace[0] if trace else None,
                                             "final_loss": trace[-1] if trace else None})
    return {"checkpoint": out / "model.ckpt", "loss_trace": out / "loss.csv",
            "train_summary": out / "train_summary.json"}


@command("generate", {**_MODEL_OPTS, "prompt": (str, None, "user instruction"),
                      "template": (str, "tinyllama", "chat template"),
                      "response_prefix": (bool, False, "append the response prefix"),
                      "indicator": (bool, False, "append the indicator token"),
                      "max_new_tokens": (int, 50, "tokens to generate"),
                      "alpha": (float, 1.0, "steering factor; 1 disables steering"),
                      "selection": (str, None, "head selection JSON used for steering")},
         "greedy generation, optionally steered")
def cmd_generate(cfg, out):
    if cfg["prompt"] is None:
        raise ConfigError("--prompt is required")
    model = _model(cfg)
    conv = Conversation("prompt", (Turn("user", cfg["prompt"], cfg["indicator"]),))
    seq = render(conv, load_template(cfg["template"]), cfg["response_prefix"])
    spec = None
    if cfg["alpha"] != 1.0:
        sel = steering.HeadSelection.load(cfg["selection"]) if cfg["selection"] else steering.probe_heads(model, seq)
        spec = steering.SteeringSpec(cfg["alpha"], sel.targets())
    toks = model.generate(seq, cfg["max_new_tokens"], spec)
    _write_json(out / "generation.json", {"tokens": toks, "text": detokenize(toks).decode("utf-8", "replace")})
    return {"generation": out / "generation.json"}


@command("nih", {**_MODEL_OPTS, **_GRID_OPTS, "alpha": (float, 1.0, "steering factor"),
                 "selection": (str, None, "head selection JSON"), "gen_len": (int, 50, "tokens generated per case"),
                 "window": (int, 100, "recall window in tokens"),
                 "indicator": (bool, False, "append the indicator token to every query")},
         "needle-in-a-haystack grid evaluation")
def cmd_nih(cfg, out):
    model = _model(cfg)
    cases = _grid(cfg, cfg["indicator"])
    hay = _haystack(cfg)
    spec = None
    if cfg["alpha"] != 1.0:
        sel = _selection(cfg, model, cases, hay)
        sel.save(out / "selection.json")
        spec = steering.SteeringSpec(cfg["alpha"], sel.targets())
    rep = nih.run_nih(model, cases, cfg["gen_len"], spec, hay, cfg["window"])
    rep.write_heatmap(out / "nih_heatmap.csv")
    rep.write_summary(out / "nih_summary.json")
    rep.write_cells(out / "nih_cells.csv")
    arts = {"heatmap": out / "nih_heatmap.csv", "summary": out / "nih_summary.json", "cells": out / "nih_cells.csv"}
    if spec is not None:
        arts["selection"] = out / "selection.json"
    return arts


_DESK_GRID = {**_GRID_OPTS, "min_len": (int, 64, "shortest NIH context"), "max_len": (int, 256, "longest NIH context"),
              "n_lens": (int, 4, "number of context lengths"), "n_depths": (int, 5, "number of needle depths"),
              "template": (str, "tinyllama", "chat template"), "prompt_style": (str, "desk", "NIH prompt layout")}


@command("probe", {**_MODEL_OPTS, **_DESK_GRID, "layer": (int, None, "probe layer; middle layer when omitted")},
         "role-wise attention allocation with and without the chat template")
def cmd_probe(cfg, out):
    model = _model(cfg)
    layer = probe.default_probe_layer(model.config.n_layers) if cfg["layer"] is None else cfg["layer"]
    cases = _grid(cfg)
    hay = _haystack(cfg)
    fitting = [c for c in cases if len(nih.render_case(c, hay)) <= model.config.max_seq_len]
    convs = [nih.case_conversation(c, hay) for c in fitting]
    rows, du, da = probe.allocation_deltas(model, convs, cfg["template"], layer, None, cfg["response_prefix"])
    probe.write_allocation_csv(out / "allocation.csv", rows)
    _write_json(out / "allocation_summary.json", {"layer": layer, "n_cases": len(rows), "skipped": len(cases) - len(rows),
                                                  "mean_d_user": du, "mean_d_assistant": da})
    _selection(cfg | {"selection": None}, model, cases, hay).save(out / "selection.json")
    return {"allocation": out / "allocation.csv", "summary": out / "allocation_summary.json",
            "selection": out / "selection.json"}


@command("steer", {**_MODEL_OPTS, **_DESK_GRID, "alphas": (str, ",".join(map(str, steering.DEFAULT_ALPHAS)),
                                                           "comma-separated intervention factors"),
                   "selection": (str, None, "head selection JSON; probed on a sampled case when omitted"),
                   "gen_len": (int, 50, "tokens generated per case")},
         "sweep the steering factor on an NIH grid")
def cmd_steer(cfg, out):
    model = _model(cfg)
    cases = _grid(cfg)
    hay = _haystack(cfg)
    sel = _selection(cfg, model, cases, hay)
    sel.save(out / "selection.json")
    alphas = [float(a) for a in cfg["alphas"].split(",") if a.strip()]
    res = steering.sweep_alpha(model, cases, alphas, sel, cfg["gen_len"])
    res.write_csv(out / "sweep.csv")
    _write_json(out / "best.json", {"best_alpha": res.best_alpha, "mean_recall": res.recall[res.best_alpha]})
    return {"sweep": out / "sweep.csv", "best": out / "best.json", "selection": out / "selection.json"}


@command("score", {**_MODEL_OPTS, **_CORPUS_OPTS, "template": (str, "tinyllama", "chat template"),
                   "layer": (int, None, "probe layer; middle layer when omitted"),
                   "layers": (str, None, "comma-separated layers (or 'all') for the agreement matrix"),
                   "head_mode": (str, "per-token-max", "per-token-max or fixed-head"),
                   "top_fraction": (float, 0.1, "top share used by the agreement matrix")},
         "context-dependency scores per assistant turn")
def cmd_score(cfg, out):
    model = _model(cfg)
    corpus, _ = ann.preprocess(_corpus(cfg))
    layer = probe.default_probe_layer(model.config.n_layers) if cfg["layer"] is None else cfg["layer"]
    layers = [layer]
    if cfg["layers"]:
        layers = (list(range(model.config.n_layers)) if cfg["layers"] == "all"
                  else [int(x) for x in cfg["layers"].split(",")])
        layers = sorted(set(layers) | {layer})
    by_layer = ann.score_dataset_layers(corpus, model, cfg["template"], layers, cfg["head_mode"])
    ann.write_scores(out / "scores.jsonl", by_layer[layer])
    arts = {"scores": out / "scores.jsonl"}
    if len(layers) > 1:
        ls, mat = probe.layer_agreement(by_layer, cfg["top_fraction"])
        probe.write_agreement_csv(out / "agreement.csv", ls, mat)
        arts["agreement"] = out / "agreement.csv"
    if cfg.get("corpus") is None:
        write_conversations(out / "corpus.jsonl", corpus)
        arts["corpus"] = out / "corpus.jsonl"
    return arts


@command("annotate", {"corpus": (str, None, "conversation JSONL"), "scores": (str, None, "score JSONL"),
                      "beta": (float, ann.DEFAULT_BETA, "annotation threshold")},
         "append the indicator to instructions scoring above beta")
def cmd_annotate(cfg, out):
    if not cfg["corpus"] or not cfg["scores"]:
        raise ConfigError("--corpus and --scores are required")
    corpus, _ = ann.preprocess(read_conversations(cfg["corpus"]))
    annotated, records, ratio = ann.annotate(corpus, ann.read_scores(cfg["scores"]), cfg["beta"])
    write_conversations(out / "annotated.jsonl", annotated)
    _write_json(out / "ratio.json", ratio)
    return {"annotated": out / "annotated.jsonl", "ratio": out / "ratio.json"}


@command("stats", {**_CORPUS_OPTS, "template": (str, "null", "template used for conversation lengths"),
                   "bin_width": (int, 50, "histogram bin width in tokens"), "seed": (int, 0, "synthetic seed")},
         "corpus statistics and instruction-length histogram")
def cmd_stats(cfg, out):
    corpus, pstats = ann.preprocess(_corpus(cfg), template=cfg["template"])
    st = ann.dataset_stats(corpus, cfg["template"], cfg["bin_width"])
    _write_json(out / "stats.json", {**st.to_json(), "preprocess": pstats.to_json()})
    st.write_histogram(out / "instruction_lengths.csv")
    return {"stats": out / "stats.json", "histogram": out / "instruction_lengths.csv"}


@command("qa", {**_MODEL_OPTS, "qa_corpus": (str, None, "QA JSONL; synthetic cases when omitted"),
                "n_cases": (int, 20, "synthetic case count"), "style": (str, "instruction", "QA prompt style"),
                "template": (str, "tinyllama", "chat template"), "gen_len": (int, 100, "tokens generated"),
                "indicator": (bool, False, "append the indicator token")},
         "contextual QA with the containment metric")
def cmd_qa(cfg, out):
    model = _model(cfg)
    cases = qa.read_qa(cfg["qa_corpus"]) if cfg["qa_corpus"] else pipeline.synthesize_qa(
        pipeline.SyntheticSpec(rng_seed=cfg["seed"]), cfg["n_cases"])
    rep = qa.run_qa(model, cases, cfg["style"], cfg["template"], cfg["gen_len"], cfg["indicator"])
    rep.write_csv(out / "qa_results.csv")
    rep.write_summary(out / "qa_summary.json")
    return {"results": out / "qa_results.csv", "summary": out / "qa_summary.json"}


_PIPE_OPTS = {
    "action": (str, "run", "pipeline action (only 'run')"),
    "mode": (str, "vanilla", "vanilla or indicator"),
    "n_conversations": (int, 240, "synthetic corpus size"),
    "dependent_fraction": (float, 0.5, "share of context-dependent conversations"),
    "corpus": (str, None, "conversation JSONL instead of the synthetic corpus"),
    "n_layers": (int, 2, "model layers"), "n_heads": (int, 4, "model heads"), "d_model": (int, 64, "model width"),
    "max_seq_len": (int, 512, "model context"), "seed": (int, 0, "global seed"),
    "lr": (float, 3e-3, "learning rate"), "steps": (int, 500, "optimizer steps"),
    "batch_size": (int, 8, "batch size"), "template": (str, "tinyllama", "chat template"),
    "beta": (float, ann.DEFAULT_BETA, "annotation threshold"),
    "seed_checkpoint": (str, None, "seed model for indicator runs; trains a vanilla model when omitted"),
    "nih_min_len": (int, 64, "shortest NIH context"), "nih_max_len": (int, 256, "longest NIH context"),
    "nih_n_lens": (int, 4, "NIH lengths"), "nih_n_depths": (int, 5, "NIH depths"),
    "qa_cases": (int, 20, "QA cases"),
}


def _pipeline_config(cfg) -> pipeline.PipelineConfig:
    return pipeline.PipelineConfig(
        synthetic=pipeline.SyntheticSpec(n_conversations=cfg["n_conversations"],
                                         dependent_fraction=cfg["dependent_fraction"], rng_seed=cfg["seed"]),
        model=ModelConfig(n_layers=cfg["n_layers"], n_heads=cfg["n_heads"], d_model=cfg["d_model"],
                          max_seq_len=cfg["max_seq_len"], rng_seed=cfg["seed"]),
        train=TrainParams(lr=cfg["lr"], steps=cfg["steps"], batch_size=cfg["batch_size"]),
        template=cfg["template"], beta=cfg["beta"], nih_min_len=cfg["nih_min_len"],
        nih_max_len=cfg["nih_max_len"], nih_n_lens=cfg["nih_n_lens"], nih_n_depths=cfg["nih_n_depths"],
        qa_cases=cfg["qa_cases"])


@command("pipeline", _PIPE_OPTS, "end-to-end vanilla or indicator fine-tuning run")
def cmd_pipeline(cfg, out):
    if cfg["action"] != "run":
        raise ConfigError(f"unknown pipeline action {cfg['action']!r}")
    if cfg["mode"] not in ("vanilla", "indicator"):
        raise ConfigError(f"--mode must be vanilla or indicator, not {cfg['mode']!r}")
    pc = _pipeline_config(cfg)
    corpus = read_conversations(cfg["corpus"]) if cfg["corpus"] else pipeline.synthesize_corpus(pc.synthetic)
    if cfg["mode"] == "vanilla":
        m = pipeline.run_vanilla(corpus, pc, out)
    else:
        seed = cfg["seed_checkpoint"]
        if seed is None:
            seed = pipeline.run_vanilla(corpus, pc, out / "seed_vanilla").checkpoint_path
        m = pipeline.run_indicator(corpus, seed, pc, out)
    return m


@command("compare", {"vanilla": (str, None, "vanilla run directory or manifest"),
                     "indicator": (str, None, "indicator run directory or manifest")},
         "side-by-side metrics of a vanilla and an indicator run")
def cmd_compare(cfg, out):
    if not cfg["vanilla"] or not cfg["indicator"]:
        raise ConfigError("--vanilla and --indicator are required")

    def manifest(p):
        p = Path(p)
        return p / "manifest.json" if p.is_dir() else p

    rep = pipeline.compare(manifest(cfg["vanilla"]), manifest(cfg["indicator"]))
    _write_json(out / "comparison.json", rep)
    return {"comparison": out / "comparison.json"}


# ---------------------------------------------------------------- plumbing

def _add_options(p: argparse.ArgumentParser, options: dict):
    for key, (typ, _default, help) in options.items():
        flag = "--" + key.replace("_", "-")
        if typ is bool:
            p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=help)
        else:
            p.add_argument(flag, dest=key, type=typ, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxscope", description="Context-awareness diagnostics toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (options, _fn, help) in COMMANDS.items():
        p = sub.add_parser(name, help=help)
        if name == "pipeline":
            p.add_argument("action_pos", nargs="?", choices=["run"], help="pipeline action")
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--out", help="run directory (default $CTXSCOPE_HOME/<command>)")
        _add_options(p, options)
    return parser


def resolve_config(options: dict, file_values: dict, flag_values: dict) -> dict:
    """Merge built-in defaults, config file values and flags (later wins)."""
    unknown = set(file_values) - set(options)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = {k: d for k, (_t, d, _h) in options.items()}
    for k, v in file_values.items():
        typ = options[k][0]
        if v is not None and not (typ is float and isinstance(v, (int, float)) and not isinstance(v, bool)) \
                and not isinstance(v, typ):
            raise ConfigError(f"config key {k!r} expects {typ.__name__}")
        cfg[k] = float(v) if typ is float and v is not None else v
    for k, v in flag_values.items():
        if v is not None:
            cfg[k] = v
    for k in ("checkpoint", "corpus", "scores", "selection", "haystack", "qa_corpus", "input", "seed_checkpoint",
              "vanilla", "indicator"):
        if isinstance(cfg.get(k), str) and options.get(k, (None,))[0] is str:
            cfg[k] = str(Path(cfg[k]).expanduser().resolve())
    return cfg


def default_home() -> Path:
    return Path(os.environ.get("CTXSCOPE_HOME", Path.home() / ".ctxscope")).expanduser().resolve()


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _diag(exc, code) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    options, fn, _ = COMMANDS[args.command]
    flags = {k: getattr(args, k) for k in options}
    if args.command == "pipeline" and args.action_pos:
        flags["action"] = args.action_pos
    try:
        file_values = {}
        if args.config:
            try:
                file_values = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
            if not isinstance(file_values, dict):
                raise ConfigError("config file must hold a flat JSON object")
        cfg = resolve_config(options, file_values, flags)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        return _diag(exc, 2)

    out = Path(args.out).expanduser().resolve() if args.out else default_home() / args.command
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        return _diag(CtxScopeError(f"run directory {out} is locked by another process"), 1)
    os.close(fd)
    manifest_path = out / "manifest.json"
    try:
        if manifest_path.exists():
            manifest_path.unlink()
        started = time.time()
        try:
            result = fn(cfg, out)
        except ConfigError as exc:
            return _diag(exc, 2)
        except (CtxScopeError, ValueError, OSError, KeyError) as exc:
            return _diag(exc, 1)
        if isinstance(result, pipeline.RunManifest):
            return 0  # the pipeline writes its own manifest
        manifest = {"command": args.command, "config": cfg, "started": started, "finished": time.time(),
                    "artifacts": {k: {"path": str(p), "sha256": _sha(p)} for k, p in result.items()}}
        _write_json(manifest_path, manifest)
        return 0
    finally:
        lock.unlink(missing_ok=True)


def main_exit():
    sys.exit(main())
