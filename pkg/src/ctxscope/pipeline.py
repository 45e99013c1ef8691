"""Synthetic SFT corpora and the vanilla / indicator fine-tuning runs.

A run directory has a fixed layout::

    run_dir/
      corpus/       train.jsonl, preprocess.json, annotated.jsonl, stats.json
      scores/       scores.jsonl, ratio.json
      checkpoints/  model.ckpt, loss.csv
      eval/         nih_heatmap.csv, nih_summary.json, nih_cells.csv, qa_results.csv, qa_summary.json
      metrics.json
      manifest.json
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .annotate import (DEFAULT_BETA, annotate, dataset_stats, preprocess, ratio_from_scores, render_corpus,
                       score_dataset, write_scores)
from .errors import MismatchedEvalSets
from .model import Model, ModelConfig, TrainParams, init_weights, train, write_loss_trace
from .nih import build_grid, default_haystack, prompt_styles, run_nih
from .qa import QaCase, run_qa
from .tokenizer import Conversation, Turn, write_conversations

log = logging.getLogger(__name__)

KEYS = ("blue lantern", "red kettle", "green door", "silver key", "old clock", "paper boat", "glass jar",
        "iron gate", "wooden chair", "copper bell", "velvet box", "stone bridge", "yellow kite", "brass lamp",
        "white tower", "black cat", "quiet garden", "north window", "small drum", "tin soldier", "grey horse",
        "amber ring", "cedar chest", "orange tent")

FACTS = (
    ("What is the capital of Veloria?", "The capital of Veloria is Marlow."),
    ("Who painted the Harbor Mural?", "The Harbor Mural was painted by Ines Vale."),
    ("What color is the sky on a clear day?", "The sky is blue on a clear day."),
    ("How many legs does a spider have?", "A spider has eight legs."),
    ("What do bees make?", "Bees make honey."),
    ("Which planet is closest to the sun?", "Mercury is closest to the sun."),
    ("What is frozen water called?", "Frozen water is called ice."),
    ("What language is spoken in Brazil?", "Portuguese is spoken in Brazil."),
)

TRAIN_STYLES = ("desk",)


@dataclass(frozen=True)
class SyntheticSpec:
    n_conversations: int = 240
    n_keys: int = len(KEYS)
    n_values: int = 10
    value_len: int = 4
    distractor_range: tuple = (20, 80)
    dependent_fraction: float = 0.5
    max_turns: int = 2
    extra_turn_prob: float = 0.3
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dependent_fraction <= 1.0:
            raise ValueError("dependent_fraction must lie in [0, 1]")
        if not 1 <= self.n_keys <= len(KEYS) or not 1 <= self.n_values <= 10:
            raise ValueError("alphabet sizes out of range")
        lo, hi = self.distractor_range
        if not 0 <= lo <= hi:
            raise ValueError("bad distractor_range")


def _snippet(rng, n: int) -> str:
    hay = default_haystack()
    start = int(rng.integers(0, len(hay) - n))
    start = hay.find(" ", start) + 1 if start else 0
    return hay[start:start + n].rsplit(" ", 1)[0] if n else ""


def _value(rng, spec: SyntheticSpec) -> str:
    return "".join(str(int(d)) for d in rng.integers(0, spec.n_values, size=spec.value_len))


def _fact_sentence(key, value):
    return f"The code for the {key} is {value}."


def _dependent_turn(rng, spec):
    key = KEYS[int(rng.integers(spec.n_keys))]
    value = _value(rng, spec)
    lo, hi = spec.distractor_range
    left = _snippet(rng, int(rng.integers(lo, hi + 1)) // 2)
    right = _snippet(rng, int(rng.integers(lo, hi + 1)) // 2)
    context = " ".join(p for p in (left, _fact_sentence(key, value), right) if p)
    style = TRAIN_STYLES[int(rng.integers(len(TRAIN_STYLES)))]
    question = f"What is the code for the {key}?"
    prompt = prompt_styles()["nih"][style].format(context=context, question=question)
    return prompt, _fact_sentence(key, value)


def _independent_turn(rng, spec):
    q, a = FACTS[int(rng.integers(len(FACTS)))]
    lo, hi = spec.distractor_range
    context = _snippet(rng, int(rng.integers(lo, hi + 1)))
    style = TRAIN_STYLES[int(rng.integers(len(TRAIN_STYLES)))]
    return prompt_styles()["nih"][style].format(context=context, question=q), a


def synthesize_corpus(spec: SyntheticSpec = SyntheticSpec()) -> list[Conversation]:
    """Two species of conversations.

    Context-dependent ones bury a key/value fact in filler and ask for the
    value; context-independent ones ask a fixed-fact question whose answer
    never appears in the context and is the same across the corpus. The
    species is recorded in ``meta["species"]``.
    """
    rng = np.random.default_rng(spec.rng_seed)
    n_dep = int(round(spec.dependent_fraction * spec.n_conversations))
    species = np.array([1] * n_dep + [0] * (spec.n_conversations - n_dep))
    rng.shuffle(species)
    out = []
    for i, dep in enumerate(species):
        turns = []
        n_turns = 1
        while n_turns < spec.max_turns and rng.random() < spec.extra_turn_prob:
            n_turns += 1
        for _ in range(n_turns):
            u, a = _dependent_turn(rng, spec) if dep else _independent_turn(rng, spec)
            turns += [Turn("user", u), Turn("assistant", a)]
        out.append(Conversation(f"syn{i:05d}", tuple(turns),
                                {"species": "dependent" if dep else "independent"}))
    return out


def synthesize_qa(spec: SyntheticSpec = SyntheticSpec(), n_cases: int = 20, seed_offset: int = 7919) -> list[QaCase]:
    """Held-out contextual QA cases built like the context-dependent species."""
    rng = np.random.default_rng(spec.rng_seed + seed_offset)
    cases = []
    lo, hi = spec.distractor_range
    for i in range(n_cases):
        key = KEYS[int(rng.integers(spec.n_keys))]
        value = _value(rng, spec)
        left = _snippet(rng, int(rng.integers(lo, hi + 1)) // 2)
        right = _snippet(rng, int(rng.integers(lo, hi + 1)) // 2)
        context = " ".join(p for p in (left, _fact_sentence(key, value), right) if p)
        cases.append(QaCase(context, f"What is the code for the {key}?", (value,), f"qa{i:04d}"))
    return cases


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class PipelineConfig:
    synthetic: SyntheticSpec = SyntheticSpec()
    model: ModelConfig = ModelConfig()
    train: TrainParams = TrainParams()
    template: str = "tinyllama"
    beta: float = DEFAULT_BETA
    probe_layer: int | None = None
    head_mode: str = "per-token-max"
    nih_min_len: int = 64
    nih_max_len: int = 256
    nih_n_lens: int = 4
    nih_n_depths: int = 5
    nih_gen_len: int = 50
    nih_prompt_style: str = "desk"
    nih_response_prefix: bool = False
    qa_cases: int = 20
    qa_style: str = "instruction"
    qa_gen_len: int = 60

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        obj = dict(obj)
        kw = {}
        for f in fields(cls):
            if f.name not in obj:
                continue
            v = obj.pop(f.name)
            if f.name == "synthetic":
                v = SyntheticSpec(**{k: tuple(x) if isinstance(x, list) else x for k, x in v.items()})
            elif f.name == "model":
                v = ModelConfig(**v)
            elif f.name == "train":
                v = TrainParams(**{k: tuple(x) if isinstance(x, list) else x for k, x in v.items()})
            kw[f.name] = v
        if obj:
            raise ValueError(f"unknown pipeline config keys: {sorted(obj)}")
        return cls(**kw)

    def nih_cases(self, indicator=False):
        return build_grid(self.nih_min_len, self.nih_max_len, self.nih_n_lens, self.nih_n_depths,
                          template=self.template, response_prefix=self.nih_response_prefix,
                          prompt_style=self.nih_prompt_style, indicator=indicator)

    def qa_set(self):
        return synthesize_qa(self.synthetic, self.qa_cases)


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def eval_set_hash(cfg: PipelineConfig) -> str:
    nih = [asdict(c) | {"indicator": False} for c in cfg.nih_cases()]
    qa = [c.to_json() for c in cfg.qa_set()]
    return canonical_hash({"nih": nih, "qa": qa, "nih_gen_len": cfg.nih_gen_len, "qa_gen_len": cfg.qa_gen_len,
                           "qa_style": cfg.qa_style})


# ---------------------------------------------------------------- manifests

@dataclass
class RunManifest:
    mode: str
    run_dir: str
    config: dict
    config_hash: str
    seed: int
    corpus_path: str = ""
    checkpoint_path: str = ""
    eval_set_hash: str = ""
    artifacts: dict = field(default_factory=dict)  # name -> {"path", "sha256"}
    metrics: dict = field(default_factory=dict)
    started: float = 0.0
    finished: float = 0.0

    def add(self, name, path):
        self.artifacts[name] = {"path": str(path), "sha256": file_hash(path)}

    def save(self, path=None):
        path = Path(path or Path(self.run_dir) / "manifest.json")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path, verify: bool = True) -> "RunManifest":
        m = cls(**json.loads(Path(path).read_text()))
        if verify:
            for name, a in m.artifacts.items():
                p = Path(a["path"])
                if not p.exists():
                    raise MismatchedEvalSets(f"artifact {name!r} missing at {p}")
                if file_hash(p) != a["sha256"]:
                    raise ValueError(f"artifact {name!r} at {p} does not match its recorded hash")
        return m


def _dirs(run_dir):
    run_dir = Path(run_dir).resolve()
    for sub in ("corpus", "scores", "checkpoints", "eval"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def _train_and_eval(corpus, cfg: PipelineConfig, run_dir: Path, manifest: RunManifest, indicator: bool):
    seqs, n_cut = render_corpus(corpus, cfg.template, cfg.train.trunc_len)
    weights, trace = train(seqs, cfg.model, cfg.train, logger=log, log_every=50)
    model = Model(cfg.model, weights)
    ckpt = run_dir / "checkpoints" / "model.ckpt"
    model.save(ckpt)
    write_loss_trace(run_dir / "checkpoints" / "loss.csv", trace)
    manifest.checkpoint_path = str(ckpt)
    manifest.add("checkpoint", ckpt)
    manifest.add("loss_trace", run_dir / "checkpoints" / "loss.csv")

    nih = run_nih(model, cfg.nih_cases(), generation_len=cfg.nih_gen_len, indicator=indicator)
    nih.write_heatmap(run_dir / "eval" / "nih_heatmap.csv")
    nih.write_summary(run_dir / "eval" / "nih_summary.json")
    nih.write_cells(run_dir / "eval" / "nih_cells.csv")
    qa = run_qa(model, cfg.qa_set(), cfg.qa_style, cfg.template, cfg.qa_gen_len, indicator=indicator)
    qa.write_csv(run_dir / "eval" / "qa_results.csv")
    qa.write_summary(run_dir / "eval" / "qa_summary.json")
    for name in ("nih_heatmap.csv", "nih_summary.json", "nih_cells.csv", "qa_results.csv", "qa_summary.json"):
        manifest.add(name.rsplit(".", 1)[0], run_dir / "eval" / name)

    init_loss = trace[0] if trace else None
    metrics = {
        "initial_loss": init_loss,
        "final_loss": trace[-1] if trace else None,
        "loss_reduction": (1.0 - float(np.mean(trace[-20:])) / init_loss) if trace else 0.0,
        "n_truncated": n_cut,
        "nih_mean_recall": nih.mean_recall,
        "nih_mean_err": nih.mean_err,
        "nih_failures": nih.failures,
        "qa_containment": qa.mean_containment,
    }
    return model, metrics


def run_vanilla(corpus, cfg: PipelineConfig, run_dir) -> RunManifest:
    """Preprocess, train without indicators, evaluate NIH and QA, persist everything."""
    run_dir = _dirs(run_dir)
    manifest = RunManifest("vanilla", str(run_dir), cfg.to_json(), canonical_hash(cfg.to_json()),
                           cfg.model.rng_seed, started=time.time(), eval_set_hash=eval_set_hash(cfg))
    clean, pstats = preprocess(corpus, template=cfg.template)
    corpus_path = run_dir / "corpus" / "train.jsonl"
    write_conversations(corpus_path, clean)
    _write_json(run_dir / "corpus" / "preprocess.json", pstats.to_json())
    manifest.corpus_path = str(corpus_path)
    manifest.add("corpus", corpus_path)
    manifest.add("preprocess", run_dir / "corpus" / "preprocess.json")
    _, metrics = _train_and_eval(clean, cfg, run_dir, manifest, indicator=False)
    _write_json(run_dir / "metrics.json", metrics)
    manifest.add("metrics", run_dir / "metrics.json")
    manifest.metrics = metrics
    manifest.finished = time.time()
    manifest.save()
    return manifest


def run_indicator(corpus, seed_model, cfg: PipelineConfig, run_dir) -> RunManifest:
    """Score with the seed model, annotate at ``cfg.beta``, train with indicators
    and evaluate with the indicator appended to every query."""
    run_dir = _dirs(run_dir)
    if not isinstance(seed_model, Model):
        seed_model = Model.load(seed_model)
    manifest = RunManifest("indicator", str(run_dir), cfg.to_json(), canonical_hash(cfg.to_json()),
                           cfg.model.rng_seed, started=time.time(), eval_set_hash=eval_set_hash(cfg))
    clean, pstats = preprocess(corpus, template=cfg.template)
    _write_json(run_dir / "corpus" / "preprocess.json", pstats.to_json())
    records = score_dataset(clean, seed_model, cfg.template, cfg.probe_layer, cfg.head_mode)
    annotated, records, ratio = annotate(clean, records, cfg.beta)
    write_scores(run_dir / "scores" / "scores.jsonl", records)
    _write_json(run_dir / "scores" / "ratio.json", ratio)
    corpus_path = run_dir / "corpus" / "annotated.jsonl"
    write_conversations(corpus_path, annotated)
    stats = dataset_stats(annotated, cfg.template)
    _write_json(run_dir / "corpus" / "stats.json", stats.to_json())
    stats.write_histogram(run_dir / "corpus" / "instruction_lengths.csv")
    manifest.corpus_path = str(corpus_path)
    for name, p in (("corpus", corpus_path), ("preprocess", run_dir / "corpus" / "preprocess.json"),
                    ("scores", run_dir / "scores" / "scores.jsonl"), ("ratio", run_dir / "scores" / "ratio.json"),
                    ("stats", run_dir / "corpus" / "stats.json"),
                    ("instruction_lengths", run_dir / "corpus" / "instruction_lengths.csv")):
        manifest.add(name, p)
    _, metrics = _train_and_eval(annotated, cfg, run_dir, manifest, indicator=True)
    metrics.update({"beta": cfg.beta, "annotation_ratio": ratio["ratio"], "n_annotated": ratio["n_annotated"],
                    "n_instructions": ratio["n_instructions"],
                    "ratio_consistent": ratio == ratio_from_scores(records, cfg.beta)})
    _write_json(run_dir / "metrics.json", metrics)
    manifest.add("metrics", run_dir / "metrics.json")
    manifest.metrics = metrics
    manifest.finished = time.time()
    manifest.save()
    return manifest


COMPARED = ("nih_mean_recall", "qa_containment")


def compare(vanilla, indicator) -> dict:
    """Metric deltas (indicator - vanilla); flags, but does not fail, non-improvements."""
    # metric files are read as they are now, so hand-edited ones are compared as edited
    vanilla = vanilla if isinstance(vanilla, RunManifest) else RunManifest.load(vanilla, verify=False)
    indicator = indicator if isinstance(indicator, RunManifest) else RunManifest.load(indicator, verify=False)
    if vanilla.eval_set_hash != indicator.eval_set_hash:
        raise MismatchedEvalSets("runs were evaluated on different case sets")
    vm, im = _metrics(vanilla), _metrics(indicator)
    report = {"beta": im.get("beta"), "annotation_ratio": im.get("annotation_ratio"), "metrics": {}, "flags": []}
    for k in COMPARED:
        if k not in vm or k not in im:
            raise MismatchedEvalSets(f"metric {k!r} missing from a run")
        report["metrics"][k] = {"vanilla": vm[k], "indicator": im[k], "delta": im[k] - vm[k]}
        if im[k] <= vm[k]:
            report["flags"].append(f"{k}: indicator <= vanilla")
    return report


def _metrics(m: RunManifest) -> dict:
    art = m.artifacts.get("metrics")
    if art is None or not Path(art["path"]).exists():
        raise MismatchedEvalSets(f"run {m.run_dir} has no metric artifact")
    return json.loads(Path(art["path"]).read_text())


def initial_model(cfg: PipelineConfig) -> Model:
    return Model(cfg.model, init_weights(cfg.model))


def smoke_config(**overrides) -> PipelineConfig:
    """The desk-scale configuration used by the acceptance run."""
    return replace(PipelineConfig(), **overrides)
