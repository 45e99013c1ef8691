"""
Vanilla versus indicator fine-tuning
====================================

The full loop on a small synthetic corpus: fine-tune a vanilla model, use
it to score and annotate the corpus, fine-tune again from the same start
on the annotated data, then compare both runs on needle recall and QA
containment. Sizes here are cut down so the script finishes in a minute
or two; ``ctxscope pipeline run`` uses the full defaults.
"""

import json
import tempfile
from pathlib import Path

from ctxscope.model import ModelConfig, TrainParams
from ctxscope.pipeline import PipelineConfig, SyntheticSpec, compare, run_indicator, run_vanilla, synthesize_corpus

cfg = PipelineConfig(synthetic=SyntheticSpec(n_conversations=60), model=ModelConfig(n_layers=2, n_heads=2, d_model=32),
                     train=TrainParams(steps=60), nih_n_lens=3, nih_n_depths=3, qa_cases=5)
corpus = synthesize_corpus(cfg.synthetic)
root = Path(tempfile.mkdtemp())

# %%
vanilla = run_vanilla(corpus, cfg, root / "vanilla")
print({k: vanilla.metrics[k] for k in ("initial_loss", "final_loss", "nih_mean_recall", "qa_containment")})

# %%
indicator = run_indicator(corpus, vanilla.checkpoint_path, cfg, root / "indicator")
print({k: indicator.metrics[k] for k in ("annotation_ratio", "n_annotated", "ratio_consistent")})

# %%
print(json.dumps(compare(vanilla, indicator), indent=1))
print("artifacts under", root)
