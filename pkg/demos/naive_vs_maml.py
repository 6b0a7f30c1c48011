"""Train BiCA naively and with MAML on the synthetic keyword corpus, then compare step curves.

Runs in a few minutes on one CPU core:

    python3 demos/naive_vs_maml.py
"""

import torch

from fewmatch import metalearn as ML
from fewmatch.matchers import Matcher
from fewmatch.synthetic import KeywordCorpusConfig, keyword_task_data

torch.set_num_threads(1)

data, vocab = keyword_task_data(KeywordCorpusConfig())
print(f"{len(vocab)} tokens; classes train/val/test = "
      f"{len(data.split.train)}/{len(data.split.val)}/{len(data.split.test)}")
matcher = Matcher("bica", vocab_size=len(vocab))

budget = dict(batch_size=3, train_batches=100, val_batches=20, test_batches=40, max_epochs=6, patience=3)
for method in ("naive", "maml"):
    cfg = ML.classical_config(method, seed=0, **budget)
    trained = ML.fit(matcher, data, cfg, vocab.vectors)
    res = ML.adapt_and_evaluate(matcher, trained.params, data.stream("test", cfg), cfg)
    print(f"\n{method}: {trained.epochs} epochs, best validation macro-F1 {trained.best_score:.3f}")
    print("step   loss  macro-F1")
    for s in res.steps:
        print(f"{s['step']:>4}  {s['loss']:.3f}  {s['macro_f1']:.3f}")
