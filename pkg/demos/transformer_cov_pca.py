"""Query-feature covariance of MAML-trained mini-transformers with 1 and 16 heads.

Trains two small transformers on the synthetic keyword corpus, collects the
features feeding the output layer for the queries of 12 test batches
(3 meta-tasks x 10 queries each), and reports Cov_Score and the leading
principal components of each. The training budget is the short one used by
the acceptance sweep, which leaves the networks close to initialization:
raise ``train_batches`` and ``max_epochs`` for models that also classify well.

    python3 demos/transformer_cov_pca.py
"""

import numpy as np
import torch

from fewmatch import metalearn as ML
from fewmatch.analysis import cov_score, pca_project, query_features
from fewmatch.matchers import Matcher, TransformerConfig
from fewmatch.synthetic import KeywordCorpusConfig, keyword_task_data

torch.set_num_threads(1)

data, vocab = keyword_task_data(KeywordCorpusConfig())
cfg = ML.transformer_config("maml", seed=0, batch_size=3, train_batches=30, val_batches=5, max_epochs=2,
                            patience=2)
for heads in (1, 16):
    m = Matcher("transformer", vocab_size=len(vocab), transformer=TransformerConfig(layers=1, heads=heads))
    trained = ML.fit(m, data, cfg, vocab.vectors)
    F, res = query_features(m, trained.params, data, cfg, batches=12)
    pca = pca_project(F, k=2)
    share = pca.explained_variance / np.trace(np.cov(F))
    print(f"heads={heads:>2}: {F.shape[1]} queries x {F.shape[0]} dims, Cov_Score {cov_score(F):.4e}, "
          f"first two components explain {share[0]:.1%} and {share[1]:.1%}, query macro-F1 {res.final['macro_f1']:.3f}")
