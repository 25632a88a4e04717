"""uniboost: a desk-scale multitask fine-tuning pipeline.

Small transformer encoders over a synthetic shape world, three pretraining
regimes, a shared fusion neck with per-task routes, a single-task-batch
round scheduler, and the split / metric / reporting machinery needed to
compare pretraining streams on zero-shot transfer.
"""

__version__ = "0.1.0"
