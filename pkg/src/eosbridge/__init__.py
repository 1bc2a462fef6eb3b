"""Desk-scale staged pretraining of a miniature multimodal embedding model.

The package implements, from scratch and in float64:

* a tape-based reverse-mode autodiff tensor core (``autodiff``),
* attention connectivity builders for causal, bidirectional, and
  EOS-truncated regimes (``masks``),
* a tiny mixed patch/token transformer (``model``),
* the three stochastic masking policies (``masking``),
* reconstruction and contrastive objectives (``losses``),
* a deterministic symbolic multimodal data generator (``data``),
* the three-stage training pipeline with Adam and checkpointing
  (``pipeline``),
* retrieval evaluation, ablation and mask-ratio sweep harnesses
  (``evaluation``), and
* CSV/figure reporting plus the command-line surface (``report``,
  ``figures``, ``cli``).
"""

__version__ = "0.1.0"
