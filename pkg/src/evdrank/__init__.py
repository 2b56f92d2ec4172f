"""Entity visual description (EVD) query rewriting for dual-encoder retrieval.

Subpackages by stage:

- :mod:`evdrank.kb` - entity-sense knowledge base and entity linking
- :mod:`evdrank.llm` - prompt templates, mock/remote backends, response cache
- :mod:`evdrank.encoder` - hashed-feature dual encoder, contrastive loss, retrieval
- :mod:`evdrank.rewriter` - log-linear rewrite policy with SFT and PRO training
- :mod:`evdrank.dqr` - rewrite-dataset distillation from retriever feedback
- :mod:`evdrank.pipeline` / :mod:`evdrank.cli` - end-to-end orchestration
"""

from ._kernels import backend_name
from .errors import EvdRankError
from .kb import EntitySense, EvdEntry, EvdKnowledgeBase

__version__ = "0.1.0"

__all__ = ["EntitySense", "EvdEntry", "EvdKnowledgeBase", "EvdRankError", "backend_name", "__version__"]
