"""Multi-hop open-domain QA pipeline.

Retrieval (BM25 over a fact corpus, two-step query generation), semantic
knowledge ranking (cross-encoder over a small trainable transformer), and a
knowledge-fusion reader that scores answer options from per-answer and
common-knowledge encodings.
"""

__version__ = "0.1.0"

from .corpus import Fact, Question, load_corpus, load_questions, load_stopwords, tokenize

__all__ = [
    "__version__",
    "Fact",
    "Question",
    "load_corpus",
    "load_questions",
    "load_stopwords",
    "tokenize",
]
