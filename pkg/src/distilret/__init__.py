"""distilret: label-free dense retriever training by teacher distillation.

A dual-encoder retriever is trained without relevance labels: a frozen
teacher scores retrieved passages by how well they explain the question,
and the retriever learns to match the teacher's distribution over its
own top candidates.
"""

__version__ = "0.1.0"
