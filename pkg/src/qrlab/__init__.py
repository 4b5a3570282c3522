"""Desk-scale query-rewriting lab: retrieval, reranker feedback, policy training, evaluation."""

__version__ = "0.1.0"
