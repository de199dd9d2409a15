"""Keyword estimation, prompt selection and constrained reading."""
from .decode import (ConstraintError, build_context, constrained_decode, extractive_read,
                     extractive_select)
from .keywords import (EstimatorError, HTTPKeywordEstimator, KeywordEstimator,
                       NearestReviewEstimator, build_keyword_training_pairs, estimate_keywords,
                       estimator_input)
from .pipeline import (ExplainConfig, Explainer, Explanation, explain, export_finetune_set,
                       sample_test_pairs)
from .reader import (EOS, NEGATIVE_PROMPT, POSITIVE_PROMPT, HTTPReader, ReaderError,
                     ReaderModel, StubCopyReader, select_prompt)

__all__ = [
    "ConstraintError", "EOS", "EstimatorError", "ExplainConfig", "Explainer", "Explanation",
    "HTTPKeywordEstimator", "HTTPReader", "KeywordEstimator", "NEGATIVE_PROMPT",
    "NearestReviewEstimator", "POSITIVE_PROMPT", "ReaderError", "ReaderModel",
    "StubCopyReader", "build_context", "build_keyword_training_pairs", "constrained_decode",
    "estimate_keywords", "estimator_input", "explain", "export_finetune_set",
    "extractive_read", "extractive_select", "sample_test_pairs", "select_prompt",
]
