"""Repetition dropout: repetition metrics, masks and toy language models
for studying how repetitions in training data drive text degeneration."""

from .corpus import Corpus, TokenSeq, Vocabulary, WordVocabulary, build_vocab, tokenize
from .masking import (
    assemble_attention_mask,
    count_repetitive_tokens,
    find_ngrams,
    gen_mask_rand,
    gen_mask_rep,
)
from .metrics import MetricsReport, corpus_rep_n, rep_n, rep_r, rep_w
from .objectives import ObjectiveSpec
from .training import LanguageModel, TrainConfig

__version__ = "0.1.0"
