"""
Synthetic forgery corpus generation
"""

from .synthetic_corpus import (SyntheticSample, Corpus, SyntheticCorpusGenerator, generate_real,
                               generate_forged, generate_in_memory, load_corpus)

__all__ = [
    'SyntheticSample',
    'Corpus',
    'SyntheticCorpusGenerator',
    'generate_real',
    'generate_forged',
    'generate_in_memory',
    'load_corpus'
]
