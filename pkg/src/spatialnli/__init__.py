"""Spatial questions to executable logic forms.

The pipeline maps phrases to database entities, resolves ambiguous place
names with a comprehension model, injects indexed symbols into the
question, translates it with a copy-augmented sequence model and then
substitutes the symbols back.
"""

from .logic_form import parse, render, normalize, forms_equal
from .geo_store import GeoDatabase, load_database, evaluate, denotation_match
from .embeddings import EmbeddingTable, load_embeddings, semantic_distance, edit_distance
from .mapper import MapperConfig, spatial_mapper
from .injection import spatial_injection, recover, strip_injection, symbolize
from .pipeline import run_pipeline, evaluate_corpus, train_all, load_dataset

__version__ = "0.1.0"

__all__ = [
    "parse", "render", "normalize", "forms_equal",
    "GeoDatabase", "load_database", "evaluate", "denotation_match",
    "EmbeddingTable", "load_embeddings", "semantic_distance", "edit_distance",
    "MapperConfig", "spatial_mapper",
    "spatial_injection", "recover", "strip_injection", "symbolize",
    "run_pipeline", "evaluate_corpus", "train_all", "load_dataset",
]
