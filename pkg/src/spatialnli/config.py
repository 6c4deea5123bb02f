"""One declarative document for every tunable; CLI flags override it."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .comprehension import ComprehensionConfig
from .translator import FULL_SCALE, TranslatorConfig

__all__ = ["MapperSettings", "PipelineSettings", "Config", "load_config", "full_scale"]


@dataclass
class MapperSettings:
    max_ngram: int = 4
    tau_sem: float = 0.368
    tau_ed: int = 2
    min_edit_length: int = 4
    stopwords: str | None = None   # file path; None keeps the built-in list
    lexicon: str | None = None     # file path; None uses the dataset's lexicon.tsv


@dataclass
class PipelineSettings:
    seed: int = 0
    augment: list = field(default_factory=lambda: ["pp", "entity", "nested", "conj"])
    max_per_source: int | None = 3
    test_fraction: float = 0.2
    inject: bool = True
    type_feeding: bool = True
    comprehension: bool = True


@dataclass
class Config:
    mapper: MapperSettings = field(default_factory=MapperSettings)
    comprehension: ComprehensionConfig = field(default_factory=ComprehensionConfig)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")

    @classmethod
    def from_dict(cls, doc: dict | None) -> "Config":
        cfg = cls()
        for section, values in (doc or {}).items():
            if not hasattr(cfg, section):
                raise ValueError(f"unknown config section {section!r}")
            _update(getattr(cfg, section), values or {}, section)
        return cfg

    def override(self, dotted: str, value):
        """``override("translator.beam_width", 3)``."""
        section, _, key = dotted.partition(".")
        _update(getattr(self, section), {key: value}, section)


def _update(obj, values: dict, where: str):
    names = {f.name: f for f in fields(obj)}
    for k, v in values.items():
        if k not in names:
            raise ValueError(f"unknown setting {where}.{k}")
        cur = getattr(obj, k)
        if is_dataclass(cur) and isinstance(v, dict):
            _update(cur, v, f"{where}.{k}")
        else:
            setattr(obj, k, v)


def load_config(path=None) -> Config:
    """YAML or JSON; a missing path gives the desk-scale defaults."""
    if path is None:
        return Config()
    return Config.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))


def full_scale() -> Config:
    """Sizes quoted for the full runs: 300-d embeddings, GRU 800/1600."""
    cfg = Config()
    for k, v in FULL_SCALE.items():
        setattr(cfg.translator, k, v)
    cfg.comprehension.hidden = 200
    cfg.comprehension.embed_dim = 300
    return cfg
