"""Declarative pipeline configuration (one JSON file drives every command).

Schema (all keys optional unless noted):

  corpus            [{"path": str, "source": "openbook"|"qasc"|"arc"|"other"}, ...]  required
  questions         {"train": str, "dev": str}                                      required
  stopwords         str path or null (packaged list)
  word_vectors      str path or null (tf-idf fallback similarity)
  scitail           str path or null
  retrieval         {"k1": 50, "top_m": 10, "k2": 50, "steps": 2}
  negatives_threshold  0.70
  encoder           {"d_model", "n_heads", "n_layers", "d_ff", "max_len"}
  ranker_training   {"epochs", "batch_size", "peak_lr", "warmup_steps",
                     "weight_decay", "val_fraction"}
  fusion_training   same keys as ranker_training (val_fraction ignored)
  ablation          {"use_step2": true, "use_skr": true, "use_kf": true}
  facts_per_input   10 or null (no cap)
  histogram_bins    20
  seed              0
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass
class RetrievalSettings:
    k1: int = 50
    top_m: int = 10
    k2: int = 50
    steps: int = 2


@dataclass
class EncoderSettings:
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 1
    d_ff: int = 64
    max_len: int = 96


@dataclass
class TrainingSettings:
    epochs: int = 30
    batch_size: int = 8
    peak_lr: float = 3e-3
    warmup_steps: int = 5
    weight_decay: float = 0.0
    val_fraction: float = 0.1


@dataclass
class AblationFlags:
    use_step2: bool = True
    use_skr: bool = True
    use_kf: bool = True


@dataclass
class PipelineConfig:
    corpus: list[dict] = field(default_factory=list)
    questions: dict = field(default_factory=dict)
    stopwords: str | None = None
    word_vectors: str | None = None
    scitail: str | None = None
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    negatives_threshold: float = 0.70
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    ranker_training: TrainingSettings = field(default_factory=TrainingSettings)
    fusion_training: TrainingSettings = field(default_factory=TrainingSettings)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    facts_per_input: int | None = 10
    histogram_bins: int = 20
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        def sub(klass, key):
            return klass(**raw.get(key, {}))

        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            corpus=list(raw.get("corpus", [])),
            questions=dict(raw.get("questions", {})),
            stopwords=raw.get("stopwords"),
            word_vectors=raw.get("word_vectors"),
            scitail=raw.get("scitail"),
            retrieval=sub(RetrievalSettings, "retrieval"),
            negatives_threshold=float(raw.get("negatives_threshold", 0.70)),
            encoder=sub(EncoderSettings, "encoder"),
            ranker_training=sub(TrainingSettings, "ranker_training"),
            fusion_training=sub(TrainingSettings, "fusion_training"),
            ablation=sub(AblationFlags, "ablation"),
            facts_per_input=raw.get("facts_per_input", 10),
            histogram_bins=int(raw.get("histogram_bins", 20)),
            seed=int(raw.get("seed", 0)),
        )

    @classmethod
    def from_file(cls, path: str | Path, seed_override: int | None = None) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            config = cls.from_dict(json.load(fh))
        if seed_override is not None:
            config.seed = seed_override
        return config

    def to_file(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, sort_keys=True, indent=2)
