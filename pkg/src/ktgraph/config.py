"""Run configuration: one flat record of every knob, with file round-trip.

Precedence when assembling an effective config is defaults < config file <
command-line flags; ``merged`` applies one override layer. The model hash
covers only fields that change the parameter set, so a checkpoint can be
evaluated under different training knobs but never under a different
architecture.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .errors import ConfigError

QUESTION_MODES = ("dynamic", "question_id_embed", "concept_id_embed")

# fields that determine the parameter set (plus graph counts)
MODEL_FIELDS = (
    "neighbor_len", "dim", "delta_t_threshold",
    "use_multiset", "use_dual_time", "use_time",
    "use_concept_in_question_output", "question_mode", "share_output_projection",
)


@dataclass
class RunConfig:
    # neighbor window and dimensions
    neighbor_len: int = 50
    dim: int = 64
    delta_t_threshold: int = 86400
    dropout: float = 0.1
    # ablation switches
    use_multiset: bool = True
    use_dual_time: bool = True
    use_time: bool = True
    use_concept_in_question_output: bool = True
    question_mode: str = "dynamic"
    share_output_projection: bool = False
    # optimizer and loop
    lr: float = 0.01
    batch_size: int = 2000
    epochs: int = 50
    patience: int | None = 5  # None disables early stopping
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 1
    compute_chunk: int = 128  # events per forward/backward slice inside a batch
    # data handling
    min_count: int = 5
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    seed: int = 0
    out_dir: str = "."

    @property
    def split_ratios(self):
        return (self.split_train, self.split_val, self.split_test)

    @property
    def adam_betas(self):
        return (self.adam_beta1, self.adam_beta2)

    def validate(self):
        positive = ("neighbor_len", "dim", "delta_t_threshold", "lr", "batch_size",
                    "epochs", "eval_every", "compute_chunk",
                    "split_train", "split_val", "split_test")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience is not None and self.patience <= 0:
            raise ConfigError(f"patience must be positive or null, got {self.patience}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.weight_decay < 0 or self.min_count < 0:
            raise ConfigError("weight_decay and min_count must be non-negative")
        if self.question_mode not in QUESTION_MODES:
            raise ConfigError(f"question_mode must be one of {QUESTION_MODES}, "
                              f"got {self.question_mode!r}")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1, got {self.split_ratios}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**data).validate()

    def merged(self, overrides):
        """A copy with every non-None override applied."""
        updates = {k: v for k, v in overrides.items() if v is not None}
        return RunConfig.from_dict({**self.to_dict(), **updates})

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid config JSON: {exc}") from None
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def model_dict(self, num_questions, num_concepts):
        d = {name: getattr(self, name) for name in MODEL_FIELDS}
        d["num_questions"] = int(num_questions)
        d["num_concepts"] = int(num_concepts)
        return d

    def model_hash(self, num_questions, num_concepts):
        canonical = json.dumps(self.model_dict(num_questions, num_concepts),
                               sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()
