from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


@dataclass
class TrainConfig:
    """Hyperparameters of the retriever and its rating head."""

    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    tie_axis: str = "item"
    d_h: int | None = None        # query-head hidden width; None -> d
    kappa: int = 8
    heads: int = 4
    ffn: int | None = None        # feed-forward width; None -> 2d
    w_retrieve: float = 1.0
    w_rating: float = 1.0
    weight_decay: float = 0.0     # decoupled, applied by the optimizer
    max_history: int = 20
    leave_one_out: bool = True
    final_norm: bool = True       # layer norm on the block output before pooling
    cold_rate: float = 0.05       # chance a training example uses the cold user/item embedding
    select_best: bool = False     # keep the epoch with the lowest validation loss
    dtype: str = "float32"

    def __post_init__(self):
        if self.tie_axis not in ("item", "user"):
            raise ValueError(f"tie_axis must be 'item' or 'user', got {self.tie_axis!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("epochs", "batch_size", "kappa", "heads", "max_history"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.w_retrieve < 0 or self.w_rating < 0:
            raise ValueError("learning rate and loss weights must be non-negative")
        if not 0.0 <= self.cold_rate < 1.0:
            raise ValueError("cold_rate must lie in [0, 1)")

    def resolved(self, d: int) -> "TrainConfig":
        cfg = TrainConfig(**asdict(self))
        cfg.d_h = self.d_h or d
        cfg.ffn = self.ffn or 2 * d
        if d % cfg.heads:
            raise ValueError(f"embedding dim {d} not divisible by {cfg.heads} heads")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))
