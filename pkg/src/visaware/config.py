"""Run configuration: one flat JSON document, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import SyntheticConfig
from .embedding import EmbeddingConfig, EmbeddingTrainConfig
from .errors import ConfigError
from .tasks import TASKS, TaskConfig


@dataclass
class RunConfig:
    seed: int = 0
    # shared embedding
    d_s: int = 64
    d_t: int = 64
    sru_layers: int = 1
    R: int = 16
    d_img: int = 128
    k_plus: int = 3
    k_minus: int = 3
    weldon_beta: float = 1.0
    alpha: float = 0.2
    symmetric_triplet: bool = False
    embed_epochs: int = 10
    embed_lr: float = 2e-3
    # fusion encoder
    d: int = 64
    h: int = 4
    h_f: int = 4
    L: int = 2
    d_ff: int = 256
    max_len: int = 64
    m: int = 8
    # optimisation
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    task: str = "tag"
    copy_steps: int = 1000
    # synthetic corpus
    n_topics: int = 10
    words_per_topic: int = 40
    n_pairs: int = 2000
    n_eval_pairs: int = 500
    n_tag_train: int = 600
    n_tag_test: int = 300
    n_nli_train: int = 600
    n_nli_test: int = 300
    # paths
    data_dir: str | None = None
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("d_s", "d_t", "sru_layers", "R", "d_img", "k_plus", "d", "h", "h_f", "L", "d_ff",
                    "max_len", "batch_size", "n_topics", "words_per_topic", "n_pairs")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k_minus < 0 or self.epochs < 0 or self.embed_epochs < 0:
            raise ConfigError("k_minus and epoch counts must be non-negative")
        if self.d % self.h or self.d % self.h_f:
            raise ConfigError(f"d={self.d} must be divisible by h={self.h} and h_f={self.h_f}")
        if self.m < 0:
            raise ConfigError("m must be >= 0")
        if self.k_plus + self.k_minus > self.R:
            raise ConfigError("k_plus + k_minus must not exceed R")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.lr <= 0 or self.embed_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.n_topics < 4:
            raise ConfigError("n_topics must be at least 4")
        if self.words_per_topic < 10:
            raise ConfigError("words_per_topic must be at least 10 (task sentences use half of them)")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")

    # -- derived configs ------------------------------------------------------
    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(n_topics=self.n_topics, words_per_topic=self.words_per_topic,
                               n_pairs=self.n_pairs, n_eval_pairs=self.n_eval_pairs, regions=self.R,
                               d_img=self.d_img, n_tag_train=self.n_tag_train, n_tag_test=self.n_tag_test,
                               n_nli_train=self.n_nli_train, n_nli_test=self.n_nli_test)

    def embedding(self, vocab_size: int) -> EmbeddingConfig:
        return EmbeddingConfig(vocab_size=vocab_size, d_t=self.d_t, d_s=self.d_s, d_img=self.d_img,
                               n_layers=self.sru_layers, k_plus=self.k_plus, k_minus=self.k_minus,
                               beta=self.weldon_beta, alpha=self.alpha, max_len=self.max_len,
                               symmetric=self.symmetric_triplet)

    def embedding_training(self) -> EmbeddingTrainConfig:
        return EmbeddingTrainConfig(epochs=self.embed_epochs, batch_size=self.batch_size, lr=self.embed_lr,
                                    beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps, seed=self.seed)

    def task_config(self, task: str | None = None, m: int | None = None) -> TaskConfig:
        return TaskConfig(task=task or self.task, d=self.d, n_heads=self.h, n_fusion_heads=self.h_f,
                          n_layers=self.L, d_ff=self.d_ff, max_len=self.max_len, d_img=self.d_img,
                          m=self.m if m is None else m, epochs=self.epochs, batch_size=self.batch_size,
                          lr=self.lr, seed=self.seed, copy_steps=self.copy_steps)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _check_type(name: str, value, default) -> None:
    if default is None or isinstance(default, str):
        ok = value is None or isinstance(value, str)
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if not ok:
        raise ConfigError(f"config key {name!r} has the wrong type: {value!r}")


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name: f.default for f in fields(RunConfig)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for name, value in doc.items():
        _check_type(name, value, known[name])
    try:
        return RunConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)
