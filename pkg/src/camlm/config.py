"""Flat ``key=value`` run configuration.

One key per line, ``#`` starts a comment, blank lines are ignored. Unknown
keys and ill-typed values are rejected with the offending field named.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .corpus import MODES, CorpusConfig
from .lm import LmConfig


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunConfig:
    # model
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    n_slots: int = 8
    max_positions: int = 128
    max_generate_factor: int = 4
    temperature: float = 1.0
    pos_scheme: str = "segment"
    n_encoder_blocks: int = 2
    n_retrieve: int = 2
    init_memory: str = "zero"
    # ablation
    use_mem_t: bool = True
    use_mem_s: bool = True
    mask_kind: str = "prefix"
    # corpus
    text_vocab: int = 16
    speech_vocab: int = 16
    n_speakers: int = 4
    state_modulus: int = 4
    sentences_per_paragraph: int = 6
    min_sentence_len: int = 3
    max_sentence_len: int = 8
    mode: str = "local"
    d_xvec: int = 8
    # training
    seed: int = 0
    steps: int = 8000
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    bptt: str = "full"
    curriculum_steps: int = 6000
    eval_interval: int = 500
    train_size: int = 20000
    val_size: int = 200
    val_seed: int = 1_000_003
    # paths
    dataset: str = ""
    checkpoint: str = ""
    metrics: str = ""

    def lm_config(self) -> LmConfig:
        return LmConfig(
            d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers, n_slots=self.n_slots,
            text_vocab=self.text_vocab, speech_vocab=self.speech_vocab, d_xvec=self.d_xvec,
            max_positions=self.max_positions, max_generate_factor=self.max_generate_factor,
            temperature=self.temperature, pos_scheme=self.pos_scheme,
            use_mem_t=self.use_mem_t, use_mem_s=self.use_mem_s, mask_kind=self.mask_kind,
        )

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            text_vocab=self.text_vocab, speech_vocab=self.speech_vocab, n_speakers=self.n_speakers,
            state_modulus=self.state_modulus, sentences_per_paragraph=self.sentences_per_paragraph,
            min_sentence_len=self.min_sentence_len, max_sentence_len=self.max_sentence_len,
            mode=self.mode, d_xvec=self.d_xvec, seed=self.seed,
        )

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> "RunConfig":
        checks = [
            ("d_model", self.d_model > 0 and self.d_model % max(self.n_heads, 1) == 0,
             "must be positive and divisible by n_heads"),
            ("n_heads", self.n_heads > 0, "must be positive"),
            ("n_layers", self.n_layers > 0, "must be positive"),
            ("n_slots", self.n_slots > 0 or not (self.use_mem_t or self.use_mem_s),
             "must be positive when a memory is enabled"),
            ("pos_scheme", self.pos_scheme in ("absolute", "segment"), "must be 'absolute' or 'segment'"),
            ("mask_kind", self.mask_kind in ("prefix", "causal"), "must be 'prefix' or 'causal'"),
            ("init_memory", self.init_memory in ("zero", "learned"), "must be 'zero' or 'learned'"),
            ("mode", self.mode in MODES, f"must be one of {MODES}"),
            ("state_modulus", self.state_modulus >= 2, "must be at least 2"),
            ("speech_vocab", self.speech_vocab > self.state_modulus, "must exceed state_modulus"),
            ("sentences_per_paragraph", self.sentences_per_paragraph >= 2, "must be at least 2"),
            ("min_sentence_len", 1 <= self.min_sentence_len <= self.max_sentence_len,
             "must be in [1, max_sentence_len]"),
            ("n_speakers", 1 <= self.n_speakers <= self.d_xvec, "must be in [1, d_xvec]"),
            ("batch_size", self.batch_size > 0, "must be positive"),
            ("steps", self.steps >= 0, "must be non-negative"),
            ("curriculum_steps", self.curriculum_steps >= 0, "must be non-negative"),
            ("eval_interval", self.eval_interval > 0, "must be positive"),
            ("lr", self.lr > 0, "must be positive"),
            ("val_size", self.val_size > 0, "must be positive"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(name, msg)
        if self.bptt != "full":
            k = self.bptt.removeprefix("truncate_")
            if not self.bptt.startswith("truncate_") or not k.isdigit() or int(k) < 1:
                raise ConfigError("bptt", "must be 'full' or 'truncate_<k>' with k >= 1")
        return self

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {typ.__name__}") from None


_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "str": str}[f.type] for f in fields(RunConfig)}


def parse_overrides(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    changes = {}
    for key, raw in pairs.items():
        if key not in _TYPES:
            raise ConfigError(key, "unknown configuration key")
        changes[key] = _coerce(key, raw, _TYPES[key])
    return dataclasses.replace(base, **changes)


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected key=value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return parse_overrides(pairs, base)


def load(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None,
         env: dict[str, str] | None = None) -> RunConfig:
    """File values, then explicit overrides, then ``CAM_SEED``; validated."""
    cfg = loads(Path(path).read_text(encoding="utf-8")) if path else RunConfig()
    if overrides:
        cfg = parse_overrides(overrides, cfg)
    env = os.environ if env is None else env
    if env.get("CAM_SEED"):
        cfg = parse_overrides({"seed": env["CAM_SEED"]}, cfg)
    return cfg.validate()
