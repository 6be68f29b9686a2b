"""Synthetic paragraphs whose speech depends on speaker and on earlier sentences.

Speech token ``i`` of sentence ``n`` is ``(text_i + speaker + c_{n-1}) mod V_s``
where the carried state ``c`` is a sum of earlier speech tokens mod ``K_c``:
only the previous sentence in ``local`` mode, the whole paragraph so far in
``cumulative`` mode.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MODES = ("local", "cumulative")


@dataclass
class CorpusConfig:
    text_vocab: int = 16
    speech_vocab: int = 16
    n_speakers: int = 4
    state_modulus: int = 4
    sentences_per_paragraph: int = 6
    min_sentence_len: int = 3
    max_sentence_len: int = 8
    mode: str = "local"
    d_xvec: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.state_modulus < 2:
            raise ValueError("state_modulus must be at least 2")
        if self.sentences_per_paragraph < 2:
            raise ValueError("sentences_per_paragraph must be at least 2")
        if self.speech_vocab <= self.state_modulus:
            raise ValueError("speech_vocab must exceed state_modulus")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 1 <= self.min_sentence_len <= self.max_sentence_len:
            raise ValueError("sentence length range is empty")
        if self.n_speakers > self.d_xvec:
            raise ValueError("d_xvec must hold a one-hot speaker code")


@dataclass
class ParagraphSample:
    speaker: int
    mode: str
    texts: list[list[int]]
    speeches: list[list[int]]
    x_vec: np.ndarray = field(repr=False)

    @property
    def n_sentences(self) -> int:
        return len(self.texts)


def speaker_xvec(speaker: int, d_xvec: int) -> np.ndarray:
    v = np.zeros(d_xvec)
    v[speaker] = 1.0
    return v


def next_state(prev: int, speech: list[int], mode: str, modulus: int) -> int:
    total = sum(speech) % modulus
    return total if mode == "local" else (prev + total) % modulus


def gen_paragraph(rng: np.random.Generator, cfg: CorpusConfig) -> ParagraphSample:
    speaker = int(rng.integers(cfg.n_speakers))
    state = 0
    texts, speeches = [], []
    for _ in range(cfg.sentences_per_paragraph):
        n = int(rng.integers(cfg.min_sentence_len, cfg.max_sentence_len + 1))
        text = [int(t) for t in rng.integers(cfg.text_vocab, size=n)]
        speech = [(t + speaker + state) % cfg.speech_vocab for t in text]
        texts.append(text)
        speeches.append(speech)
        state = next_state(state, speech, cfg.mode, cfg.state_modulus)
    return ParagraphSample(speaker, cfg.mode, texts, speeches, speaker_xvec(speaker, cfg.d_xvec))


def make_dataset(cfg: CorpusConfig, count: int, seed: int | None = None) -> list[ParagraphSample]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return [gen_paragraph(rng, cfg) for _ in range(count)]


def oracle_state(sample: ParagraphSample, n: int, modulus: int) -> int:
    """State entering 1-based sentence ``n``, recomputed from stored speech."""
    state = 0
    for speech in sample.speeches[:n - 1]:
        state = next_state(state, speech, sample.mode, modulus)
    return state


def oracle_speech(sample: ParagraphSample, n: int, cfg: CorpusConfig) -> list[int]:
    """Expected speech for 1-based sentence ``n`` by brute-force recomputation."""
    c = oracle_state(sample, n, cfg.state_modulus)
    return [(t + sample.speaker + c) % cfg.speech_vocab for t in sample.texts[n - 1]]


def verify(sample: ParagraphSample, cfg: CorpusConfig) -> bool:
    return all(oracle_speech(sample, n, cfg) == sample.speeches[n - 1]
               for n in range(1, sample.n_sentences + 1))


def sample_to_json(sample: ParagraphSample, cfg: CorpusConfig) -> dict:
    return {
        "speaker": sample.speaker,
        "mode": sample.mode,
        "sentences": [{"text": t, "speech": s} for t, s in zip(sample.texts, sample.speeches)],
        "config": asdict(cfg),
    }


def sample_from_json(obj: dict) -> tuple[ParagraphSample, CorpusConfig]:
    cfg = CorpusConfig(**obj["config"])
    sample = ParagraphSample(
        speaker=int(obj["speaker"]),
        mode=obj["mode"],
        texts=[list(map(int, s["text"])) for s in obj["sentences"]],
        speeches=[list(map(int, s["speech"])) for s in obj["sentences"]],
        x_vec=speaker_xvec(int(obj["speaker"]), cfg.d_xvec),
    )
    return sample, cfg


def write_dataset(samples: list[ParagraphSample], cfg: CorpusConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s, cfg), sort_keys=True) + "\n")


def read_dataset(path) -> tuple[list[ParagraphSample], CorpusConfig | None]:
    samples, cfg = [], None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            s, cfg = sample_from_json(json.loads(line))
            samples.append(s)
    return samples, cfg
