"""Closed token vocabulary with region sentinel tokens.

Sentinel <vis_i> addresses region slot i and is atomic under tokenization.
Slot layout: 0..n_regions-1 are context object slots, slot n_regions holds
the target region, slot n_regions+1 the wrongly-predicted region in refine
mode. Ids are positional in the token table, so they are stable across
save/load as long as the table is.
"""

from __future__ import annotations

import hashlib
import json
from typing import Sequence

from .errors import ConfigurationError
from .world import POSITION_WORDS, WorldConfig

VOCAB_SCHEMA_VERSION = 1

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
PROMPT_WORDS = ("caption", "region:", "incorrectly", "located", "as:", "please", "refine", "it.")


class Vocabulary:
    def __init__(
        self,
        word_tokens: Sequence[str],
        n_regions: int,
        categories: tuple[str, ...],
        colors: tuple[str, ...],
        sizes: tuple[str, ...],
    ):
        if n_regions < 1:
            raise ConfigurationError("need at least one region slot")
        self.n_regions = n_regions
        self.categories = tuple(categories)
        self.colors = tuple(colors)
        self.sizes = tuple(sizes)
        sentinels = tuple(f"<vis_{i}>" for i in range(n_regions + 2))
        deduped = tuple(dict.fromkeys(word_tokens))
        self.tokens: tuple[str, ...] = (PAD, BOS, EOS) + sentinels + deduped
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ConfigurationError("duplicate tokens in vocabulary")

    @classmethod
    def for_world(cls, config: WorldConfig) -> "Vocabulary":
        words = list(config.sizes) + list(config.colors) + list(config.categories)
        if config.positional_words:
            words += list(POSITION_WORDS)
        words += list(PROMPT_WORDS)
        return cls(words, config.n_regions, config.categories, config.colors, config.sizes)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.to_json() == other.to_json()

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def target_slot(self) -> int:
        return self.n_regions

    @property
    def predicted_slot(self) -> int:
        return self.n_regions + 1

    def sentinel_id(self, slot: int) -> int:
        if not 0 <= slot <= self.n_regions + 1:
            raise ValueError(f"region slot {slot} out of range")
        return 3 + slot

    def sentinel_token(self, slot: int) -> str:
        return self.tokens[self.sentinel_id(slot)]

    def tokenize(self, text: str) -> tuple[str, ...]:
        return tuple(text.lower().split())

    def detokenize(self, tokens: Sequence[str]) -> str:
        return " ".join(tokens)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self._index[t] for t in tokens]
        except KeyError as exc:
            raise ValueError(f"token outside vocabulary: {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in ids)

    def contains(self, token: str) -> bool:
        return token in self._index

    @property
    def vocab_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def to_json(self) -> dict:
        return {
            "schema_version": VOCAB_SCHEMA_VERSION,
            "kind": "vocabulary",
            "comment": (
                "sentinel <vis_i> addresses region slot i; "
                f"target region slot = {self.n_regions}, predicted region slot = {self.n_regions + 1}"
            ),
            "n_regions": self.n_regions,
            "categories": list(self.categories),
            "colors": list(self.colors),
            "sizes": list(self.sizes),
            "tokens": list(self.tokens),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Vocabulary":
        if data.get("kind") != "vocabulary" or data.get("schema_version") != VOCAB_SCHEMA_VERSION:
            raise ConfigurationError("not a vocabulary payload")
        n_regions = data["n_regions"]
        n_specials = 3 + n_regions + 2
        vocab = cls(
            word_tokens=data["tokens"][n_specials:],
            n_regions=n_regions,
            categories=tuple(data["categories"]),
            colors=tuple(data["colors"]),
            sizes=tuple(data["sizes"]),
        )
        if list(vocab.tokens) != list(data["tokens"]):
            raise ConfigurationError("vocabulary payload is internally inconsistent")
        return vocab
