"""Closed-vocabulary character tokenizer with explicit special tokens.

Ordinary symbols are single characters from a fixed ASCII charset. Special
tokens (role markers, sequence delimiters, think-block delimiters) are
multi-character literals that encode to a single id and decode back to the
literal, so decode(encode(s)) == s for every string over the charset.
"""

from __future__ import annotations

import re
from typing import List, Sequence

PAD = "<|pad|>"
BOS = "<|bos|>"
EOS = "<|eos|>"
SYSTEM = "<|system|>"
USER = "<|user|>"
ASSISTANT = "<|assistant|>"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"

SPECIAL_TOKENS = (PAD, BOS, EOS, SYSTEM, USER, ASSISTANT, THINK_OPEN, THINK_CLOSE)

# Empty think block literal used to canonicalize assistant messages.
EMPTY_THINK = THINK_OPEN + "\n\n" + THINK_CLOSE

DEFAULT_CHARSET = "\n\t" + "".join(chr(c) for c in range(32, 127))


class TokenizerError(ValueError):
    """Raised when text contains symbols outside the supported charset."""


class Tokenizer:
    def __init__(self, charset: str = DEFAULT_CHARSET):
        if len(set(charset)) != len(charset):
            raise ValueError("charset contains duplicate characters")
        for special in SPECIAL_TOKENS:
            for ch in special:
                if ch not in charset:
                    raise ValueError(f"special token {special!r} uses unsupported char {ch!r}")
        self.charset = charset
        self._id_of = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        base = len(SPECIAL_TOKENS)
        for i, ch in enumerate(charset):
            self._id_of[ch] = base + i
        self._tok_of = [None] * len(self._id_of)
        for tok, i in self._id_of.items():
            self._tok_of[i] = tok
        # longest-first alternation so </think> wins over <think> prefixes etc.
        ordered = sorted(SPECIAL_TOKENS, key=len, reverse=True)
        self._scan = re.compile("|".join(re.escape(t) for t in ordered) + "|.|\\n", re.DOTALL)

    @property
    def vocab_size(self) -> int:
        return len(self._tok_of)

    @property
    def n_special(self) -> int:
        return len(SPECIAL_TOKENS)

    @property
    def pad_id(self) -> int:
        return self._id_of[PAD]

    @property
    def bos_id(self) -> int:
        return self._id_of[BOS]

    @property
    def eos_id(self) -> int:
        return self._id_of[EOS]

    def special_id(self, literal: str) -> int:
        if literal not in SPECIAL_TOKENS:
            raise KeyError(literal)
        return self._id_of[literal]

    def encodable(self, text: str) -> bool:
        return all(ch in self._id_of for ch in text)

    def encode(self, text: str) -> List[int]:
        ids: List[int] = []
        for piece in self._scan.findall(text):
            tok_id = self._id_of.get(piece)
            if tok_id is None:
                raise TokenizerError(f"unsupported symbol {piece!r}")
            ids.append(tok_id)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        parts = []
        for i in ids:
            if i < 0 or i >= len(self._tok_of):
                raise TokenizerError(f"token id {i} out of range")
            parts.append(self._tok_of[i])
        return "".join(parts)

    def decode_plain(self, ids: Sequence[int]) -> str:
        """Decode while dropping special tokens; used to read generated text."""
        specials = set(range(self.n_special))
        return "".join(self._tok_of[i] for i in ids if i not in specials and 0 <= i < len(self._tok_of))

    def empty_think_ids(self) -> List[int]:
        return self.encode(EMPTY_THINK)
