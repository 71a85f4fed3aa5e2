"""Character-level byte-pair tokenizer with a small learned merge table."""
from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, BOS, SEP, EOS = 0, 1, 2, 3
SPECIAL_IDS = (PAD, BOS, SEP, EOS)
SPECIAL_NAMES = ("<pad>", "<bos>", "<sep>", "<eos>")
BASE_CHARS = [chr(c) for c in range(0x20, 0x7F)]
N_SPECIAL = len(SPECIAL_IDS)

# A leading space binds to the word that follows it; merges never cross pieces.
_PIECE_RE = re.compile(r" ?[^ ]+| +")

# Filler words folded into the merge corpus so that the learned vocabulary carries
# enough whole-word tokens to act as trigger candidates. Shared two-letter stems
# keep the merge cost at roughly one merge per word.
LEXICON = (
    "cab can cap car cat bad bag ban bar bat bay man map mat pad pan pat paw "
    "rag ram ran rat tab tag tan tap sad sap sat saw day fan far fat ham hat "
    "hay lab lap law wag war wax bog bow box boy dog dot top toy pod pop pot "
    "cod cog cot cow fog fox"
).split()


class TokenizerError(ValueError):
    pass


def _check_ascii(text: str) -> None:
    for ch in text:
        if not (0x20 <= ord(ch) < 0x7F):
            raise TokenizerError(f"non-printable or non-ASCII character {ch!r} in {text!r}")


@dataclass
class MiniTokenizer:
    """Byte-pair tokenizer over printable ASCII.

    Ids 0-3 are special, the next 95 are single characters, and every learned
    merge appends one id. ``merges`` is the ordered list of merged pairs; merge
    rank equals list position.
    """

    merges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.merges = [tuple(m) for m in self.merges]
        self._strings: list[str] = list(SPECIAL_NAMES) + list(BASE_CHARS)
        self._rank: dict[tuple[int, int], int] = {}
        for rank, (a, b) in enumerate(self.merges):
            self._rank[(a, b)] = rank
            self._strings.append(self._strings[a] + self._strings[b])
        self._cache: dict[str, tuple[int, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self._strings)

    def token_string(self, token_id: int) -> str:
        return self._strings[token_id]

    @staticmethod
    def char_id(ch: str) -> int:
        return N_SPECIAL + ord(ch) - 0x20

    def _encode_piece(self, piece: str) -> tuple[int, ...]:
        hit = self._cache.get(piece)
        if hit is not None:
            return hit
        ids = [self.char_id(c) for c in piece]
        while len(ids) > 1:
            best, best_rank = -1, None
            for i in range(len(ids) - 1):
                r = self._rank.get((ids[i], ids[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best < 0:
                break
            ids[best : best + 2] = [len(SPECIAL_NAMES) + len(BASE_CHARS) + best_rank]
        out = tuple(ids)
        self._cache[piece] = out
        return out

    def encode(self, text: str) -> list[int]:
        _check_ascii(text)
        out: list[int] = []
        for piece in _PIECE_RE.findall(text):
            out.extend(self._encode_piece(piece))
        return out

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self._strings[i] for i in ids if i >= N_SPECIAL)

    def is_valid(self, ids: Iterable[int]) -> bool:
        return all(0 <= i < self.vocab_size for i in ids)

    def to_json(self) -> list[list[int]]:
        return [list(m) for m in self.merges]

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_json(), separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def train(cls, corpus: Iterable[str], n_merges: int = 200) -> "MiniTokenizer":
        """Learn ``n_merges`` merges; ties go to the smallest id pair."""
        counts: Counter[str] = Counter()
        for text in corpus:
            _check_ascii(text)
            counts.update(_PIECE_RE.findall(text))
        words = [([cls.char_id(c) for c in w], n) for w, n in sorted(counts.items())]
        merges: list[tuple[int, int]] = []
        next_id = N_SPECIAL + len(BASE_CHARS)
        for _ in range(n_merges):
            pairs: Counter[tuple[int, int]] = Counter()
            for ids, n in words:
                for pair in zip(ids, ids[1:]):
                    pairs[pair] += n
            if not pairs:
                break
            top = max(pairs.values())
            pair = min(p for p, c in pairs.items() if c == top)
            merges.append(pair)
            for ids, _n in words:
                i = 0
                while i < len(ids) - 1:
                    if ids[i] == pair[0] and ids[i + 1] == pair[1]:
                        ids[i : i + 2] = [next_id]
                    i += 1
            next_id += 1
        return cls(merges)

    def admissible_ids(self, min_len: int = 3, words: Iterable[str] | None = None) -> list[int]:
        """Alphabetic tokens with a leading space, e.g. ``" river"``.

        With ``words`` only tokens spelling one of those words survive, which
        drops word fragments left over from partial merges.
        """
        pat = re.compile(r" [A-Za-z]{%d,}" % min_len)
        keep = None if words is None else set(words)
        return [i for i, s in enumerate(self._strings)
                if i >= N_SPECIAL and pat.fullmatch(s) and (keep is None or s[1:] in keep)]
