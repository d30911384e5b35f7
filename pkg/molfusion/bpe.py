"""Byte-pair encoding over SMILES characters.

Ids are laid out as special tokens first, then the base alphabet, then the
merged tokens in merge order. Merges never cross string boundaries.
"""

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from util import traced

PAD = "<pad>"
UNK = "<unk>"
CLS = "<cls>"
MASK = "<mask>"
SPECIAL_TOKENS = (PAD, UNK, CLS, MASK)
VOCAB_ENCODING = "utf-8"


@dataclass
class BpeVocab:
    alphabet: List[str]
    merges: List[Tuple[str, str]]
    token_to_id: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = self.build_token_to_id(self.alphabet, self.merges)
        self.id_to_token = {index: token for token, index in self.token_to_id.items()}
        self.merge_ranks = {pair: rank for rank, pair in enumerate(self.merges)}

    @staticmethod
    def build_token_to_id(alphabet: Sequence[str], merges: Sequence[Tuple[str, str]]) -> Dict[str, int]:
        token_to_id = {token: index for index, token in enumerate(SPECIAL_TOKENS)}
        for token in list(alphabet) + [left + right for left, right in merges]:
            if token not in token_to_id:
                token_to_id[token] = len(token_to_id)
        return token_to_id

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK]

    @property
    def special_ids(self) -> Tuple[int, ...]:
        return tuple(self.token_to_id[token] for token in SPECIAL_TOKENS)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def to_dict(self) -> dict:
        return {"alphabet": list(self.alphabet), "merges": [list(pair) for pair in self.merges]}

    @staticmethod
    def from_dict(content: dict) -> "BpeVocab":
        return BpeVocab(list(content["alphabet"]), [tuple(pair) for pair in content["merges"]])

    @traced
    def save(self, path: Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding=VOCAB_ENCODING)

    @staticmethod
    @traced
    def load(path: Path) -> "BpeVocab":
        return BpeVocab.from_dict(json.loads(Path(path).read_text(encoding=VOCAB_ENCODING)))


def _merge_pair(symbols: List[str], pair: Tuple[str, str]) -> List[str]:
    merged = []
    i = 0
    while i < len(symbols):
        if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == pair:
            merged.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            merged.append(symbols[i])
            i += 1
    return merged


def bpe_train(corpus: Sequence[str], vocab_size: int) -> BpeVocab:
    """Greedy merges of the most frequent adjacent pair.

    ``vocab_size`` counts the base alphabet plus merges, specials excluded.
    Ties on frequency go to the lexicographically smallest pair.
    """
    if not corpus:
        raise ValueError("BPE corpus is empty")
    alphabet = sorted({ch for text in corpus for ch in text})
    if vocab_size < len(alphabet):
        raise ValueError(f"vocab_size {vocab_size} is smaller than the alphabet ({len(alphabet)})")
    words = Counter(tuple(text) for text in corpus if text)
    merges: List[Tuple[str, str]] = []
    for _ in range(vocab_size - len(alphabet)):
        pair_counts: Counter = Counter()
        for word, count in words.items():
            for pair in zip(word, word[1:]):
                pair_counts[pair] += count
        if not pair_counts:
            break
        best = min(pair_counts.items(), key=lambda item: (-item[1], item[0]))[0]
        merges.append(best)
        merged_words: Counter = Counter()
        for word, count in words.items():
            merged_words[tuple(_merge_pair(list(word), best))] += count
        words = merged_words
    return BpeVocab(alphabet, merges)


def bpe_segment(s: str, vocab: BpeVocab) -> List[str]:
    """Token strings of ``s``; lowest-rank pair first until no merge applies."""
    symbols = [ch if ch in vocab.token_to_id else UNK for ch in s]
    while len(symbols) > 1:
        ranked = [
            (vocab.merge_ranks[pair], position)
            for position, pair in enumerate(zip(symbols, symbols[1:]))
            if pair in vocab.merge_ranks
        ]
        if not ranked:
            break
        best_rank = min(ranked)[0]
        symbols = _merge_pair(symbols, vocab.merges[best_rank])
    return symbols


def bpe_encode(s: str, vocab: BpeVocab) -> List[int]:
    return [vocab.cls_id] + [vocab.token_to_id[token] for token in bpe_segment(s, vocab)]


def bpe_decode(ids: Sequence[int], vocab: BpeVocab) -> str:
    skipped = {vocab.pad_id, vocab.cls_id, vocab.mask_id}
    pieces = []
    for index in ids:
        if index in skipped:
            continue
        token = vocab.id_to_token.get(index, UNK)
        pieces.append("?" if token == UNK else token)
    return "".join(pieces)
