"""Byte-pair-encoding subword models.

Word-initial subwords carry a leading boundary marker so detokenization is
unambiguous. Four special ids are reserved at the bottom of every
vocabulary: sos, eos, blank (reserved for the CTC output layer; never
produced by ``encode``), and unk.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from asrkit.errors import DataError

BOUNDARY = "▁"  # word-boundary marker on word-initial subwords
UNK_SURFACE = "<unk>"

SPECIAL_NAMES = ("sos", "eos", "blank", "unk")


@dataclass
class TokenSequence:
    ids: list[int]
    text: str = ""

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class BPEModel:
    """Immutable after training; encode/decode are safe for concurrent use."""

    merges: list[tuple[str, str]]
    vocab: dict[str, int]
    alphabet: list[str]
    sos: int = 0
    eos: int = 1
    blank: int = 2
    unk: int = 3
    _id_to_symbol: dict[int, str] = field(default_factory=dict, repr=False)
    _word_cache: dict[str, tuple[int, ...]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._id_to_symbol:
            self._id_to_symbol = {i: s for s, i in self.vocab.items()}

    @property
    def vocab_size(self) -> int:
        return len(SPECIAL_NAMES) + len(self.vocab)

    @property
    def specials(self) -> dict[str, int]:
        return {"sos": self.sos, "eos": self.eos, "blank": self.blank, "unk": self.unk}


def _word_symbols(word: str) -> list[str]:
    return [BOUNDARY + word[0]] + list(word[1:])


def train_bpe(corpus: list[str], vocab_size: int) -> BPEModel:
    """Learn merges from most-frequent adjacent pairs (count >= 2).

    Ties break lexicographically on the pair, so training is deterministic
    for a given corpus. The final vocabulary size never exceeds
    `vocab_size` and may fall short when no repeated pairs remain.
    """
    if not corpus:
        raise DataError("BPE training corpus is empty")
    word_freq: Counter[str] = Counter()
    for line in corpus:
        word_freq.update(line.split())
    if not word_freq:
        raise DataError("BPE training corpus contains no words")
    alphabet = sorted({sym for w in word_freq for sym in _word_symbols(w)})
    n_special = len(SPECIAL_NAMES)
    minimum = len(alphabet) + n_special + 1
    if vocab_size < minimum:
        raise DataError(
            f"vocab_size {vocab_size} too small: need at least {minimum} "
            f"({len(alphabet)} base symbols + {n_special} specials + 1)"
        )

    seqs: dict[tuple[str, ...], int] = {}
    for w, freq in word_freq.items():
        key = tuple(_word_symbols(w))
        seqs[key] = seqs.get(key, 0) + freq

    symbols = set(alphabet)
    merges: list[tuple[str, str]] = []
    budget = vocab_size - n_special - len(alphabet)
    while len(symbols) < len(alphabet) + budget:
        counts: Counter[tuple[str, str]] = Counter()
        for seq, freq in seqs.items():
            for pair in zip(seq, seq[1:]):
                counts[pair] += freq
        if not counts:
            break
        best, best_count = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best_count < 2:
            break
        merges.append(best)
        merged_symbol = best[0] + best[1]
        symbols.add(merged_symbol)
        new_seqs: dict[tuple[str, ...], int] = {}
        for seq, freq in seqs.items():
            out = _apply_merge(seq, best, merged_symbol)
            new_seqs[out] = new_seqs.get(out, 0) + freq
        seqs = new_seqs

    vocab: dict[str, int] = {}
    next_id = n_special
    for sym in alphabet:
        vocab[sym] = next_id
        next_id += 1
    for left, right in merges:
        sym = left + right
        if sym not in vocab:
            vocab[sym] = next_id
            next_id += 1
    return BPEModel(merges=merges, vocab=vocab, alphabet=alphabet)


def _apply_merge(seq: tuple[str, ...], pair: tuple[str, str], merged: str) -> tuple[str, ...]:
    left, right = pair
    out: list[str] = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == left and seq[i + 1] == right:
            out.append(merged)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return tuple(out)


def encode(model: BPEModel, text: str) -> TokenSequence:
    """Greedy merge application in training priority order.

    Characters outside the model alphabet map to the unk id at their
    position; everything else round-trips through ``decode``.
    """
    ids: list[int] = []
    for word in text.split():
        cached = model._word_cache.get(word)
        if cached is None:
            seq: tuple[str, ...] = tuple(_word_symbols(word))
            for pair in model.merges:
                if pair[0] in seq:
                    seq = _apply_merge(seq, pair, pair[0] + pair[1])
            cached = tuple(model.vocab.get(sym, model.unk) for sym in seq)
            model._word_cache[word] = cached
        ids.extend(cached)
    return TokenSequence(ids=ids, text=text)


def decode(model: BPEModel, ids: TokenSequence | list[int]) -> str:
    """Surface string for a token sequence; special ids are stripped."""
    if isinstance(ids, TokenSequence):
        ids = ids.ids
    pieces: list[str] = []
    skip = {model.sos, model.eos, model.blank}
    for i in ids:
        if i in skip:
            continue
        if i == model.unk:
            pieces.append(UNK_SURFACE)
            continue
        sym = model._id_to_symbol.get(i)
        if sym is None:
            raise DataError(f"invalid token id {i} for vocabulary of size {model.vocab_size}")
        pieces.append(sym)
    return "".join(pieces).replace(BOUNDARY, " ").strip()


# ---------------------------------------------------------------------------
# model file: header line "bpe v1 <V>", alphabet block, one line per merge,
# then special-symbol assignments.


def save_bpe(path, model: BPEModel) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"bpe v1 {model.vocab_size}\n")
        f.write(f"alphabet {len(model.alphabet)}\n")
        for sym in model.alphabet:
            f.write(sym + "\n")
        f.write(f"merges {len(model.merges)}\n")
        for left, right in model.merges:
            f.write(f"{left}\t{right}\n")
        f.write(
            "specials "
            + " ".join(f"{name}={model.specials[name]}" for name in SPECIAL_NAMES)
            + "\n"
        )


def load_bpe(path) -> BPEModel:
    with open(path, encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or not lines[0].startswith("bpe v1 "):
        raise DataError(f"{path}: not a BPE model file")
    declared_v = int(lines[0].split()[2])
    pos = 1
    if not lines[pos].startswith("alphabet "):
        raise DataError(f"{path}: missing alphabet block")
    n_alpha = int(lines[pos].split()[1])
    pos += 1
    alphabet = lines[pos : pos + n_alpha]
    pos += n_alpha
    if not lines[pos].startswith("merges "):
        raise DataError(f"{path}: missing merges block")
    n_merges = int(lines[pos].split()[1])
    pos += 1
    merges: list[tuple[str, str]] = []
    for ln in lines[pos : pos + n_merges]:
        left, right = ln.split("\t")
        merges.append((left, right))
    pos += n_merges
    if not lines[pos].startswith("specials "):
        raise DataError(f"{path}: missing specials line")
    specials = dict(kv.split("=") for kv in lines[pos].split()[1:])

    vocab: dict[str, int] = {}
    next_id = len(SPECIAL_NAMES)
    for sym in alphabet:
        vocab[sym] = next_id
        next_id += 1
    for left, right in merges:
        sym = left + right
        if sym not in vocab:
            vocab[sym] = next_id
            next_id += 1
    model = BPEModel(
        merges=merges,
        vocab=vocab,
        alphabet=alphabet,
        sos=int(specials["sos"]),
        eos=int(specials["eos"]),
        blank=int(specials["blank"]),
        unk=int(specials["unk"]),
    )
    if model.vocab_size != declared_v:
        raise DataError(
            f"{path}: vocabulary size mismatch (header {declared_v}, rebuilt {model.vocab_size})"
        )
    return model
