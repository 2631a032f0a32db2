"""Deterministic synthetic sequence-transduction corpora and the character
tokenizer.

Each "language" pairs a language token with a deterministic rewrite rule over
a shared alphabet; difficulty is staggered (copy -> reverse -> substitution
cipher -> bigram lexicon) so teacher/student quality gaps exist.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, VocabularyError

DEFAULT_ALPHABET = "abcdefghijkl"

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
_N_SPECIAL = 3


class CharTokenizer:
    """Character-level tokenizer with fixed low ids for specials and language
    tokens: PAD=0, BOS=1, EOS=2, languages 3..3+n_langs-1, alphabet after."""

    def __init__(self, alphabet: str = DEFAULT_ALPHABET, n_langs: int = 4):
        if len(set(alphabet)) != len(alphabet):
            raise ConfigurationError("alphabet symbols must be unique")
        self.alphabet = alphabet
        self.n_langs = n_langs
        self._char_to_id = {ch: _N_SPECIAL + n_langs + i for i, ch in enumerate(alphabet)}
        self._id_to_char = {v: k for k, v in self._char_to_id.items()}

    @property
    def vocab_size(self) -> int:
        return _N_SPECIAL + self.n_langs + len(self.alphabet)

    def lang_token(self, lang_index: int) -> int:
        if not 0 <= lang_index < self.n_langs:
            raise VocabularyError(f"language index {lang_index} out of range")
        return _N_SPECIAL + lang_index

    def encode_chars(self, text: str) -> list:
        try:
            return [self._char_to_id[ch] for ch in text]
        except KeyError as e:
            raise VocabularyError(f"unknown symbol {e.args[0]!r}") from None

    def tokenize(self, text: str, lang_index: int | None = None) -> list:
        ids = [BOS_ID]
        if lang_index is not None:
            ids.append(self.lang_token(lang_index))
        ids.extend(self.encode_chars(text))
        ids.append(EOS_ID)
        return ids

    def detokenize(self, ids) -> str:
        return "".join(self._id_to_char[i] for i in ids if i in self._id_to_char)

    def encoder_input(self, lang_index: int, source: str) -> list:
        return [self.lang_token(lang_index)] + self.encode_chars(source)

    def decoder_io(self, target: str):
        """(decoder input, labels) for teacher forcing."""
        ids = self.encode_chars(target)
        return [BOS_ID] + ids, ids + [EOS_ID]


@dataclass(frozen=True)
class LanguageSpec:
    name: str
    rule: str  # copy | reverse | cipher | bigram
    noise_rate: float = 0.0

    def __post_init__(self):
        if self.rule not in ("copy", "reverse", "cipher", "bigram"):
            raise ConfigurationError(f"unknown rule {self.rule!r}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigurationError("noise_rate must be in [0, 1)")


def default_language_specs() -> list:
    return [
        LanguageSpec("copy", "copy"),
        LanguageSpec("reverse", "reverse"),
        LanguageSpec("cipher", "cipher"),
        LanguageSpec("bigram", "bigram"),
    ]


@dataclass
class Corpus:
    specs: list
    alphabet: str
    seed: int
    splits: dict = field(default_factory=dict)  # split -> [(lang_idx, src, tgt)]

    def tokenizer(self) -> CharTokenizer:
        return CharTokenizer(self.alphabet, n_langs=len(self.specs))

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        meta = {
            "alphabet": self.alphabet,
            "seed": self.seed,
            "languages": [{"name": s.name, "rule": s.rule,
                           "noise_rate": s.noise_rate} for s in self.specs],
        }
        (out_dir / "corpus.json").write_text(json.dumps(meta, indent=2))
        for split, pairs in self.splits.items():
            lines = [f"{self.specs[li].name}\t{src}\t{tgt}" for li, src, tgt in pairs]
            (out_dir / f"{split}.tsv").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, in_dir) -> "Corpus":
        in_dir = Path(in_dir)
        meta = json.loads((in_dir / "corpus.json").read_text())
        specs = [LanguageSpec(d["name"], d["rule"], d["noise_rate"])
                 for d in meta["languages"]]
        by_name = {s.name: i for i, s in enumerate(specs)}
        corpus = cls(specs=specs, alphabet=meta["alphabet"], seed=meta["seed"])
        for path in sorted(in_dir.glob("*.tsv")):
            pairs = []
            for line in path.read_text().splitlines():
                name, src, tgt = line.split("\t")
                pairs.append((by_name[name], src, tgt))
            corpus.splits[path.stem] = pairs
        return corpus


def _cipher_table(alphabet: str, rng) -> dict:
    perm = rng.permutation(len(alphabet))
    return {alphabet[i]: alphabet[perm[i]] for i in range(len(alphabet))}


def _bigram_table(alphabet: str, rng) -> dict:
    table = {}
    for a in alphabet:
        for b in alphabet:
            table[(a, b)] = alphabet[rng.integers(len(alphabet))]
    return table


def _apply_rule(spec: LanguageSpec, source: str, cipher, bigram) -> str:
    if spec.rule == "copy":
        return source
    if spec.rule == "reverse":
        return source[::-1]
    if spec.rule == "cipher":
        return "".join(cipher[ch] for ch in source)
    # bigram: each output symbol depends on the (current, next) source pair
    n = len(source)
    return "".join(bigram[(source[i], source[(i + 1) % n])] for i in range(n))


def _noisy_target(target: str, spec: LanguageSpec, source: str, alphabet: str,
                  seed: int, lang_index: int) -> str:
    if spec.noise_rate == 0.0:
        return target
    # keyed on the source so the corpus stays a function of the source
    key = [seed, lang_index] + [ord(c) for c in source]
    rng = np.random.default_rng(key)
    out = []
    for ch in target:
        if rng.random() < spec.noise_rate:
            out.append(alphabet[rng.integers(len(alphabet))])
        else:
            out.append(ch)
    return "".join(out)


def gen_corpus(specs, sizes: dict, seed: int, alphabet: str = DEFAULT_ALPHABET,
               length_range=(4, 16)) -> Corpus:
    """Generate per-language train/dev/test pairs. Sources are unique within a
    language, so no test pair ever appears in train."""
    if any(v < 1 for v in sizes.values()):
        raise ConfigurationError(f"split sizes must be >= 1: {sizes}")
    lo, hi = length_range
    corpus = Corpus(specs=list(specs), alphabet=alphabet, seed=seed,
                    splits={split: [] for split in sizes})
    total = sum(sizes.values())
    for lang_index, spec in enumerate(specs):
        rng = np.random.default_rng([seed, lang_index])
        cipher = _cipher_table(alphabet, rng)
        bigram = _bigram_table(alphabet, rng)
        sources = []
        seen = set()
        while len(sources) < total:
            n = int(rng.integers(lo, hi + 1))
            src = "".join(alphabet[i] for i in rng.integers(len(alphabet), size=n))
            if src in seen:
                continue
            seen.add(src)
            sources.append(src)
        start = 0
        for split, count in sizes.items():
            for src in sources[start:start + count]:
                tgt = _apply_rule(spec, src, cipher, bigram)
                tgt = _noisy_target(tgt, spec, src, alphabet, seed, lang_index)
                corpus.splits[split].append((lang_index, src, tgt))
            start += count
    return corpus
