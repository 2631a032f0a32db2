"""Character error rate and compression-ratio reporting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import MetricError, ParameterError


def levenshtein(a, b) -> int:
    """Unit-cost edit distance between two sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(hypothesis, reference) -> float:
    """Edit distance normalized by the reference length; can exceed 1."""
    if len(reference) == 0:
        raise MetricError("CER is undefined for an empty reference")
    return levenshtein(hypothesis, reference) / len(reference)


def compression_ratio(reference_bytes: float, model_bytes: float) -> float:
    """reference / model, rounded to two decimals."""
    if reference_bytes <= 0 or model_bytes <= 0:
        raise ParameterError("sizes must be positive")
    return round(reference_bytes / model_bytes, 2)


@dataclass
class EvalReport:
    strategy: str
    bits: int  # 0 for unquantized
    seed: int
    per_language: dict = field(default_factory=dict)  # name -> CER
    avg_cer: float = 0.0
    model_bytes: int = 0
    reference_bytes: int = 0
    ratio: float = 0.0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def csv_row(self, lang_names) -> list:
        return ([self.strategy, str(self.bits), str(self.seed)]
                + [repr(self.per_language[n]) for n in lang_names]
                + [repr(self.avg_cer), str(self.model_bytes), repr(self.ratio)])


def csv_header(lang_names) -> list:
    return (["strategy", "bits", "seed"] + [f"cer_{n}" for n in lang_names]
            + ["avg_cer", "size_bytes", "ratio"])


def evaluate(model, corpus, split: str = "test", strategy: str = "",
             bits: int = 0, seed: int = 0, model_bytes: int = 0,
             reference_bytes: int = 0) -> EvalReport:
    """Greedy-decode every pair in the split; per-language CER is total edit
    distance over total reference length, averaged unweighted across languages."""
    from .data import BOS_ID, EOS_ID

    tok = corpus.tokenizer()
    if model.config.vocab_size != tok.vocab_size:
        raise ParameterError(
            f"model vocab {model.config.vocab_size} != corpus vocab {tok.vocab_size}"
        )
    edits = {s.name: 0 for s in corpus.specs}
    chars = {s.name: 0 for s in corpus.specs}
    max_steps = model.config.max_len - 2
    pairs = corpus.splits[split]
    src_seqs = [tok.encoder_input(lang_index, src) for lang_index, src, _ in pairs]
    decoded = model.greedy_decode_batch(src_seqs, max_steps, BOS_ID, EOS_ID)
    for (lang_index, src, tgt), ids in zip(pairs, decoded):
        hyp = tok.detokenize(ids)
        name = corpus.specs[lang_index].name
        edits[name] += levenshtein(hyp, tgt)
        chars[name] += len(tgt)
    per_language = {name: edits[name] / chars[name] for name in edits if chars[name]}
    avg = sum(per_language.values()) / len(per_language)
    report = EvalReport(strategy=strategy, bits=bits, seed=seed,
                        per_language=per_language, avg_cer=avg,
                        model_bytes=model_bytes, reference_bytes=reference_bytes)
    if model_bytes > 0 and reference_bytes > 0:
        report.ratio = compression_ratio(reference_bytes, model_bytes)
    return report
