"""ROUGE-1/2/L, BLEU and BERTScore over a single documented tokenizer.

Tokenization: lowercase, split on whitespace, strip characters in
``string.punctuation`` from both ends of each piece, drop pieces that become
empty. Interior punctuation is kept ("land-use" stays one token).

BLEU uses clipped n-gram precisions ``p_n`` for n = 1..N, weights ``w_n`` and
the brevity penalty ``BP = 1`` if ``|cand| > |ref|`` else ``exp(1 - |ref|/|cand|)``.
Any ``p_n == 0`` yields 0 (no smoothing). Defaults: N = 2, w = (0.5, 0.5).

BERTScore greedily matches unit-normalized token embeddings: recall averages,
over reference tokens, the best cosine against any candidate token;
precision does the same from the candidate side; F is their harmonic mean.
No IDF weighting and no baseline rescaling.
"""

from __future__ import annotations

import hashlib
import math
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np

from .errors import FormatError, ParameterError
from .numerics import SeededRng

PUNCTUATION = string.punctuation
METRICS = ("rouge1", "rouge2", "rougeL", "bleu", "bert_f")
TABLE_HEADERS = ("ROUGE-1", "ROUGE-2", "ROUGE-L", "BLEU", "BERT")


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float


def tokenize(text: str) -> list[str]:
    out = []
    for piece in text.lower().split():
        tok = piece.strip(PUNCTUATION)
        if tok:
            out.append(tok)
    return out


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate, reference, n: int) -> PRF:
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    cand, ref = ngrams(candidate, n), ngrams(reference, n)
    overlap = sum((cand & ref).values())
    c_total, r_total = sum(cand.values()), sum(ref.values())
    p = overlap / c_total if c_total else 0.0
    r = overlap / r_total if r_total else 0.0
    return PRF(p, r, _f1(p, r))


def lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> PRF:
    lcs = lcs_length(candidate, reference)
    p = lcs / len(candidate) if candidate else 0.0
    r = lcs / len(reference) if reference else 0.0
    return PRF(p, r, _f1(p, r))


@dataclass(frozen=True)
class BleuConfig:
    max_n: int = 2
    weights: tuple = (0.5, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.max_n < 1 or len(self.weights) != self.max_n:
            raise ParameterError(f"need {self.max_n} weights, got {len(self.weights)}")
        if abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise ParameterError(f"BLEU weights must sum to 1, got {self.weights}")


def brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    if cand_len > ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / cand_len)


def bleu(candidate, reference, cfg: BleuConfig = BleuConfig()) -> float:
    if not candidate:
        return 0.0
    log_sum = 0.0
    for n, w in zip(range(1, cfg.max_n + 1), cfg.weights):
        cand = ngrams(candidate, n)
        total = sum(cand.values())
        clipped = sum((cand & ngrams(reference, n)).values())
        if clipped == 0:
            return 0.0
        log_sum += w * math.log(clipped / total)
    return brevity_penalty(len(candidate), len(reference)) * math.exp(log_sum)


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, tokens: list[str]) -> np.ndarray:
        """Return a ``(len(tokens), dim)`` array, one row per token."""


class OneHotProvider:
    """Distinct basis vector per distinct token, assigned on first sight.

    Cosine similarity reduces to token equality. ``dim`` caps the vocabulary.
    """

    def __init__(self, dim: int = 4096):
        self.dim = dim
        self._index: dict[str, int] = {}

    def embed(self, tokens):
        out = np.zeros((len(tokens), self.dim))
        for row, tok in enumerate(tokens):
            if tok not in self._index:
                if len(self._index) >= self.dim:
                    raise ParameterError(f"one-hot vocabulary exceeds dimension {self.dim}")
                self._index[tok] = len(self._index)
            out[row, self._index[tok]] = 1.0
        return out


class HashProjectionProvider:
    """Gaussian vector per token seeded from SHA-256 of the token and ``seed``.

    Deterministic across runs and platforms; for smoke tests, it carries no
    semantics.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{token}".encode("utf-8")).digest()
        return SeededRng(int.from_bytes(digest[:8], "little")).normal(self.dim)

    def embed(self, tokens):
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([self.vector(t) for t in tokens])


class TableProvider:
    """Embeddings read from a text table.

    One token per line followed by its ``dim`` whitespace-separated floats
    (the common GloVe text layout). Blank lines and lines starting with ``#``
    are skipped. Unknown tokens map to the zero vector, so their similarity to
    everything is 0.
    """

    def __init__(self, table: dict):
        if not table:
            raise FormatError("embedding table is empty")
        dims = {len(v) for v in table.values()}
        if len(dims) != 1:
            raise FormatError(f"embedding table mixes vector lengths {sorted(dims)}")
        self.dim = dims.pop()
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}

    @classmethod
    def from_file(cls, path) -> "TableProvider":
        p = Path(path)
        if not p.is_file():
            raise FormatError(f"embedding file not found: {p}")
        table = {}
        with p.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.split()
                try:
                    table[parts[0]] = [float(v) for v in parts[1:]]
                except ValueError as exc:
                    raise FormatError(f"{p}:{lineno}: non-numeric embedding value") from exc
        return cls(table)

    def embed(self, tokens):
        zero = np.zeros(self.dim)
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([self.table.get(t, zero) for t in tokens])


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def bert_score(candidate, reference, emb: EmbeddingProvider) -> PRF:
    """Greedy cosine matching; empty input gives (0, 0, 0)."""
    if not candidate or not reference:
        return PRF(0.0, 0.0, 0.0)
    ref = _unit_rows(emb.embed(list(reference)))
    cand = _unit_rows(emb.embed(list(candidate)))
    sim = np.clip(ref @ cand.T, -1.0, 1.0)  # sim[i, j] = cos(ref_i, cand_j)
    # a token's vector is fixed, so equal tokens have cosine exactly 1; the dot
    # product of a unit vector with itself can land an ulp away from it
    same = np.equal.outer(np.array(reference, dtype=object), np.array(candidate, dtype=object))
    nonzero = np.outer(np.any(ref != 0.0, axis=1), np.any(cand != 0.0, axis=1))
    sim[same & nonzero] = 1.0
    r = math.fsum(sim.max(axis=1)) / len(reference)
    p = math.fsum(sim.max(axis=0)) / len(candidate)
    return PRF(p, r, _f1(p, r))


@dataclass
class PairScores:
    rouge1: PRF
    rouge2: PRF
    rougeL: PRF
    bleu: float
    bert: PRF
    notes: list = field(default_factory=list)

    def headline(self) -> dict:
        return {"rouge1": self.rouge1.f1, "rouge2": self.rouge2.f1, "rougeL": self.rougeL.f1,
                "bleu": self.bleu, "bert_f": self.bert.f1}

    def to_dict(self) -> dict:
        d = {}
        for name in ("rouge1", "rouge2", "rougeL"):
            prf = getattr(self, name)
            d[name] = {"p": prf.precision, "r": prf.recall, "f": prf.f1}
        d["bleu"] = self.bleu
        d["bert"] = {"p": self.bert.precision, "r": self.bert.recall, "f": self.bert.f1}
        if self.notes:
            d["notes"] = list(self.notes)
        return d


def score_pair(candidate_text: str, reference_text: str, cfg: BleuConfig,
               emb: EmbeddingProvider) -> PairScores:
    cand, ref = tokenize(candidate_text), tokenize(reference_text)
    notes = []
    if not cand:
        notes.append("empty candidate")
    if not ref:
        notes.append("empty reference")
    return PairScores(rouge1=rouge_n(cand, ref, 1), rouge2=rouge_n(cand, ref, 2), rougeL=rouge_l(cand, ref),
                      bleu=bleu(cand, ref, cfg), bert=bert_score(cand, ref, emb), notes=notes)


@dataclass
class EvalReport:
    pairs: list
    means: dict

    def to_dict(self) -> dict:
        return {"count": len(self.pairs), "means": self.means, "pairs": [p.to_dict() for p in self.pairs]}

    def table(self, label: str = "model") -> str:
        """Fixed-width table in ROUGE-1 / ROUGE-2 / ROUGE-L / BLEU / BERT order."""
        width = max(len(label), 12)
        head = f"{'':<{width}}" + "".join(f"{h:>10}" for h in TABLE_HEADERS)
        row = f"{label:<{width}}" + "".join(f"{self.means[m]:>10.3f}" for m in METRICS)
        return head + "\n" + row + "\n"


def _mean_block(values: list[float]) -> float:
    return math.fsum(values) / len(values)


def evaluate_corpus(pairs, cfg: BleuConfig = BleuConfig(), emb: EmbeddingProvider | None = None,
                    jobs: int = 1) -> EvalReport:
    """Score every ``(candidate, reference)`` pair and average each metric.

    Means use ``math.fsum`` so they do not depend on pair order or worker count.
    """
    pairs = list(pairs)
    if not pairs:
        raise ParameterError("cannot evaluate an empty list of pairs")
    emb = emb if emb is not None else HashProjectionProvider()
    if jobs > 1 and not isinstance(emb, OneHotProvider):
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scored = list(pool.map(lambda cr: score_pair(cr[0], cr[1], cfg, emb), pairs))
    else:
        scored = [score_pair(c, r, cfg, emb) for c, r in pairs]
    means = {}
    for m in METRICS:
        means[m] = _mean_block([s.headline()[m] for s in scored])
    means["bert_p"] = _mean_block([s.bert.precision for s in scored])
    means["bert_r"] = _mean_block([s.bert.recall for s in scored])
    return EvalReport(pairs=scored, means=means)


# ---- input files --------------------------------------------------------------

def escape_field(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def unescape_field(text: str) -> str:
    out = []
    it = iter(text)
    for ch in it:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(it, None)
        mapped = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}.get(nxt)
        if mapped is None:
            raise FormatError(f"bad escape sequence '\\{nxt or ''}'")
        out.append(mapped)
    return "".join(out)


def read_pairs_tsv(path) -> list[tuple[str, str]]:
    """Two tab-separated columns (candidate, reference); ``\\t \\n \\r \\\\`` escapes."""
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"pairs file not found: {p}")
    pairs = []
    with p.open(encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            cols = line.split("\t")
            if len(cols) != 2:
                raise FormatError(f"{p}:{lineno}: expected 2 tab-separated columns, got {len(cols)}")
            try:
                pairs.append((unescape_field(cols[0]), unescape_field(cols[1])))
            except FormatError as exc:
                raise FormatError(f"{p}:{lineno}: {exc}") from exc
    return pairs


def write_pairs_tsv(path, pairs) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for c, r in pairs:
            fh.write(f"{escape_field(c)}\t{escape_field(r)}\n")


def read_paired_files(candidates_path, references_path) -> list[tuple[str, str]]:
    """Line ``i`` of one file pairs with line ``i`` of the other."""
    lines = []
    for path in (candidates_path, references_path):
        p = Path(path)
        if not p.is_file():
            raise FormatError(f"input file not found: {p}")
        lines.append(p.read_text(encoding="utf-8").splitlines())
    cands, refs = lines
    if len(cands) != len(refs):
        first_missing = min(len(cands), len(refs)) + 1
        which = "reference" if len(refs) < len(cands) else "candidate"
        raise FormatError(f"missing {which} line {first_missing}: "
                          f"{len(cands)} candidates vs {len(refs)} references")
    return list(zip(cands, refs))
