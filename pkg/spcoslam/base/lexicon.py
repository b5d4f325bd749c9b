"""
Lexical acquisition

N-best lattices from a phoneme substitution channel, a Dirichlet-process
unigram language model with a geometric base measure over phoneme strings,
and a blocked Gibbs word segmenter over the lattices of all utterances.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from spcoslam.base.core import (
    DEFAULT_ALPHABET,
    PhonemeString,
    RandomSource,
    WordSequence,
    substitute_phonemes,
)
from spcoslam.base.errors import NumericalError

logger = logging.getLogger(__name__)

MAX_WORD_LENGTH = 12
DEFAULT_P_CONT = 0.2


@dataclass
class RecognitionNoiseSpec:
    sub: float = 0.05
    n_best: int = 10
    alphabet: str = DEFAULT_ALPHABET

    def __post_init__(self):
        if not 0.0 <= self.sub < 1.0:
            raise ValueError("Substitution rate must lie in [0, 1)")
        if self.n_best < 1:
            raise ValueError("n_best must be at least 1")


@dataclass
class Lattice:
    """Ranked N-best list of (candidate string, log-weight)."""

    candidates: list[tuple[PhonemeString, float]]

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("A lattice needs at least one candidate")
        weights = [w for _, w in self.candidates]
        if any(a < b for a, b in zip(weights, weights[1:])):
            raise ValueError("Lattice weights must be non-increasing in rank")

    def __len__(self):
        return len(self.candidates)

    @property
    def strings(self) -> list[PhonemeString]:
        return [s for s, _ in self.candidates]

    @property
    def log_weights(self) -> np.ndarray:
        return np.array([w for _, w in self.candidates])

    def to_json(self) -> list:
        return [[s, w] for s, w in self.candidates]


@dataclass
class LanguageModel:
    """Unigram word model with a Dirichlet-process prior.

    The base measure draws a word phoneme by phoneme, uniformly over the
    alphabet, and ends it after each phoneme with probability p_cont, so
    base(w) = A^-n (1 - p_cont)^(n - 1) p_cont for a word of length n.
    """

    word_counts: Counter = field(default_factory=Counter)
    lam: float = 1.0
    p_cont: float = DEFAULT_P_CONT
    alphabet_size: int = len(DEFAULT_ALPHABET)

    def __post_init__(self):
        self.word_counts = Counter(self.word_counts)
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0.0 < self.p_cont < 1.0:
            raise ValueError("p_cont must lie in (0, 1)")

    @property
    def total_count(self) -> int:
        return sum(self.word_counts.values())

    def log_base(self, word: str) -> float:
        n = len(word)
        return (
            -n * math.log(self.alphabet_size)
            + (n - 1) * math.log1p(-self.p_cont)
            + math.log(self.p_cont)
        )

    def log_prob(self, word: str) -> float:
        """DP predictive: (count(w) + lambda base(w)) / (total + lambda)."""
        numerator = self.word_counts.get(word, 0) + self.lam * math.exp(self.log_base(word))
        return math.log(numerator) - math.log(self.total_count + self.lam)

    def sequence_log_prob(self, words: Sequence[str]) -> float:
        return sum(self.log_prob(w) for w in words)

    def known_mass(self) -> float:
        """Probability mass on the words with non-zero counts."""
        return sum(math.exp(self.log_prob(w)) for w in self.word_counts)

    def remainder_mass(self) -> float:
        """Base-measure mass left over for every word without a count."""
        seen_base = sum(math.exp(self.log_base(w)) for w in self.word_counts)
        return self.lam * (1.0 - seen_base) / (self.total_count + self.lam)

    def to_json(self) -> dict:
        return {
            "word_counts": dict(sorted(self.word_counts.items())),
            "lambda": self.lam,
            "p_cont": self.p_cont,
            "alphabet_size": self.alphabet_size,
        }

    @classmethod
    def from_json(cls, data: dict) -> "LanguageModel":
        return cls(
            word_counts=Counter(data["word_counts"]),
            lam=data["lambda"],
            p_cont=data["p_cont"],
            alphabet_size=data["alphabet_size"],
        )


def best_segmentation(
    string: PhonemeString, lm: LanguageModel, max_word_len: int = MAX_WORD_LENGTH
) -> tuple[WordSequence, float]:
    """Viterbi segmentation of a string under the unigram model."""
    if not string:
        raise ValueError("Cannot segment an empty string")
    n = len(string)
    best = [0.0] + [-math.inf] * n
    back = [0] * (n + 1)
    for j in range(1, n + 1):
        for i in range(max(0, j - max_word_len), j):
            score = best[i] + lm.log_prob(string[i:j])
            if score > best[j]:
                best[j], back[j] = score, i
    words = []
    j = n
    while j > 0:
        words.append(string[back[j] : j])
        j = back[j]
    return WordSequence(tuple(reversed(words))), best[n]


def _channel_log_prob(candidate: str, heard: str, sub: float, alphabet_size: int) -> float:
    mismatches = sum(a != b for a, b in zip(candidate, heard))
    matches = len(heard) - mismatches
    logp = matches * math.log1p(-sub) if matches else 0.0
    if mismatches:
        logp += mismatches * (math.log(sub) - math.log(alphabet_size - 1))
    return logp


def decode_known_words(
    y: PhonemeString,
    lm: LanguageModel,
    sub: float,
    alphabet_size: int,
    max_word_len: int = MAX_WORD_LENGTH,
) -> PhonemeString:
    """Most probable source string of y when stretches may be misheard known words.

    Every stretch of y is explained either as itself or as a word with
    non-zero count of the same length, at most one substitution per three
    phonemes away, scored by the language model times the substitution
    channel. With an empty model, or a noiseless channel, y comes back as is.
    """
    if sub <= 0.0 or not lm.word_counts:
        return y
    by_length: dict = {}
    for word in lm.word_counts:
        by_length.setdefault(len(word), []).append(word)

    n = len(y)
    best = [0.0] + [-math.inf] * n
    back: list = [(0, "")] * (n + 1)
    for j in range(1, n + 1):
        for i in range(max(0, j - max_word_len), j):
            heard = y[i:j]
            options = [heard]
            for word in by_length.get(j - i, ()):
                mismatches = sum(a != b for a, b in zip(word, heard))
                if 0 < mismatches and 3 * mismatches <= len(word):
                    options.append(word)
            for word in options:
                score = (
                    best[i]
                    + lm.log_prob(word)
                    + _channel_log_prob(word, heard, sub, alphabet_size)
                )
                if score > best[j]:
                    best[j], back[j] = score, (i, word)
    words = []
    j = n
    while j > 0:
        i, word = back[j]
        words.append(word)
        j = i
    return "".join(reversed(words))


def recognize(
    y: PhonemeString, lm: LanguageModel, noise: RecognitionNoiseSpec, rng: RandomSource
) -> Lattice:
    """N-best lattice for a heard phoneme string, rescored by the language model.

    The candidates are the string decoded against the known words, the heard
    string itself and random confusions of it, at most n_best in all.
    """
    if not y:
        raise ValueError("Cannot recognize an empty utterance")
    decoded = decode_known_words(y, lm, noise.sub, len(noise.alphabet))
    confusions = [
        substitute_phonemes(y, noise.sub, noise.alphabet, rng) for _ in range(noise.n_best)
    ]
    unique = list(dict.fromkeys([decoded, y, *confusions]))[: noise.n_best]
    scored = []
    for candidate in unique:
        channel = _channel_log_prob(candidate, y, noise.sub, len(noise.alphabet))
        _, lm_logp = best_segmentation(candidate, lm)
        scored.append((candidate, channel + lm_logp))
    # stable sort keeps generation order on ties
    scored.sort(key=lambda c: -c[1])
    return Lattice(scored)


@dataclass
class SegmentationState:
    """Current candidate choice and interior word boundaries of every utterance."""

    choices: list[int] = field(default_factory=list)
    boundaries: list[tuple[int, ...]] = field(default_factory=list)
    iterations: int = 0

    def __len__(self):
        return len(self.choices)

    def copy(self) -> "SegmentationState":
        return SegmentationState(list(self.choices), list(self.boundaries), self.iterations)

    def words(self, lattices: Sequence[Lattice]) -> list[WordSequence]:
        return [
            _utterance_words(lattice, choice, cuts)
            for lattice, choice, cuts in zip(lattices, self.choices, self.boundaries)
        ]


def _utterance_words(lattice: Lattice, choice: int, cuts: Sequence[int]) -> WordSequence:
    string = lattice.candidates[choice][0]
    edges = (0, *cuts, len(string))
    return WordSequence(tuple(string[a:b] for a, b in zip(edges, edges[1:])))


def _forward(
    string: str, counts: Counter, total: int, lm: LanguageModel, max_word_len: int
) -> tuple[np.ndarray, dict]:
    """Forward log-marginals over segmentations with counts held fixed."""
    n = len(string)
    log_norm = math.log(total + lm.lam)
    alpha = np.full(n + 1, -math.inf)
    alpha[0] = 0.0
    word_logp: dict = {}
    for j in range(1, n + 1):
        terms = []
        for i in range(max(0, j - max_word_len), j):
            word = string[i:j]
            numerator = counts.get(word, 0) + lm.lam * math.exp(lm.log_base(word))
            word_logp[i, j] = math.log(numerator) - log_norm
            terms.append(alpha[i] + word_logp[i, j])
        alpha[j] = logsumexp(terms)
    return alpha, word_logp


def _backward_sample(
    n: int, alpha: np.ndarray, word_logp: dict, max_word_len: int, rng: RandomSource
) -> tuple[int, ...]:
    cuts = []
    j = n
    while j > 0:
        starts = np.arange(max(0, j - max_word_len), j)
        scores = np.array([alpha[i] + word_logp[i, j] for i in starts])
        probs = np.exp(scores - logsumexp(scores))
        j = int(starts[rng.choice(starts.size, p=probs / probs.sum())])
        if j > 0:
            cuts.append(j)
    return tuple(reversed(cuts))


def _resample_utterance(
    lattice: Lattice,
    counts: Counter,
    total: int,
    lm: LanguageModel,
    max_word_len: int,
    rng: RandomSource,
) -> tuple[int, tuple[int, ...]]:
    tables = [_forward(s, counts, total, lm, max_word_len) for s in lattice.strings]
    scores = lattice.log_weights + np.array([alpha[-1] for alpha, _ in tables])
    probs = np.exp(scores - logsumexp(scores))
    choice = int(rng.choice(len(tables), p=probs / probs.sum()))
    alpha, word_logp = tables[choice]
    n = len(lattice.strings[choice])
    return choice, _backward_sample(n, alpha, word_logp, max_word_len, rng)


def segment(
    lattices: Sequence[Lattice],
    lam: float,
    iters: int,
    rng: RandomSource,
    p_cont: float = DEFAULT_P_CONT,
    alphabet_size: int = len(DEFAULT_ALPHABET),
    state: Optional[SegmentationState] = None,
    max_word_len: int = MAX_WORD_LENGTH,
) -> list[WordSequence]:
    """Blocked Gibbs segmentation of every utterance against a DP unigram model.

    Each sweep resamples one utterance at a time: the candidate is drawn in
    proportion to its lattice weight times the forward marginal of the string,
    then the boundaries are drawn backwards, all with the word counts of the
    other utterances. Utterances not yet in ``state`` are initialized
    sequentially the same way; ``state`` is updated in place when given.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    lm = LanguageModel(lam=lam, p_cont=p_cont, alphabet_size=alphabet_size)
    if state is None:
        state = SegmentationState()
    if len(state) > len(lattices):
        raise ValueError("Segmentation state covers more utterances than lattices given")

    counts: Counter = Counter()
    for words in state.words(lattices):
        counts.update(words)
    total = sum(counts.values())

    for u in range(len(state), len(lattices)):
        choice, cuts = _resample_utterance(lattices[u], counts, total, lm, max_word_len, rng)
        state.choices.append(choice)
        state.boundaries.append(cuts)
        new = _utterance_words(lattices[u], choice, cuts)
        counts.update(new)
        total += len(new)

    for _ in range(iters):
        for u, lattice in enumerate(lattices):
            old = _utterance_words(lattice, state.choices[u], state.boundaries[u])
            counts.subtract(old)
            total -= len(old)
            choice, cuts = _resample_utterance(lattice, counts, total, lm, max_word_len, rng)
            state.choices[u], state.boundaries[u] = choice, cuts
            new = _utterance_words(lattice, choice, cuts)
            counts.update(new)
            total += len(new)
        state.iterations += 1
    return state.words(lattices)


class HasSegmentation(Protocol):
    log_weight: float
    segmentations: list[WordSequence]


def select_max_weight_segmentation(particles: Sequence[HasSegmentation]) -> list[WordSequence]:
    """Segmentation history of the highest-weight particle, lowest index on ties."""
    best_index = None
    best_weight = -math.inf
    for index, particle in enumerate(particles):
        weight = particle.log_weight
        if math.isfinite(weight) and weight > best_weight:
            best_index, best_weight = index, weight
    if best_index is None:
        raise NumericalError("No particle has a finite weight")
    return list(particles[best_index].segmentations)


def update_language_model(
    s_star: Sequence[WordSequence],
    lam: float,
    p_cont: float = DEFAULT_P_CONT,
    alphabet_size: int = len(DEFAULT_ALPHABET),
) -> LanguageModel:
    counts: Counter = Counter()
    for words in s_star:
        counts.update(words)
    return LanguageModel(counts, lam, p_cont, alphabet_size)
