"""
Spatial concepts

Collapsed sufficient statistics for the spatial-concept model, the CRP joint
prior over (concept, position distribution), conjugate predictive
likelihoods for words, scene features and positions, joint sampling of a
teaching event's assignments, the particle weight factors for features and
words, and posterior-mean parameter estimates.

Index conventions: concepts are l = 0..L-1, position distributions
k = 0..K-1, and NEW (-1) stands for a not yet instantiated one. Each position
distribution belongs to exactly one concept.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp, multigammaln
from scipy.stats import multivariate_t

from spcoslam.base.core import (
    POSITION_DIM,
    Hyperparams,
    ImageFeature,
    RandomSource,
    WordSequence,
)
from spcoslam.base.errors import NumericalError
from spcoslam.base.lexicon import LanguageModel

logger = logging.getLogger(__name__)

NEW = -1


@dataclass
class ConceptStats:
    feature_dim: int
    n_t: int = 0
    n_l: list[int] = field(default_factory=list)
    n_le: list[np.ndarray] = field(default_factory=list)
    n_lg: list[Counter] = field(default_factory=list)
    concept_of_k: list[int] = field(default_factory=list)
    n_k: list[int] = field(default_factory=list)
    sum_x: list[np.ndarray] = field(default_factory=list)
    sum_xxT: list[np.ndarray] = field(default_factory=list)
    vocab: dict[str, int] = field(default_factory=dict)
    global_word_counts: Counter = field(default_factory=Counter)

    @property
    def L(self) -> int:
        return len(self.n_l)

    @property
    def K(self) -> int:
        return len(self.n_k)

    @property
    def G(self) -> int:
        return len(self.vocab)

    def n_lk(self, l: int, k: int) -> int:
        return self.n_k[k] if self.concept_of_k[k] == l else 0

    def positions_of(self, l: int) -> list[int]:
        return [k for k, owner in enumerate(self.concept_of_k) if owner == l]

    def register_words(self, words: Sequence[str]) -> None:
        for word in words:
            if word not in self.vocab:
                self.vocab[word] = len(self.vocab)

    def add(
        self,
        x: np.ndarray,
        s: WordSequence,
        f: Optional[ImageFeature],
        k: int,
        l: int,
    ) -> tuple[int, int]:
        """Count one teaching event under (k, l); NEW creates the cluster. Returns the real indices."""
        if l == NEW:
            if k != NEW:
                raise ValueError("A new concept needs a new position distribution")
            l = self.L
            self.n_l.append(0)
            self.n_le.append(np.zeros(self.feature_dim, dtype=np.int64))
            self.n_lg.append(Counter())
        if k == NEW:
            k = self.K
            self.concept_of_k.append(l)
            self.n_k.append(0)
            self.sum_x.append(np.zeros(POSITION_DIM))
            self.sum_xxT.append(np.zeros((POSITION_DIM, POSITION_DIM)))
        elif self.concept_of_k[k] != l:
            raise ValueError(f"Position distribution {k} does not belong to concept {l}")

        x = np.asarray(x, dtype=float)
        self.n_t += 1
        self.n_l[l] += 1
        self.n_k[k] += 1
        self.sum_x[k] = self.sum_x[k] + x
        self.sum_xxT[k] = self.sum_xxT[k] + np.outer(x, x)
        if f is not None:
            self.n_le[l] = self.n_le[l] + f.counts
        self.register_words(s.words)
        self.n_lg[l].update(s.words)
        self.global_word_counts.update(s.words)
        return k, l

    def rebuild_words(
        self, segmentations: Sequence[WordSequence], concepts: Sequence[int]
    ) -> None:
        """Recount word statistics from a (re)segmented history."""
        if len(segmentations) != len(concepts):
            raise ValueError("Segmentation and concept histories differ in length")
        self.vocab = {}
        self.n_lg = [Counter() for _ in range(self.L)]
        self.global_word_counts = Counter()
        for words, l in zip(segmentations, concepts):
            self.register_words(words.words)
            self.n_lg[l].update(words.words)
            self.global_word_counts.update(words.words)

    def copy(self) -> "ConceptStats":
        return ConceptStats(
            feature_dim=self.feature_dim,
            n_t=self.n_t,
            n_l=list(self.n_l),
            n_le=[a.copy() for a in self.n_le],
            n_lg=[Counter(c) for c in self.n_lg],
            concept_of_k=list(self.concept_of_k),
            n_k=list(self.n_k),
            sum_x=[a.copy() for a in self.sum_x],
            sum_xxT=[a.copy() for a in self.sum_xxT],
            vocab=dict(self.vocab),
            global_word_counts=Counter(self.global_word_counts),
        )

    def check(self) -> None:
        """Raise AssertionError when the count bookkeeping is inconsistent."""
        assert sum(self.n_l) == self.n_t
        assert sum(self.n_k) == self.n_t
        for l in range(self.L):
            assert sum(self.n_lk(l, k) for k in range(self.K)) == self.n_l[l]
            assert (self.n_le[l] >= 0).all()
        for m in self.sum_xxT:
            assert np.allclose(m, m.T)

    def fingerprint(self) -> tuple:
        return (
            self.n_t,
            tuple(self.n_l),
            tuple(self.concept_of_k),
            tuple(self.n_k),
            tuple(tuple(a.tolist()) for a in self.n_le),
            tuple(tuple(a.ravel().tolist()) for a in self.sum_x),
            tuple(tuple(a.ravel().tolist()) for a in self.sum_xxT),
            tuple(sorted(self.vocab.items())),
            tuple(tuple(sorted(c.items())) for c in self.n_lg),
        )


@dataclass
class NIWPosterior:
    m: np.ndarray
    kappa: float
    nu: float
    V: np.ndarray

    @classmethod
    def prior(cls, h: Hyperparams) -> "NIWPosterior":
        return cls(h.m0_array, h.kappa0, h.nu0, h.V0_array)

    @classmethod
    def from_moments(
        cls, n: int, sum_x: np.ndarray, sum_xxT: np.ndarray, h: Hyperparams
    ) -> "NIWPosterior":
        if n == 0:
            return cls.prior(h)
        m0, kappa0 = h.m0_array, h.kappa0
        kappa = kappa0 + n
        m = (sum_x + kappa0 * m0) / kappa
        V = h.V0_array + sum_xxT + kappa0 * np.outer(m0, m0) - kappa * np.outer(m, m)
        V = (V + V.T) / 2.0
        if np.linalg.eigvalsh(V).min() <= 0:
            raise NumericalError("Posterior scale matrix is not positive-definite")
        return cls(m, kappa, h.nu0 + n, V)

    @property
    def dof(self) -> float:
        return self.nu - POSITION_DIM + 1

    def predictive_scale(self) -> np.ndarray:
        return self.V * (self.kappa + 1.0) / (self.kappa * self.dof)

    def log_predictive(self, x: np.ndarray) -> float:
        return float(
            multivariate_t.logpdf(x, loc=self.m, shape=self.predictive_scale(), df=self.dof)
        )


def _posterior(stats: ConceptStats, k: int, h: Hyperparams) -> NIWPosterior:
    if k == NEW:
        return NIWPosterior.prior(h)
    if stats.n_k[k] < 1:
        raise ValueError(f"Position distribution {k} holds no data")
    return NIWPosterior.from_moments(stats.n_k[k], stats.sum_x[k], stats.sum_xxT[k], h)


def niw_log_marginal_likelihood(
    n: int, sum_x: np.ndarray, sum_xxT: np.ndarray, h: Hyperparams
) -> float:
    """log p(x_1..x_n) with the Gaussian parameters integrated out."""
    d = POSITION_DIM
    post = NIWPosterior.from_moments(n, np.asarray(sum_x), np.asarray(sum_xxT), h)
    _, logdet0 = np.linalg.slogdet(h.V0_array)
    _, logdet_n = np.linalg.slogdet(post.V)
    return float(
        -n * d / 2.0 * math.log(math.pi)
        + multigammaln(post.nu / 2.0, d)
        - multigammaln(h.nu0 / 2.0, d)
        + h.nu0 / 2.0 * logdet0
        - post.nu / 2.0 * logdet_n
        + d / 2.0 * (math.log(h.kappa0) - math.log(post.kappa))
    )


def crp_prior_joint(stats: ConceptStats, l: int, k: int, h: Hyperparams) -> float:
    """Joint CRP prior of C_t = l and i_t = k."""
    if l == NEW:
        if k != NEW:
            raise ValueError("An existing position distribution cannot open a new concept")
        return h.alpha / (stats.n_t + h.alpha)
    n_l = stats.n_l[l]
    p_l = n_l / (stats.n_t + h.alpha)
    if k == NEW:
        return h.gamma / (n_l + h.gamma) * p_l
    return stats.n_lk(l, k) / (n_l + h.gamma) * p_l


def word_predictive(stats: ConceptStats, l: int, s: WordSequence, h: Hyperparams) -> float:
    """log p(s | words already under concept l); counts stay fixed across the utterance."""
    if len(s) == 0:
        raise ValueError("Word sequence is empty")
    missing = [w for w in s.words if w not in stats.vocab]
    if missing:
        raise ValueError(f"Words {missing} are not registered in the vocabulary")
    G = stats.G
    if l == NEW:
        return -len(s) * math.log(G)
    counts = stats.n_lg[l]
    log_norm = math.log(sum(counts.values()) + G * h.beta)
    return sum(math.log(counts.get(w, 0) + h.beta) - log_norm for w in s.words)


def feature_predictive(stats: ConceptStats, l: int, f: ImageFeature, h: Hyperparams) -> float:
    if f.dim != stats.feature_dim:
        raise ValueError(f"Feature has dimension {f.dim}, expected {stats.feature_dim}")
    if f.total < 1:
        raise ValueError("Feature vector carries no counts")
    E = stats.feature_dim
    if l == NEW:
        return -f.total * math.log(E)
    n_le = stats.n_le[l]
    log_theta = np.log(n_le + h.chi) - math.log(n_le.sum() + E * h.chi)
    return float(np.dot(f.counts, log_theta))


def position_predictive(stats: ConceptStats, k: int, x: np.ndarray, h: Hyperparams) -> float:
    return _posterior(stats, k, h).log_predictive(np.asarray(x, dtype=float))


@dataclass
class OutcomeScores:
    """Every (l, k) outcome of a teaching event with its unnormalized log score."""

    outcomes: list[tuple[int, int]]
    log_scores: np.ndarray

    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_scores - logsumexp(self.log_scores))


def score_outcomes(
    stats: ConceptStats,
    x: np.ndarray,
    s: WordSequence,
    f: Optional[ImageFeature],
    h: Hyperparams,
) -> OutcomeScores:
    """Score existing (l, k), existing l with new k and new (l, k); f=None drops the feature factor."""
    stats.register_words(s.words)
    concepts = list(range(stats.L)) + [NEW]
    per_concept = {}
    for l in concepts:
        score = word_predictive(stats, l, s, h)
        if f is not None:
            score += feature_predictive(stats, l, f, h)
        per_concept[l] = score
    per_position = {k: position_predictive(stats, k, x, h) for k in range(stats.K)}
    per_position[NEW] = position_predictive(stats, NEW, x, h)

    outcomes, scores = [], []
    for l in concepts:
        ks = (stats.positions_of(l) if l != NEW else []) + [NEW]
        for k in ks:
            outcomes.append((l, k))
            scores.append(
                per_concept[l] + per_position[k] + math.log(crp_prior_joint(stats, l, k, h))
            )
    return OutcomeScores(outcomes, np.array(scores))


def sample_it_ct(
    stats: ConceptStats,
    x_t: np.ndarray,
    s_t: WordSequence,
    f_t: Optional[ImageFeature],
    h: Hyperparams,
    rng: RandomSource,
) -> tuple[int, int]:
    """Draw (i_t, C_t) from the collapsed posterior and count the event in stats."""
    scored = score_outcomes(stats, x_t, s_t, f_t, h)
    probs = scored.probabilities()
    l, k = scored.outcomes[int(rng.choice(len(probs), p=probs / probs.sum()))]
    return stats.add(x_t, s_t, f_t, k, l)


def _concept_log_mixture(stats: ConceptStats, h: Hyperparams) -> dict[int, float]:
    denom = stats.n_t + h.alpha
    weights = {l: math.log(n / denom) for l, n in enumerate(stats.n_l)}
    weights[NEW] = math.log(h.alpha / denom)
    return weights


def weight_feature_term(stats: ConceptStats, f_t: ImageFeature, h: Hyperparams) -> float:
    """log omega_f: feature predictive marginalized over the CRP choice of C_t."""
    mixture = _concept_log_mixture(stats, h)
    return float(
        logsumexp([w + feature_predictive(stats, l, f_t, h) for l, w in mixture.items()])
    )


def weight_word_term(stats: ConceptStats, s_t: WordSequence, h: Hyperparams) -> float:
    """log omega_s: concept-aware word predictive over the concept-free one."""
    stats.register_words(s_t.words)
    mixture = _concept_log_mixture(stats, h)
    numerator = logsumexp([w + word_predictive(stats, l, s_t, h) for l, w in mixture.items()])
    counts = stats.global_word_counts
    log_norm = math.log(sum(counts.values()) + stats.G * h.beta)
    denominator = sum(math.log(counts.get(w, 0) + h.beta) - log_norm for w in s_t.words)
    return float(numerator - denominator)


@dataclass
class ConceptParams:
    """Posterior means of the model parameters.

    pi and every phi row carry a trailing null bucket holding the mass of a
    not yet instantiated concept or position distribution.
    """

    pi: np.ndarray
    phi: np.ndarray
    W: np.ndarray
    theta: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    vocab: list[str]
    concept_of_k: list[int]
    degenerate: list[bool] = field(default_factory=list)

    @property
    def L(self) -> int:
        return int(self.W.shape[0])

    @property
    def K(self) -> int:
        return int(self.mu.shape[0])

    def word_index(self, word: str) -> Optional[int]:
        try:
            return self.vocab.index(word)
        except ValueError:
            return None

    def to_json(self, top_n: int = 3) -> dict:
        return {
            "pi": self.pi.tolist(),
            "concepts": [
                {
                    "l": l,
                    "phi": self.phi[l].tolist(),
                    "top_words": [[w, p] for w, p in top_words(self, l, top_n)],
                    "W": dict(zip(self.vocab, self.W[l].tolist())),
                    "theta": self.theta[l].tolist(),
                }
                for l in range(self.L)
            ],
            "positions": [
                {
                    "k": k,
                    "concept": self.concept_of_k[k],
                    "mu": self.mu[k].tolist(),
                    "Sigma": self.Sigma[k].tolist(),
                    "degenerate": self.degenerate[k],
                }
                for k in range(self.K)
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "ConceptParams":
        concepts = data["concepts"]
        positions = data["positions"]
        vocab = list(concepts[0]["W"]) if concepts else []
        d = POSITION_DIM
        return cls(
            pi=np.array(data["pi"]),
            phi=np.array([c["phi"] for c in concepts]).reshape(len(concepts), len(positions) + 1),
            W=np.array([[c["W"][w] for w in vocab] for c in concepts]).reshape(len(concepts), len(vocab)),
            theta=np.array([c["theta"] for c in concepts]),
            mu=np.array([p["mu"] for p in positions]).reshape(len(positions), d),
            Sigma=np.array([p["Sigma"] for p in positions]).reshape(len(positions), d, d),
            vocab=vocab,
            concept_of_k=[p["concept"] for p in positions],
            degenerate=[p["degenerate"] for p in positions],
        )


def estimate_params(stats: ConceptStats, h: Hyperparams) -> ConceptParams:
    if stats.n_t < 1:
        raise ValueError("Cannot estimate parameters before the first teaching event")
    L, K, G, E = stats.L, stats.K, stats.G, stats.feature_dim
    d = POSITION_DIM

    pi = np.array([n / (stats.n_t + h.alpha) for n in stats.n_l] + [h.alpha / (stats.n_t + h.alpha)])
    phi = np.zeros((L, K + 1))
    W = np.zeros((L, G))
    theta = np.zeros((L, E))
    vocab = sorted(stats.vocab, key=stats.vocab.get)
    for l in range(L):
        denom = stats.n_l[l] + h.gamma
        for k in stats.positions_of(l):
            phi[l, k] = stats.n_k[k] / denom
        phi[l, K] = h.gamma / denom
        counts = np.array([stats.n_lg[l].get(w, 0) for w in vocab], dtype=float)
        W[l] = (counts + h.beta) / (counts.sum() + G * h.beta)
        theta[l] = (stats.n_le[l] + h.chi) / (stats.n_le[l].sum() + E * h.chi)

    mu = np.zeros((K, d))
    Sigma = np.zeros((K, d, d))
    degenerate = []
    for k in range(K):
        post = _posterior(stats, k, h)
        mu[k] = post.m
        if post.nu - d - 1 > 0:
            Sigma[k] = post.V / (post.nu - d - 1)
            degenerate.append(False)
        else:
            logger.warning(f"Covariance mean undefined for position {k}; using the mode")
            Sigma[k] = post.V / (post.nu + d + 1)
            degenerate.append(True)
    return ConceptParams(pi, phi, W, theta, mu, Sigma, vocab, list(stats.concept_of_k), degenerate)


def top_words(params: ConceptParams, l: int, n: int = 3) -> list[tuple[str, float]]:
    order = sorted(range(len(params.vocab)), key=lambda g: (-params.W[l, g], g))
    return [(params.vocab[g], float(params.W[l, g])) for g in order[:n]]


def position_top_words(
    params: ConceptParams, k: int, lm: LanguageModel, n: int = 3
) -> list[tuple[str, float]]:
    """Most probable words for position distribution k, rescaled by the language model."""
    l = params.concept_of_k[k]
    scores = np.array(
        [
            lm.log_prob(w) + math.log(params.W[l, g]) - math.log(params.W[:, g].sum())
            for g, w in enumerate(params.vocab)
        ]
    )
    if scores.size == 0:
        return []
    probs = np.exp(scores - logsumexp(scores))
    order = sorted(range(len(params.vocab)), key=lambda g: (-probs[g], g))
    return [(params.vocab[g], float(probs[g])) for g in order[:n]]


def unigram_rescaled_sentence_likelihood(
    params: ConceptParams, lm: LanguageModel, s_t: WordSequence, C: int
) -> float:
    """log p(s | LM) times, per word, W_C(w) over the sum across instantiated concepts.

    Words outside the concept vocabulary contribute the language-model term only.
    """
    total = lm.sequence_log_prob(s_t.words)
    for word in s_t.words:
        g = params.word_index(word)
        if g is None:
            continue
        total += math.log(params.W[C, g]) - math.log(params.W[:, g].sum())
    return total
