"""Text topic model under the Brown (one-cluster-per-word) structure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import adcore as ad
from ..errors import ConfigError, DataError, DomainError
from .base import ModelProgram, ObservationSequence, SimplexReparam


@dataclass(frozen=True)
class TopicModelSpec:
    """Cluster transition ``q`` (N x N), emission ``g`` (length M), state map.

    ``emission[x]`` is ``g(x | state_map[x])``; entries for other clusters are
    zero by construction and are not stored.
    """

    transition: np.ndarray
    emission: np.ndarray
    state_map: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.transition, dtype=float)
        g = np.asarray(self.emission, dtype=float).reshape(-1)
        h = np.asarray(self.state_map, dtype=int).reshape(-1)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ConfigError("transition matrix must be square")
        if np.any(q < 0) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-12):
            raise ConfigError("transition rows must be probability vectors")
        if g.size != h.size:
            raise ConfigError("emission and state map must both have one entry per word")
        if np.any(h < 0) or np.any(h >= q.shape[0]):
            raise ConfigError("state map points outside the cluster range")
        if np.any(g < 0):
            raise ConfigError("emission probabilities must be nonnegative")
        for c in range(q.shape[0]):
            members = h == c
            if not members.any():
                raise ConfigError(f"cluster {c} has no words")
            if abs(g[members].sum() - 1.0) > 1e-12:
                raise ConfigError(f"emission mass of cluster {c} must sum to 1")
        object.__setattr__(self, "transition", q)
        object.__setattr__(self, "emission", g)
        object.__setattr__(self, "state_map", h)

    @property
    def N(self) -> int:
        return self.transition.shape[0]

    @property
    def M(self) -> int:
        return self.state_map.size

    @property
    def theta(self) -> np.ndarray:
        prog = topic_model_loglik(self)
        return prog.pack(self.transition, self.emission)


@dataclass(frozen=True)
class TopicModel(ModelProgram):
    """Decoupled log-likelihood ``log q(H_k | H_{k-1}) + log g(X_k | H_k)``.

    ``H_k = state_map[X_k]``. Parameters are ``q[:, :N-1]`` row-major, then
    for every cluster the probabilities of all but its last member word.
    Observation values are word indices; the prefix holds ``X_0``.
    """

    N: int
    state_map: tuple

    kind = "topic"
    independent = False

    def __post_init__(self):
        h = tuple(int(x) for x in self.state_map)
        if self.N < 1 or not h or min(h) < 0 or max(h) >= self.N:
            raise ConfigError("state map must assign every word to a cluster 0..N-1")
        if len(set(h)) != self.N:
            raise ConfigError("every cluster needs at least one word")
        object.__setattr__(self, "state_map", h)

    @property
    def M(self) -> int:
        return len(self.state_map)

    @property
    def n_transition(self) -> int:
        return self.N * (self.N - 1)

    def members(self, c) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.state_map) == c)

    @property
    def free_words(self) -> list[np.ndarray]:
        return [self.members(c)[:-1] for c in range(self.N)]

    @property
    def dim(self) -> int:
        return self.n_transition + sum(len(w) for w in self.free_words)

    @property
    def labels(self):
        out = [f"q[{i},{j}]" for i in range(self.N) for j in range(self.N - 1)]
        for c, words in enumerate(self.free_words):
            out += [f"g[{x}|{c}]" for x in words]
        return tuple(out)

    @property
    def reparam(self):
        m = self.N - 1
        groups = [range(i * m, (i + 1) * m) for i in range(self.N)]
        start = self.n_transition
        for words in self.free_words:
            groups.append(range(start, start + len(words)))
            start += len(words)
        return SimplexReparam(self.dim, groups)

    def pack(self, transition, emission) -> np.ndarray:
        q = np.asarray(transition, dtype=float)
        g = np.asarray(emission, dtype=float)
        parts = [q[:, :-1].reshape(-1)] + [g[w] for w in self.free_words]
        return np.concatenate(parts)

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        n = self.N
        free = theta[: self.n_transition].reshape(n, n - 1)
        q = np.hstack([free, 1.0 - free.sum(axis=1, keepdims=True)])
        g = np.empty(self.M)
        start = self.n_transition
        for c, words in enumerate(self.free_words):
            k = len(words)
            block = theta[start:start + k]
            g[words] = block
            g[self.members(c)[-1]] = 1.0 - block.sum()
            start += k
        return q, g

    def check_domain(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,) or not np.all(np.isfinite(theta)):
            raise DomainError(f"topic-model parameter must be a finite vector of length {self.dim}")
        q, g = self.unpack(theta)
        if np.any(q < 0) or np.any(g < 0):
            raise DomainError("probabilities left the simplex")

    def words(self, data) -> tuple[np.ndarray, int]:
        x = np.asarray(data.values)
        if data.prefix is None or data.prefix.size != 1:
            raise DataError("topic model needs the known first word X_0 as prefix")
        x0 = data.prefix[0]
        allx = np.concatenate([[x0], x])
        if np.any(allx != np.round(allx)) or np.any(allx < 0) or np.any(allx >= self.M):
            raise DataError(f"word index outside the vocabulary 0..{self.M - 1} (no cluster assigned)")
        allx = allx.astype(int)
        return allx[1:], int(allx[0])

    def check_data(self, data):
        self.words(data)

    def build(self, theta, data):
        x, x0 = self.words(data)
        hmap = np.asarray(self.state_map)
        h = hmap[x]
        h_prev = np.concatenate([[hmap[x0]], h[:-1]])
        n = self.N
        if n > 1:
            free = ad.reshape(ad.take(theta, np.arange(self.n_transition)), (n, n - 1))
            last = 1.0 - ad.vsum(free, axis=1)
            q = ad.concat([free, ad.reshape(last, (n, 1))], axis=1)
            log_q = ad.reshape(ad.log(q), (n * n,))
            chain = ad.take(log_q, h_prev * n + h)
        else:
            chain = np.zeros(x.size)
        # assemble g in cluster-major order, then permute to word order
        pieces, order = [], []
        start = self.n_transition
        for c, words in enumerate(self.free_words):
            k = len(words)
            if k:
                block = ad.take(theta, np.arange(start, start + k))
                pieces += [block, ad.reshape(1.0 - ad.vsum(block), (1,))]
            else:
                pieces.append(np.ones(1))
            order += list(self.members(c))
            start += k
        g_cluster = ad.concat(pieces)
        inv = np.argsort(np.asarray(order))
        log_g = ad.take(ad.log(g_cluster), inv)
        emit = ad.take(log_g, x)
        return chain + emit

    def mle(self, data) -> np.ndarray:
        """Count-ratio maximum likelihood estimate (natural coordinates)."""
        x, x0 = self.words(data)
        hmap = np.asarray(self.state_map)
        h = hmap[x]
        h_prev = np.concatenate([[hmap[x0]], h[:-1]])
        counts = np.zeros((self.N, self.N))
        np.add.at(counts, (h_prev, h), 1.0)
        rows = counts.sum(axis=1, keepdims=True)
        q = np.where(rows > 0, counts / np.maximum(rows, 1.0), 1.0 / self.N)
        wc = np.bincount(x, minlength=self.M).astype(float)
        cc = np.bincount(hmap, weights=wc, minlength=self.N)
        g = np.where(cc[hmap] > 0, wc / np.maximum(cc[hmap], 1.0),
                     1.0 / np.bincount(hmap, minlength=self.N)[hmap])
        return self.pack(q, g)

    def initial_guess(self, data):
        # smoothed counts keep the start inside the open simplex
        x, x0 = self.words(data)
        hmap = np.asarray(self.state_map)
        h = hmap[x]
        h_prev = np.concatenate([[hmap[x0]], h[:-1]])
        counts = np.ones((self.N, self.N))
        np.add.at(counts, (h_prev, h), 1.0)
        q = counts / counts.sum(axis=1, keepdims=True)
        wc = np.bincount(x, minlength=self.M) + 1.0
        g = wc / np.bincount(hmap, weights=wc, minlength=self.N)[hmap]
        return self.pack(q, g)

    def simulate(self, theta, n, rng, template=None, theta_after=None, tau=None):
        hmap = np.asarray(self.state_map)
        q0, g0 = self.unpack(theta)
        q1, g1 = (q0, g0) if theta_after is None else self.unpack(theta_after)
        if template is not None:
            n = template.n
            x0 = int(template.prefix[0])
        else:
            c0 = int(rng.integers(self.N))
            x0 = int(_draw_word(rng, g0, self.members(c0)))
        tau = n if tau is None else tau
        x = np.empty(n, dtype=int)
        h = hmap[x0]
        for k in range(n):
            q, g = (q0, g0) if k < tau else (q1, g1)
            p = np.clip(q[h], 0.0, None)
            h = int(rng.choice(self.N, p=p / p.sum()))
            x[k] = _draw_word(rng, g, self.members(h))
        return ObservationSequence(x.astype(float), prefix=np.array([float(x0)]))

    def to_json(self):
        return {"kind": self.kind, "dim": self.dim,
                "params": {"N": self.N, "state_map": list(self.state_map)}}


def _draw_word(rng, g, members):
    p = np.clip(g[members], 0.0, None)
    return members[rng.choice(members.size, p=p / p.sum())]


def topic_model_loglik(spec: TopicModelSpec) -> TopicModel:
    return TopicModel(spec.N, tuple(int(x) for x in spec.state_map))
