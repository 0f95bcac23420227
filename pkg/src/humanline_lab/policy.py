"""Tabular autoregressive softmax policies.

A policy is a logit table indexed by ``(context state, next token)``.  The
context state combines the index of the prompt ``x`` with the previous
``n - 1`` output tokens, so with the default ``n = 2`` every row is a bigram
distribution specialised to one prompt.  Everything is exact: log-probs,
gradients and likelihood-ratio bounds can all be obtained by enumeration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence as Seq

import numpy as np

MAGIC = "HLPOL1"


@dataclass(frozen=True)
class Vocabulary:
    """Dense token ids ``0..size-1``; ``eos`` is one of them.

    ``bos`` is a padding symbol (id ``size``) that only appears inside
    context states and is never emitted.
    """

    size: int
    eos: int
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        if not 4 <= self.size <= 64:
            raise ValueError(f"vocabulary size must be in [4, 64], got {self.size}")
        if not 0 <= self.eos < self.size:
            raise ValueError("eos must be a vocabulary token")
        if self.names is not None and len(self.names) != self.size:
            raise ValueError("names must have one entry per token")

    @property
    def bos(self) -> int:
        return self.size

    def render(self, tokens: Iterable[int]) -> str:
        if self.names is None:
            return " ".join(str(t) for t in tokens)
        return "".join(self.names[t] for t in tokens)


@dataclass(frozen=True)
class Sequence:
    """A prompt ``x`` and an output ``y`` (which ends in eos)."""

    x: tuple[int, ...]
    y: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(int(t) for t in self.x))
        object.__setattr__(self, "y", tuple(int(t) for t in self.y))


@dataclass
class TokenBatch:
    """Flattened token view of a list of sequences.

    ``states[i]`` is the context state under which ``tokens[i]`` was emitted
    and ``seq_ids[i]`` the sequence it belongs to.  The indexing depends only
    on the policy architecture, so one batch serves policy, reference and
    baseline alike.
    """

    states: np.ndarray
    tokens: np.ndarray
    seq_ids: np.ndarray
    lengths: np.ndarray

    @property
    def n_seqs(self) -> int:
        return len(self.lengths)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    def seq_sum(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.seq_ids, weights=values, minlength=self.n_seqs)

    def split(self, values: np.ndarray) -> list[np.ndarray]:
        bounds = np.cumsum(self.lengths)[:-1]
        return np.split(np.asarray(values), bounds)


@dataclass
class GradTape:
    """Gradient accumulator aligned with a policy's logit table."""

    grad: np.ndarray
    mask: np.ndarray | None = field(default=None)

    @classmethod
    def zeros_like(cls, policy: "Policy") -> "GradTape":
        return cls(np.zeros_like(policy.logits))

    def __iadd__(self, other: "GradTape") -> "GradTape":
        self.grad += other.grad
        return self

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.grad * self.grad)))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Policy:
    """Exact n-gram softmax policy conditioned on a registered prompt set."""

    def __init__(
        self,
        vocab: Vocabulary,
        contexts: Seq[Seq[int]] = ((),),
        n: int = 2,
        logits: np.ndarray | None = None,
        max_len: int = 16,
    ):
        if n < 1:
            raise ValueError("context order n must be >= 1")
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        self.vocab = vocab
        self.n = int(n)
        self.max_len = int(max_len)
        self.contexts = tuple(tuple(int(t) for t in c) for c in contexts)
        self._ctx_index = {c: i for i, c in enumerate(self.contexts)}
        if len(self._ctx_index) != len(self.contexts):
            raise ValueError("duplicate contexts")
        self._base = vocab.size + 1
        self._per_ctx = self._base ** (self.n - 1)
        shape = (len(self.contexts) * self._per_ctx, vocab.size)
        if logits is None:
            logits = np.zeros(shape)
        logits = np.array(logits, dtype=np.float64)
        if logits.shape != shape:
            raise ValueError(f"logits shape {logits.shape} != {shape}")
        self.logits = logits

    # ------------------------------------------------------------------
    # state indexing

    @property
    def n_states(self) -> int:
        return self.logits.shape[0]

    @property
    def n_params(self) -> int:
        return self.logits.size

    def context_index(self, x: Seq[int]) -> int:
        try:
            return self._ctx_index[tuple(x)]
        except KeyError:
            raise ValueError(f"context {tuple(x)} is not registered with this policy") from None

    def _initial_code(self) -> int:
        code = 0
        for _ in range(self.n - 1):
            code = code * self._base + self.vocab.bos
        return code

    def _advance(self, code, token):
        if self.n == 1:
            return code * 0
        return (code * self._base + token) % self._per_ctx

    def states_for(self, x: Seq[int], y: Seq[int]) -> np.ndarray:
        """Context state of every position of ``y``."""
        ctx = self.context_index(x)
        code = self._initial_code()
        out = np.empty(len(y), dtype=np.int64)
        for t, tok in enumerate(y):
            out[t] = ctx * self._per_ctx + code
            code = self._advance(code, tok)
        return out

    def validate(self, seq: Sequence) -> None:
        V = self.vocab.size
        if len(seq.y) < 1:
            raise ValueError("output must contain at least one token")
        if len(seq.y) > self.max_len:
            raise ValueError(f"output longer than max_len={self.max_len}")
        for t in seq.y:
            if not 0 <= t < V:
                raise ValueError(f"invalid token id {t}")
        self.context_index(seq.x)

    def encode(self, seqs: Seq[Sequence]) -> TokenBatch:
        states, tokens, seq_ids, lengths = [], [], [], []
        for i, s in enumerate(seqs):
            self.validate(s)
            states.append(self.states_for(s.x, s.y))
            tokens.append(np.asarray(s.y, dtype=np.int64))
            seq_ids.append(np.full(len(s.y), i, dtype=np.int64))
            lengths.append(len(s.y))
        if not seqs:
            empty = np.zeros(0, dtype=np.int64)
            return TokenBatch(empty, empty, empty, empty)
        return TokenBatch(
            np.concatenate(states),
            np.concatenate(tokens),
            np.concatenate(seq_ids),
            np.asarray(lengths, dtype=np.int64),
        )

    # ------------------------------------------------------------------
    # probabilities

    def log_probs_table(self) -> np.ndarray:
        return log_softmax(self.logits)

    def token_logps(self, batch: TokenBatch) -> np.ndarray:
        rows = self.logits[batch.states]
        return log_softmax(rows)[np.arange(batch.n_tokens), batch.tokens]

    def grad_from_token_weights(
        self, batch: TokenBatch, weights: np.ndarray, mask: np.ndarray | None = None
    ) -> GradTape:
        """Gradient of ``sum_t w_t log pi(y_t | state_t)`` w.r.t. the logits.

        ``mask[t]`` true means the token is detached and contributes nothing.
        """
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (batch.n_tokens,):
            raise ValueError("weights must have one entry per token")
        w = weights
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != w.shape:
                raise ValueError("mask must have one entry per token")
            w = np.where(mask, 0.0, w)
        grad = np.zeros_like(self.logits)
        live = w != 0.0
        if np.any(live):
            states = batch.states[live]
            probs = softmax(self.logits[states])
            g = -w[live, None] * probs
            g[np.arange(len(states)), batch.tokens[live]] += w[live]
            np.add.at(grad, states, g)
        return GradTape(grad, mask)

    # ------------------------------------------------------------------
    # copying / persistence

    def clone(self) -> "Policy":
        return Policy(self.vocab, self.contexts, self.n, self.logits.copy(), self.max_len)

    def same_architecture(self, other: "Policy") -> bool:
        return (
            self.vocab == other.vocab
            and self.n == other.n
            and self.contexts == other.contexts
            and self.logits.shape == other.logits.shape
        )

    def to_dict(self) -> dict:
        return {
            "magic": MAGIC,
            "n": self.n,
            "max_len": self.max_len,
            "vocab": {"size": self.vocab.size, "eos": self.vocab.eos,
                      "names": list(self.vocab.names) if self.vocab.names else None},
            "contexts": [list(c) for c in self.contexts],
            "shape": list(self.logits.shape),
            "logits": self.logits.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        if d.get("magic") != MAGIC:
            raise ValueError(f"not a policy checkpoint (magic {d.get('magic')!r})")
        v = d["vocab"]
        vocab = Vocabulary(v["size"], v["eos"], tuple(v["names"]) if v.get("names") else None)
        logits = np.asarray(d["logits"], dtype=np.float64).reshape(d["shape"])
        return cls(vocab, d["contexts"], d["n"], logits, d.get("max_len", 16))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Policy":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------------
# functional surface


def log_prob(policy: Policy, seq: Sequence) -> np.ndarray:
    """Per-token log-probabilities of ``seq.y`` given ``seq.x`` (nats)."""
    return policy.token_logps(policy.encode([seq]))


def logprob_grad(policy: Policy, seq: Sequence, weights, mask=None) -> GradTape:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(seq.y),):
        raise ValueError(f"expected {len(seq.y)} weights, got {weights.shape}")
    if mask is not None and np.shape(mask) != (len(seq.y),):
        raise ValueError("mask length must equal output length")
    return policy.grad_from_token_weights(policy.encode([seq]), weights, mask)


def clone_policy(policy: Policy) -> Policy:
    return policy.clone()


def load_params(dst: Policy, src: Policy) -> None:
    """Copy ``src`` logits into ``dst`` in place."""
    if not dst.same_architecture(src):
        raise ValueError("policy shapes do not match")
    np.copyto(dst.logits, src.logits)


def nucleus_probs(logits: np.ndarray, temperature: float, top_p: float) -> np.ndarray:
    """Row-wise temperature + top-p renormalised distributions."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")
    probs = softmax(np.atleast_2d(logits) / temperature)
    if top_p < 1.0:
        order = np.argsort(-probs, axis=-1, kind="stable")
        sorted_p = np.take_along_axis(probs, order, axis=-1)
        before = np.cumsum(sorted_p, axis=-1) - sorted_p
        keep_sorted = before < top_p - 1e-12
        keep = np.zeros_like(keep_sorted)
        np.put_along_axis(keep, order, keep_sorted, axis=-1)
        probs = np.where(keep, probs, 0.0)
        probs /= probs.sum(axis=-1, keepdims=True)
    return probs


def sample_batch(
    policy: Policy,
    contexts: Seq[Seq[int]],
    rng: np.random.Generator,
    temperature: float = 1.0,
    top_p: float = 1.0,
    max_len: int | None = None,
) -> list[Sequence]:
    """Sample one output per context, all contexts advancing in lockstep."""
    L = policy.max_len if max_len is None else int(max_len)
    N = len(contexts)
    if N == 0:
        return []
    eos = policy.vocab.eos
    ctx = np.array([policy.context_index(x) for x in contexts], dtype=np.int64)
    code = np.full(N, policy._initial_code(), dtype=np.int64)
    out = np.full((N, L), -1, dtype=np.int64)
    alive = np.ones(N, dtype=bool)
    for t in range(L):
        idx = np.nonzero(alive)[0]
        if len(idx) == 0:
            break
        states = ctx[idx] * policy._per_ctx + code[idx]
        probs = nucleus_probs(policy.logits[states], temperature, top_p)
        u = rng.random(len(idx))
        cdf = np.cumsum(probs, axis=-1)
        tok = (u[:, None] >= cdf).sum(axis=-1)
        tok = np.minimum(tok, policy.vocab.size - 1)
        # guard against a round-off pick of a zero-probability tail token
        bad = probs[np.arange(len(idx)), tok] == 0.0
        if np.any(bad):
            tok[bad] = np.argmax(probs[bad], axis=-1)
        if t == L - 1:
            tok[:] = eos
        out[idx, t] = tok
        code[idx] = policy._advance(code[idx], tok)
        alive[idx[tok == eos]] = False
    seqs = []
    for i, x in enumerate(contexts):
        row = out[i]
        y = row[row >= 0]
        seqs.append(Sequence(tuple(x), tuple(int(t) for t in y)))
    return seqs


def sample(
    policy: Policy,
    x: Seq[int],
    temperature: float,
    top_p: float,
    rng: np.random.Generator,
) -> Sequence:
    return sample_batch(policy, [x], rng, temperature, top_p)[0]


def random_policy(
    vocab: Vocabulary,
    contexts: Seq[Seq[int]] = ((),),
    n: int = 2,
    scale: float = 1.0,
    rng: np.random.Generator | None = None,
    max_len: int = 16,
) -> Policy:
    rng = np.random.default_rng(0) if rng is None else rng
    p = Policy(vocab, contexts, n, max_len=max_len)
    p.logits[:] = scale * rng.standard_normal(p.logits.shape)
    return p
