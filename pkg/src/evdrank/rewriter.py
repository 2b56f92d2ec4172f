"""Description-aware query rewriter.

A rewrite is a sequence of per-entity actions.  For every entity linked in
the query (left to right) the policy picks either SKIP or a concrete
``(sense, description index, template)`` that splices one knowledge-base
description into the query.  The policy is log-linear and autoregressive:

    pi(a_t | a_<t, x) = softmax_c( theta . phi(x, t, c, a_<t) )[a_t]

with ``phi`` a hashed sparse feature map over query tokens, the choice, the
description words and a summary of the previous actions.  All losses below
(SFT negative log-likelihood, Bradley-Terry, listwise PRO and their weighted
sum) come with exact gradients in ``theta``.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from ._hashing import stable_hash64, tokenize
from .errors import CheckpointError, DegenerateRanking, IllegalAction, IoFailure
from .kb import EntityMatch, EvdEntry, EvdKnowledgeBase, atomic_write

TEMPLATES = ("appositive", "relative", "parenthetical")
REWRITER_FORMAT = "evdrank-rewriter"
REWRITER_SCHEMA_VERSION = 1
TIE_EPS = 1e-9

_LEADING_VERBS = ("may have ", "is made of ", "has ", "have ", "is ", "are ", "features ", "contains ", "with ")


# --------------------------------------------------------------------------
# actions and rendering


@dataclass(frozen=True)
class RewriteAction:
    """One slot decision.  ``desc_index is None`` means SKIP."""

    slot: int
    span: tuple[int, int]
    entity: str
    desc_index: int | None = None
    template: str | None = None
    sense_tag: str | None = None
    description: str | None = None

    @property
    def is_skip(self) -> bool:
        return self.desc_index is None

    @property
    def choice(self) -> tuple | None:
        if self.is_skip:
            return None
        return (self.sense_tag, self.desc_index, self.template)

    def to_record(self) -> dict:
        if self.is_skip:
            return {"slot": self.slot, "skip": True}
        return {"slot": self.slot, "skip": False, "desc_index": self.desc_index,
                "template": self.template, "sense_tag": self.sense_tag}


@dataclass(frozen=True)
class RewriteCandidate:
    actions: tuple[RewriteAction, ...]
    text: str
    score: float | None = None
    logprob: float | None = None

    @property
    def is_identity(self) -> bool:
        return all(a.is_skip for a in self.actions)

    def with_score(self, score: float) -> "RewriteCandidate":
        return RewriteCandidate(self.actions, self.text, score, self.logprob)


def skip_action(slot: int, match: EntityMatch) -> RewriteAction:
    return RewriteAction(slot, match.span, match.entity)


def space_from_matches(matched: Sequence[tuple[EntityMatch, Sequence[EvdEntry]]], H: int,
                       templates: Sequence[str] = TEMPLATES) -> list[list[RewriteAction]]:
    """Legal choices per slot; index 0 of every slot is SKIP.

    Concrete choices are ordered by sense (as given), then description index,
    then template.
    """
    slots = []
    for t, (match, entries) in enumerate(matched):
        choices = [skip_action(t, match)]
        for entry in entries:
            for d, desc in enumerate(entry.descriptions[:H]):
                for tmpl in templates:
                    choices.append(RewriteAction(t, match.span, match.entity, d, tmpl,
                                                 entry.sense.sense_tag, desc))
        slots.append(choices)
    return slots


def matched_entries(query: str, kb: EvdKnowledgeBase) -> list[tuple[EntityMatch, list[EvdEntry]]]:
    return [(m, kb.senses_of(m.entity)) for m in kb.link_entities(query)]


def action_space(query: str, kb: EvdKnowledgeBase, H: int | None = None,
                 templates: Sequence[str] = TEMPLATES) -> list[list[RewriteAction]]:
    """Per linked entity: SKIP plus every (sense, description, template) choice."""
    return space_from_matches(matched_entries(query, kb), kb.h_max if H is None else H, templates)


def noun_phrase(description: str) -> str:
    d = description.strip()
    low = d.lower()
    for verb in _LEADING_VERBS:
        if low.startswith(verb) and len(d) > len(verb):
            return d[len(verb):].strip()
    return d


def _apply_template(surface: str, description: str, template: str) -> str:
    if template == "appositive":
        return f"{surface}, which {description},"
    if template == "relative":
        return f"{surface} with {noun_phrase(description)}"
    if template == "parenthetical":
        return f"{surface} ({description})"
    raise IllegalAction(f"unknown template {template!r}")


def render_rewrite(query: str, actions: Sequence[RewriteAction]) -> str:
    """Splice each non-SKIP action's description into the query at its span."""
    spans = sorted((a.span, a) for a in actions)
    last_end = -1
    for (start, end), a in spans:
        if not (0 <= start < end <= len(query)) or start < last_end:
            raise IllegalAction(f"action span {a.span} invalid for query of length {len(query)}")
        if not a.is_skip and (a.description is None or a.template is None):
            raise IllegalAction("non-SKIP action without description or template")
        last_end = end
    out = query
    for (start, end), a in reversed(spans):
        if a.is_skip:
            continue
        out = out[:start] + _apply_template(query[start:end], a.description, a.template) + out[end:]
    return out


def identity_candidate(query: str, kb: EvdKnowledgeBase) -> RewriteCandidate:
    actions = tuple(skip_action(t, m) for t, m in enumerate(kb.link_entities(query)))
    return RewriteCandidate(actions, query)


def candidate_from_records(query: str, kb: EvdKnowledgeBase, records: Sequence[dict],
                           H: int | None = None, templates: Sequence[str] = TEMPLATES) -> RewriteCandidate:
    """Re-resolve serialized actions against the KB."""
    space = action_space(query, kb, H, templates)
    if len(records) != len(space):
        raise IllegalAction(f"{len(records)} actions for {len(space)} slots")
    actions = []
    for t, rec in enumerate(records):
        if rec.get("skip"):
            actions.append(space[t][0])
            continue
        want = (rec.get("sense_tag"), rec.get("desc_index"), rec.get("template"))
        for a in space[t][1:]:
            if a.choice == want:
                actions.append(a)
                break
        else:
            raise IllegalAction(f"slot {t}: choice {want} is not legal")
    return RewriteCandidate(tuple(actions), render_rewrite(query, actions))


# --------------------------------------------------------------------------
# policy


@dataclass(frozen=True, eq=False)
class RewritePolicy:
    theta: np.ndarray
    feature_seed: int = 0
    H: int = 5
    templates: tuple[str, ...] = TEMPLATES

    def __post_init__(self):
        th = np.array(self.theta, dtype=np.float64).ravel()
        if not np.all(np.isfinite(th)):
            raise ValueError("non-finite policy weights")
        th.flags.writeable = False
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "templates", tuple(self.templates))

    @classmethod
    def zeros(cls, feature_dim: int = 1 << 14, feature_seed: int = 0, H: int = 5,
              templates: Sequence[str] = TEMPLATES) -> "RewritePolicy":
        return cls(np.zeros(feature_dim), feature_seed, H, tuple(templates))

    @property
    def feature_dim(self) -> int:
        return self.theta.shape[0]

    def with_theta(self, theta: np.ndarray) -> "RewritePolicy":
        return RewritePolicy(theta, self.feature_seed, self.H, self.templates)

    def __eq__(self, other):
        if not isinstance(other, RewritePolicy):
            return NotImplemented
        return (self.feature_seed == other.feature_seed and self.H == other.H
                and self.templates == other.templates and np.array_equal(self.theta, other.theta))

    __hash__ = None


def _choice_kind(a: RewriteAction) -> str:
    return "skip" if a.is_skip else a.template


def _static_features(query_tokens: Sequence[str], a: RewriteAction) -> list[tuple[str, float]]:
    nq = max(1, len(query_tokens))
    qv = 1.0 / math.sqrt(nq)
    if a.is_skip:
        feats = [("kind=skip", 1.0), (f"e={a.entity}|skip", 1.0)]
        feats += [(f"q={w}|skip", qv) for w in query_tokens]
        return feats
    cid = f"{a.sense_tag or '-'}:{a.desc_index}:{a.template}"
    dtoks = sorted(set(tokenize(a.description)))
    dv = 1.0 / math.sqrt(max(1, len(dtoks)))
    feats = [
        (f"kind={a.template}", 1.0),
        (f"didx={a.desc_index}", 1.0),
        (f"sense={'tagged' if a.sense_tag else 'untagged'}", 1.0),
        (f"e={a.entity}|c={cid}", 1.0),
    ]
    feats += [(f"dw={w}", dv) for w in dtoks]
    feats += [(f"dw={w}|kind={a.template}", dv) for w in dtoks]
    feats += [(f"q={w}|c={cid}", qv) for w in query_tokens]
    return feats


def _prev_summary(prev: Sequence[RewriteAction]) -> str:
    n_active = min(2, sum(1 for a in prev if not a.is_skip))
    last = _choice_kind(prev[-1]) if prev else "start"
    return f"prev={n_active}|last={last}"


@dataclass
class _Slot:
    choices: list[RewriteAction]
    index: dict  # choice key -> choice id
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    kinds: list[str]


@dataclass
class PreparedQuery:
    """Feature tables for one query, reusable across policy evaluations."""

    query: str
    slots: list[_Slot] = field(default_factory=list)
    feature_dim: int = 0
    feature_seed: int = 0

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    def choice_ids(self, actions: Sequence[RewriteAction]) -> list[int]:
        if len(actions) != len(self.slots):
            raise IllegalAction(f"{len(actions)} actions for {len(self.slots)} slots")
        ids = []
        for t, (a, slot) in enumerate(zip(actions, self.slots)):
            cid = slot.index.get(a.choice)
            if cid is None or slot.choices[cid].span != a.span or slot.choices[cid].description != a.description:
                raise IllegalAction(f"slot {t}: action {a.choice} is not in the action space")
            ids.append(cid)
        return ids

    def dynamic_indices(self, slot: _Slot, prev: Sequence[RewriteAction]) -> np.ndarray:
        summary = _prev_summary(prev)
        return np.array([stable_hash64(f"{summary}|kind={k}", self.feature_seed) % self.feature_dim
                         for k in slot.kinds], dtype=np.int64)


def prepare(policy: RewritePolicy, query: str, kb: EvdKnowledgeBase) -> PreparedQuery:
    qtoks = sorted(set(tokenize(query)))
    prepared = PreparedQuery(query, [], policy.feature_dim, policy.feature_seed)
    for choices in action_space(query, kb, policy.H, policy.templates):
        indptr = [0]
        indices: list[int] = []
        values: list[float] = []
        for a in choices:
            merged: dict[int, float] = {}
            for name, v in _static_features(qtoks, a):
                j = stable_hash64(name, policy.feature_seed) % policy.feature_dim
                merged[j] = merged.get(j, 0.0) + v
            for j in sorted(merged):
                indices.append(j)
                values.append(merged[j])
            indptr.append(len(indices))
        prepared.slots.append(_Slot(
            choices,
            {a.choice: c for c, a in enumerate(choices)},
            np.asarray(indptr, dtype=np.int64),
            np.asarray(indices, dtype=np.int64),
            np.asarray(values, dtype=np.float64),
            [_choice_kind(a) for a in choices],
        ))
    return prepared


def _slot_logits(theta: np.ndarray, slot: _Slot, dyn: np.ndarray) -> np.ndarray:
    return _kernels.csr_matvec(slot.indptr, slot.indices, slot.values, theta) + theta[dyn]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - (m + math.log(np.exp(z - m).sum()))


def sequence_logprob(theta: np.ndarray, prepared: PreparedQuery, ids: Sequence[int],
                     grad_out: np.ndarray | None = None, weight: float = 1.0) -> float:
    """Log-probability of a choice-id sequence.

    When ``grad_out`` is given, ``weight * d logprob / d theta`` is added to it.
    """
    total = 0.0
    prev: list[RewriteAction] = []
    for slot, cid in zip(prepared.slots, ids):
        dyn = prepared.dynamic_indices(slot, prev)
        logp = _log_softmax(_slot_logits(theta, slot, dyn))
        total += logp[cid]
        if grad_out is not None and weight != 0.0:
            coeff = -np.exp(logp)
            coeff[cid] += 1.0
            coeff *= weight
            _kernels.csr_scatter(grad_out, slot.indptr, slot.indices, slot.values, coeff)
            np.add.at(grad_out, dyn, coeff)
        prev.append(slot.choices[cid])
    return float(total)


def policy_logprob(policy: RewritePolicy, query: str, kb: EvdKnowledgeBase,
                   actions: Sequence[RewriteAction]) -> tuple[float, np.ndarray]:
    prepared = prepare(policy, query, kb)
    ids = prepared.choice_ids(actions)
    grad = np.zeros(policy.feature_dim)
    lp = sequence_logprob(policy.theta, prepared, ids, grad)
    return lp, grad


def slot_distributions(policy: RewritePolicy, prepared: PreparedQuery,
                       actions: Sequence[RewriteAction]) -> list[np.ndarray]:
    """Per-slot choice probabilities under teacher forcing on ``actions``."""
    out = []
    prev: list[RewriteAction] = []
    for slot, a in zip(prepared.slots, actions):
        dyn = prepared.dynamic_indices(slot, prev)
        out.append(np.exp(_log_softmax(_slot_logits(policy.theta, slot, dyn))))
        prev.append(a)
    return out


def _decode(policy: RewritePolicy, prepared: PreparedQuery, pick) -> RewriteCandidate:
    prev: list[RewriteAction] = []
    total = 0.0
    for slot in prepared.slots:
        dyn = prepared.dynamic_indices(slot, prev)
        logits = _slot_logits(policy.theta, slot, dyn)
        cid = pick(logits)
        total += _log_softmax(logits)[cid]
        prev.append(slot.choices[cid])
    return RewriteCandidate(tuple(prev), render_rewrite(prepared.query, prev), logprob=float(total))


def decode_greedy(policy: RewritePolicy, query: str, kb: EvdKnowledgeBase,
                  prepared: PreparedQuery | None = None) -> RewriteCandidate:
    prepared = prepared or prepare(policy, query, kb)
    # np.argmax returns the first maximum, i.e. the smallest choice id on ties
    return _decode(policy, prepared, lambda z: int(np.argmax(z)))


def decode_sample(policy: RewritePolicy, query: str, kb: EvdKnowledgeBase, seed: int,
                  temperature: float = 1.0, prepared: PreparedQuery | None = None) -> RewriteCandidate:
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature == 0:
        return decode_greedy(policy, query, kb, prepared)
    prepared = prepared or prepare(policy, query, kb)
    rng = np.random.default_rng(seed)

    def pick(z):
        p = np.exp(_log_softmax(z / temperature))
        return int(rng.choice(len(p), p=p / p.sum()))

    return _decode(policy, prepared, pick)


# --------------------------------------------------------------------------
# losses


@dataclass
class Example:
    """A query with one labelled action sequence, prepared for fast evaluation."""

    prepared: PreparedQuery
    ids: list[int]

    @classmethod
    def build(cls, policy: RewritePolicy, kb: EvdKnowledgeBase, query: str,
              actions: Sequence[RewriteAction]) -> "Example":
        prepared = prepare(policy, query, kb)
        return cls(prepared, prepared.choice_ids(actions))


def _sft_examples(policy, kb, dataset) -> list[Example]:
    return [d if isinstance(d, Example) else Example.build(policy, kb, d[0], d[1]) for d in dataset]


def sft_loss(policy: RewritePolicy, kb: EvdKnowledgeBase,
             dataset: Sequence[tuple[str, Sequence[RewriteAction]] | Example]) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the labelled rewrites."""
    examples = _sft_examples(policy, kb, dataset)
    grad = np.zeros(policy.feature_dim)
    if not examples:
        return 0.0, grad
    w = 1.0 / len(examples)
    total = 0.0
    for ex in examples:
        total -= sequence_logprob(policy.theta, ex.prepared, ex.ids, grad, -w)
    return total * w, grad


def bt_probability(r1: float, r2: float) -> float:
    """exp(r1) / (exp(r1) + exp(r2)) without overflow."""
    d = float(r1) - float(r2)
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


@dataclass(frozen=True)
class PreferenceList:
    x: str
    candidates: tuple[RewriteCandidate, ...]
    rewards: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        if not self.candidates or len(self.candidates) != len(self.rewards):
            raise ValueError("a preference list needs k >= 1 candidates with one reward each")

    @property
    def k(self) -> int:
        return len(self.candidates)

    @classmethod
    def build(cls, x: str, candidates: Sequence[RewriteCandidate],
              rewards: Sequence[float] | None = None) -> "PreferenceList":
        """Sort by reward (descending, stable) and collapse near-ties.

        A candidate whose reward is within ``TIE_EPS`` of the last kept one is
        dropped, keeping the higher-ranked candidate.
        """
        if rewards is None:
            rewards = [c.score for c in candidates]
        order = sorted(range(len(candidates)), key=lambda i: -rewards[i])
        kept_c, kept_r = [], []
        for i in order:
            if kept_r and kept_r[-1] - rewards[i] < TIE_EPS:
                continue
            kept_c.append(candidates[i])
            kept_r.append(float(rewards[i]))
        return cls(x, tuple(kept_c), tuple(kept_r))


def normalize_rewards(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    span = r.max() - r.min() if r.size else 0.0
    if span <= 0:
        return np.zeros_like(r)
    return (r - r.min()) / span


def inverse_temperatures(rewards: Sequence[float], normalize: bool = True) -> np.ndarray:
    """Matrix ``s`` with ``s[j, i] = 1 / T_j^i`` for ``i >= j``.

    ``T_j^i = 1 / (r_j - r_i)`` for ``i > j`` and ``T_j^j = min_{i>j} T_j^i``,
    so ``s[j, j] = max_{i>j} (r_j - r_i)``.  Entries below the diagonal and the
    last row are unused and left at zero.
    """
    r = normalize_rewards(rewards) if normalize else np.asarray(rewards, dtype=np.float64)
    k = r.size
    diffs = r[:-1, None] - r[None, :] if k > 1 else np.zeros((0, k))
    if k > 1 and not np.all(np.diff(r) < 0):
        raise DegenerateRanking("rewards must be strictly decreasing after tie handling")
    s = np.zeros((k, k))
    for j in range(k - 1):
        s[j, j + 1:] = diffs[j, j + 1:]
        s[j, j] = diffs[j, j + 1:].max()
    return s


def pro_from_scores(pi: np.ndarray, s: np.ndarray) -> tuple[float, np.ndarray]:
    """Listwise loss and its gradient w.r.t. the (normalized) logprobs ``pi``."""
    k = pi.size
    loss = 0.0
    dpi = np.zeros(k)
    for j in range(k - 1):
        z = pi[j:] * s[j, j:]
        m = z.max()
        e = np.exp(z - m)
        lse = m + math.log(e.sum())
        loss += lse - z[0]
        soft = e / e.sum()
        dpi[j:] += soft * s[j, j:]
        dpi[j] -= s[j, j]
    return float(loss), dpi


@dataclass
class PreparedPreference:
    prepared: PreparedQuery
    ids: list[list[int]]
    rewards: tuple[float, ...]

    @classmethod
    def build(cls, policy: RewritePolicy, kb: EvdKnowledgeBase, pref: PreferenceList) -> "PreparedPreference":
        prepared = prepare(policy, pref.x, kb)
        return cls(prepared, [prepared.choice_ids(c.actions) for c in pref.candidates], pref.rewards)


def _pro_prepared(theta: np.ndarray, pp: PreparedPreference, grad_out: np.ndarray, weight: float,
                  normalize: bool = True, reward_source: str = "score") -> float:
    k = len(pp.ids)
    if k < 2:
        return 0.0
    length = max(1, pp.prepared.n_slots)
    pi = np.array([sequence_logprob(theta, pp.prepared, ids) for ids in pp.ids]) / length
    rewards = pi.copy() if reward_source == "logprob" else pp.rewards
    s = inverse_temperatures(rewards, normalize)
    loss, dpi = pro_from_scores(pi, s)
    if grad_out is not None and weight != 0.0:
        for ids, g in zip(pp.ids, dpi):
            if g != 0.0:
                sequence_logprob(theta, pp.prepared, ids, grad_out, weight * g / length)
    return loss


def pro_loss(policy: RewritePolicy, kb: EvdKnowledgeBase, pref: PreferenceList | PreparedPreference,
             normalize: bool = True, reward_source: str = "score") -> tuple[float, np.ndarray]:
    """Listwise preference-rank loss of one candidate list.

    ``pi_i`` is each candidate's logprob divided by the number of slots.
    Rewards are constants: the gradient flows only through ``pi``.
    """
    pp = pref if isinstance(pref, PreparedPreference) else PreparedPreference.build(policy, kb, pref)
    grad = np.zeros(policy.feature_dim)
    loss = _pro_prepared(policy.theta, pp, grad, 1.0, normalize, reward_source)
    return loss, grad


def align_loss(policy: RewritePolicy, kb: EvdKnowledgeBase,
               pref_dataset: Sequence[PreferenceList | PreparedPreference],
               sft_dataset: Sequence[tuple[str, Sequence[RewriteAction]] | Example],
               beta: float, normalize: bool = True, reward_source: str = "score") -> tuple[float, np.ndarray]:
    """Mean PRO loss plus ``beta`` times mean SFT loss."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    grad = np.zeros(policy.feature_dim)
    loss = 0.0
    if pref_dataset:
        w = 1.0 / len(pref_dataset)
        for pref in pref_dataset:
            pp = pref if isinstance(pref, PreparedPreference) else PreparedPreference.build(policy, kb, pref)
            loss += w * _pro_prepared(policy.theta, pp, grad, w, normalize, reward_source)
    if beta > 0 and sft_dataset:
        l_sft, g_sft = sft_loss(policy, kb, sft_dataset)
        loss += beta * l_sft
        grad += beta * g_sft
    return float(loss), grad


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class RewriterTrainConfig:
    warmup_lr: float = 0.5
    warmup_epochs: int = 20
    warmup_batch_size: int = 8
    align_lr: float = 0.5
    align_epochs: int = 5
    align_batch_size: int = 16
    beta: float = 0.2
    normalize_rewards: bool = True
    reward_source: str = "score"
    seed: int = 0


def _sgd(policy: RewritePolicy, n: int, batch_size: int, epochs: int, lr: float, seed: int, batch_grad):
    rng = np.random.default_rng(seed)
    theta = policy.theta.copy()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = np.sort(order[start:start + batch_size])
            _, g = batch_grad(theta, idx)
            theta -= lr * g
    return policy.with_theta(theta)


def train_rewriter(policy: RewritePolicy, kb: EvdKnowledgeBase, records: Sequence, phase: str,
                   config: RewriterTrainConfig = RewriterTrainConfig()) -> RewritePolicy:
    """Warm up on best labels (``phase="warmup"``) or align on ranked lists (``"align"``).

    ``records`` are rewrite-dataset records: objects with ``x`` and
    ``candidates`` (scored, best first).
    """
    if not records:
        raise ValueError("the rewriting dataset is empty")
    if phase == "warmup":
        examples = [Example.build(policy, kb, r.x, r.candidates[0].actions) for r in records if r.candidates]
        if not examples:
            raise ValueError("no record carries a label")

        def batch_grad(theta, idx):
            return _sft_value(theta, [examples[i] for i in idx], policy.feature_dim)

        return _sgd(policy, len(examples), config.warmup_batch_size, config.warmup_epochs,
                    config.warmup_lr, config.seed, batch_grad)

    if phase != "align":
        raise ValueError(f"unknown phase {phase!r}")
    prefs, sfts = [], []
    for r in records:
        pref = PreferenceList.build(r.x, r.candidates)
        if pref.k < 2:
            continue
        pp = PreparedPreference.build(policy, kb, pref)
        prefs.append(pp)
        sfts.append(Example(pp.prepared, pp.ids[0]))
    if not prefs:
        warnings.warn("alignment skipped every record: no list keeps two distinct rewards", RuntimeWarning,
                      stacklevel=2)
        return policy

    def batch_grad(theta, idx):
        grad = np.zeros(policy.feature_dim)
        w = 1.0 / len(idx)
        loss = 0.0
        for i in idx:
            loss += w * _pro_prepared(theta, prefs[i], grad, w, config.normalize_rewards, config.reward_source)
        l_sft, g_sft = _sft_value(theta, [sfts[i] for i in idx], policy.feature_dim)
        return loss + config.beta * l_sft, grad + config.beta * g_sft

    return _sgd(policy, len(prefs), config.align_batch_size, config.align_epochs,
                config.align_lr, config.seed, batch_grad)


def _sft_value(theta: np.ndarray, examples: Sequence[Example], dim: int) -> tuple[float, np.ndarray]:
    grad = np.zeros(dim)
    w = 1.0 / len(examples)
    total = 0.0
    for ex in examples:
        total -= sequence_logprob(theta, ex.prepared, ex.ids, grad, -w)
    return total * w, grad


# --------------------------------------------------------------------------
# checkpoints


def dumps_policy(policy: RewritePolicy) -> bytes:
    header = {
        "format": REWRITER_FORMAT,
        "schema_version": REWRITER_SCHEMA_VERSION,
        "feature_dim": policy.feature_dim,
        "feature_seed": policy.feature_seed,
        "H": policy.H,
        "templates": list(policy.templates),
    }
    return json.dumps(header).encode("utf-8") + b"\n" + policy.theta.astype("<f8").tobytes()


def loads_policy(blob: bytes) -> RewritePolicy:
    head, sep, body = blob.partition(b"\n")
    if not sep:
        raise CheckpointError("missing checkpoint header")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    if header.get("format") != REWRITER_FORMAT or header.get("schema_version") != REWRITER_SCHEMA_VERSION:
        raise CheckpointError("not an evdrank-rewriter checkpoint")
    dim = int(header["feature_dim"])
    if len(body) != dim * 8:
        raise CheckpointError(f"expected {dim * 8} payload bytes, found {len(body)}")
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return RewritePolicy(theta, int(header["feature_seed"]), int(header["H"]), tuple(header["templates"]))


def save_policy(policy: RewritePolicy, path: str | os.PathLike) -> None:
    atomic_write(path, dumps_policy(policy))


def load_policy(path: str | os.PathLike) -> RewritePolicy:
    try:
        return loads_policy(Path(path).read_bytes())
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
