"""Boundary to large language models.

All model traffic goes through a backend's ``complete(request) -> str``.
Two backends ship:

* :class:`MockBackend` answers every prompt deterministically from a bundled
  visual-noun lexicon.  Its output is a pure function of the request, so
  the whole pipeline runs offline and reproducibly.
* :class:`RemoteBackend` posts chat-completions style requests to an HTTP
  endpoint.

:class:`CachedBackend` wraps either one with an on-disk response cache.
The high-level operations render a prompt, call the backend and parse the
line-oriented answer, raising :class:`MalformedResponse` on contract
violations.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._hashing import seed_from
from .errors import BackendUnavailable, IoFailure, MalformedResponse, TemplateError
from .kb import EntityMatch, EntitySense, EvdEntry, PhraseMatcher, atomic_write
from .rewriter import TEMPLATES, RewriteCandidate, render_rewrite, space_from_matches

log = logging.getLogger(__name__)

TOKEN_ENV = "EVDRANK_LLM_TOKEN"


# --------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    demonstrations: tuple[str, ...]

    def __post_init__(self):
        if not 1 <= len(self.demonstrations) <= 3:
            raise TemplateError(f"{self.name}: 1-3 demonstrations required")

    @property
    def placeholders(self) -> set[str]:
        return {f for _, f, _, _ in string.Formatter().parse(self.body) if f}

    def render(self, bindings: Mapping[str, str]) -> list[dict]:
        missing = self.placeholders - set(bindings)
        if missing:
            raise TemplateError(f"{self.name}: unbound placeholders {sorted(missing)}")
        demos = "\n\n".join(self.demonstrations)
        return [
            {"role": "system", "content": "You are a careful assistant for image-text retrieval."},
            {"role": "user", "content": f"{self.body.format(**bindings)}\n\nExamples:\n{demos}"},
        ]


TEMPLATES_BY_NAME: dict[str, PromptTemplate] = {t.name: t for t in (
    PromptTemplate(
        "extract_entities",
        "Extract the visual entities from the caption below. Visual entities are concrete things whose "
        "appearance can be described (objects, animals, buildings). Skip places, names, actions and abstract "
        "terms that have no distinctive look. Answer with one entity per line in lowercase, or 'none'.\n"
        "Caption: {caption}",
        ("Caption: a man rides a skateboard in front of a crowd\nAnswer:\nman\nskateboard\ncrowd",
         "Caption: a street in New York at night\nAnswer:\nnone"),
    ),
    PromptTemplate(
        "describe_entity",
        "List exactly {h} short visual descriptions of '{entity}'{sense_hint}. Focus on color, shape, parts and "
        "quantity. One description per line, each starting with a verb such as 'has'.",
        ("Entity: tent\nAnswer:\nhas canvas sides\nhas guy ropes\nhas a zippered flap",),
    ),
    PromptTemplate(
        "identify_ambiguous",
        "Does the word '{entity}' name visually different things depending on its meaning? Answer yes or no.",
        ("Word: bank\nAnswer: yes", "Word: tent\nAnswer: no"),
    ),
    PromptTemplate(
        "explain_senses",
        "List every meaning of '{entity}' that looks different in a photo. One per line as 'tag: explanation'.",
        ("Word: bank\nAnswer:\nfinancial institution: a business that keeps money\n"
         "riverbank: the sloping land beside a river",),
    ),
    PromptTemplate(
        "rewrite_query",
        "Rewrite the query by inserting visual descriptions of its entities.\nQuery: {query}\n"
        "Choices per entity:\n{catalog}\n"
        "Write {k} different rewrites. For each rewrite output one line holding one choice number per entity, "
        "in entity order, separated by spaces (0 leaves the entity unchanged).",
        ("Query: a tent near a lake\nChoices per entity:\nentity 1 'tent': 0 unchanged | 1 appositive: has canvas "
         "sides | 2 relative: has canvas sides\nAnswer:\n1\n2",),
    ),
)}


@dataclass(frozen=True)
class LlmRequest:
    template: str
    bindings: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.template not in TEMPLATES_BY_NAME:
            raise TemplateError(f"unknown template {self.template!r}")
        b = self.bindings.items() if isinstance(self.bindings, Mapping) else self.bindings
        object.__setattr__(self, "bindings", tuple(sorted((str(k), str(v)) for k, v in b)))
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        missing = TEMPLATES_BY_NAME[self.template].placeholders - set(self.binding_map)
        if missing:
            raise TemplateError(f"{self.template}: unbound placeholders {sorted(missing)}")

    @property
    def binding_map(self) -> dict[str, str]:
        return dict(self.bindings)

    def messages(self) -> list[dict]:
        return TEMPLATES_BY_NAME[self.template].render(self.binding_map)


def make_request(template: str, temperature: float = 0.0, seed: int = 0, **bindings) -> LlmRequest:
    return LlmRequest(template, tuple(bindings.items()), temperature, seed)


# --------------------------------------------------------------------------
# lexicon


@dataclass(frozen=True)
class Lexicon:
    entities: Mapping[str, dict]
    generic_attributes: tuple[str, ...]
    generic_facets: tuple[str, ...]
    non_visual_fillers: tuple[str, ...]

    @classmethod
    def from_dict(cls, d: Mapping) -> "Lexicon":
        return cls(d["entities"], tuple(d["generic_attributes"]), tuple(d["generic_facets"]),
                   tuple(d.get("non_visual_fillers", ())))

    def senses(self, entity: str) -> dict[str, dict]:
        return self.entities.get(entity, {}).get("senses", {})

    def descriptors(self, entity: str, sense_tag: str | None = None) -> list[str]:
        info = self.entities.get(entity, {})
        if sense_tag is not None:
            return list(info.get("senses", {}).get(sense_tag, {}).get("descriptors", []))
        return list(info.get("descriptors", []))

    def partner(self, entity: str) -> str | None:
        return self.entities.get(entity, {}).get("confusable_with")

    @property
    def matcher(self) -> PhraseMatcher:
        return _matcher_for(tuple(sorted(self.entities)))


@lru_cache(maxsize=8)
def _matcher_for(names: tuple[str, ...]) -> PhraseMatcher:
    return PhraseMatcher(names)


@lru_cache(maxsize=1)
def default_lexicon() -> Lexicon:
    text = resources.files("evdrank").joinpath("data/lexicon.json").read_text(encoding="utf-8")
    return Lexicon.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# backends


class MockBackend:
    """Deterministic offline stand-in for an LLM.

    * entity extraction: lexicon entities found in the caption (longest
      whole-word match, order of appearance);
    * descriptions: "has <descriptor>" fills for the entity's own
      descriptors plus a few hedged "may have <descriptor>" lines borrowed
      from a confusable entity, mimicking the over-diverse, partly
      inconsistent output of a real model;
    * ambiguity: the lexicon's sense table;
    * rewrites: distinct random choice sequences over the offered catalog.
    """

    kind = "mock"

    def __init__(self, lexicon: Lexicon | None = None, model_name: str = "mock-evd-1", noise_fraction: float = 0.4):
        self.lexicon = lexicon or default_lexicon()
        self.model_name = model_name
        self.noise_fraction = noise_fraction

    def complete(self, request: LlmRequest) -> str:
        b = request.binding_map
        handler = getattr(self, f"_do_{request.template}")
        return handler(b, request)

    def _rng(self, request: LlmRequest, *extra) -> np.random.Generator:
        return np.random.default_rng(seed_from(self.model_name, request.template, request.bindings,
                                               request.temperature, request.seed, *extra))

    def _do_extract_entities(self, b, request):
        found = []
        for phrase, _, _ in self.lexicon.matcher.find(b["caption"]):
            if phrase not in found:
                found.append(phrase)
        return "\n".join(found) if found else "none"

    def _do_describe_entity(self, b, request):
        h = int(b["h"])
        entity = b["entity"]
        tag = b.get("sense_tag") or None
        rng = self._rng(request)
        own = self.lexicon.descriptors(entity, tag)
        n_noise = int(np.floor(self.noise_fraction * h)) if own else 0
        n_own = h - n_noise
        lines = [f"has {d}" for d in _pick(rng, own, min(n_own, len(own)))]
        if n_noise:
            partner = self.lexicon.partner(entity)
            if partner is None:
                pool = sorted(e for e in self.lexicon.entities if e != entity and self.lexicon.descriptors(e))
                partner = pool[int(rng.integers(len(pool)))] if pool else None
            borrowed = self.lexicon.descriptors(partner) if partner else []
            lines += [f"may have {d}" for d in _pick(rng, borrowed, min(n_noise, len(borrowed)))]
        attrs, facets = self.lexicon.generic_attributes, self.lexicon.generic_facets
        combos = [f"has {a} {f}" for a in attrs for f in facets]
        for line in _pick(rng, combos, len(combos)):
            if len(lines) >= h:
                break
            if line not in lines:
                lines.append(line)
        order = rng.permutation(len(lines))
        return "\n".join(lines[i] for i in order)

    def _do_identify_ambiguous(self, b, request):
        return "yes" if len(self.lexicon.senses(b["entity"])) >= 2 else "no"

    def _do_explain_senses(self, b, request):
        senses = self.lexicon.senses(b["entity"])
        return "\n".join(f"{tag}: {info.get('gloss', tag)}" for tag, info in sorted(senses.items()))

    def _do_rewrite_query(self, b, request):
        sizes = [int(s) for s in b["slot_sizes"].split()]
        k = int(b["k"])
        rng = self._rng(request)
        return "\n".join(" ".join(map(str, seq)) for seq in sample_choice_sequences(rng, sizes, k))


def _pick(rng: np.random.Generator, pool: Sequence[str], n: int) -> list[str]:
    if n <= 0 or not pool:
        return []
    idx = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
    return [pool[i] for i in idx]


def sample_choice_sequences(rng: np.random.Generator, sizes: Sequence[int], k: int) -> list[list[int]]:
    """``k`` choice sequences, distinct and excluding all-zero while the space allows."""
    total = int(np.prod(sizes)) if sizes else 1
    usable = total - 1 if total > 1 else total

    def decode(flat: int) -> list[int]:
        seq = []
        for size in reversed(sizes):
            flat, r = divmod(flat, size)
            seq.append(r)
        return seq[::-1]

    if total <= 1:
        return [[0] * len(sizes) for _ in range(k)]
    if usable <= 4096:
        picks = list(rng.choice(np.arange(1, total), size=min(k, usable), replace=False))
        while len(picks) < k:
            picks.append(int(rng.integers(1, total)))
        return [decode(int(p)) for p in picks]
    seen: set[tuple[int, ...]] = set()
    out = []
    while len(out) < k:
        seq = [int(rng.integers(s)) for s in sizes]
        if any(seq) and tuple(seq) not in seen:
            seen.add(tuple(seq))
            out.append(seq)
    return out


class RemoteBackend:
    """Chat-completions client: ``POST {model, messages, temperature, seed}``."""

    kind = "remote"

    def __init__(self, endpoint: str, model_name: str, timeout: float = 30.0, retries: int = 3,
                 backoff: float = 0.5, token_env: str = TOKEN_ENV):
        if not endpoint:
            raise ValueError("a remote backend needs an endpoint")
        self.endpoint = endpoint
        self.model_name = model_name
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.token_env = token_env

    def complete(self, request: LlmRequest) -> str:
        import requests

        payload = {"model": self.model_name, "messages": request.messages(),
                   "temperature": request.temperature, "seed": request.seed}
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = BackendUnavailable(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise MalformedResponse(f"unexpected response body: {exc}") from None
            if not isinstance(content, str):
                raise MalformedResponse("message content is not a string")
            return content
        raise BackendUnavailable(f"{self.endpoint} failed after {self.retries + 1} attempts: {last_error}")


# --------------------------------------------------------------------------
# cache


def cache_key(backend, request: LlmRequest) -> str:
    blob = json.dumps({
        "template": request.template,
        "bindings": [list(kv) for kv in request.bindings],
        "model_name": backend.model_name,
        "temperature": request.temperature,
        "seed": request.seed,
    }, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0


class CachedBackend:
    """Response cache in front of another backend, one file per request hash."""

    def __init__(self, backend, directory: str | os.PathLike):
        self.backend = backend
        self.directory = Path(directory)
        self.stats = CacheStats()
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    @property
    def kind(self) -> str:
        return self.backend.kind

    @property
    def model_name(self) -> str:
        return self.backend.model_name

    def _lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def complete(self, request: LlmRequest) -> str:
        key = cache_key(self.backend, request)
        path = self.directory / key
        with self._lock(key):
            hit = _read_entry(path, key)
            if hit is not None:
                self.stats.hits += 1
                return hit
            self.stats.misses += 1
            response = self.backend.complete(request)
            envelope = json.dumps({"key": key, "response": response}, ensure_ascii=False)
            atomic_write(path, envelope.encode("utf-8"))
            return response


def _read_entry(path: Path, key: str) -> str | None:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        return None
    except OSError as exc:
        raise IoFailure(f"cannot read cache entry {path}: {exc}") from exc
    try:
        env = json.loads(raw.decode("utf-8"))
        if env["key"] != key or not isinstance(env["response"], str):
            raise ValueError("key mismatch")
        return env["response"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError):
        log.warning("discarding corrupted cache entry %s", path.name)
        return None


def cached(backend, request: LlmRequest, cache_dir: str | os.PathLike) -> str:
    return CachedBackend(backend, cache_dir).complete(request)


def make_backend(kind: str = "mock", endpoint: str | None = None, model_name: str | None = None,
                 cache_dir: str | os.PathLike | None = None):
    if kind == "mock":
        backend = MockBackend(model_name=model_name or "mock-evd-1")
    elif kind == "remote":
        backend = RemoteBackend(endpoint or "", model_name or "gpt-3.5-turbo")
    else:
        raise ValueError(f"unknown backend kind {kind!r}")
    return CachedBackend(backend, cache_dir) if cache_dir else backend


# --------------------------------------------------------------------------
# parsing helpers

_BULLET = re.compile(r"^\s*(?:[-*•]+|\(?\d+[.):]|\d+\s*-)\s*")


def parse_lines(text: str) -> list[str]:
    if not isinstance(text, str):
        raise MalformedResponse("response is not text")
    out = []
    for line in text.splitlines():
        line = _BULLET.sub("", line).strip().strip('"').strip()
        if line:
            out.append(line)
    return out


# --------------------------------------------------------------------------
# operations


def extract_visual_entities(backend, caption: str, seed: int = 0) -> list[str]:
    if not caption.strip():
        raise ValueError("caption must be non-empty")
    lines = parse_lines(backend.complete(make_request("extract_entities", seed=seed, caption=caption)))
    if len(lines) == 1 and lines[0].lower() in ("none", "no entities", "n/a"):
        return []
    out: list[str] = []
    for line in lines:
        ent = line.lower().rstrip(".,;")
        if len(ent.split()) > 6 or not re.search(r"\w", ent):
            raise MalformedResponse(f"not an entity name: {line!r}")
        if ent not in out:
            out.append(ent)
    return out


def generate_descriptions(backend, sense: EntitySense, h: int, seed: int = 0) -> list[str]:
    if h < 1:
        raise ValueError("h must be >= 1")
    hint = f" in the sense of '{sense.sense_tag}'" if sense.sense_tag else ""
    request = make_request("describe_entity", seed=seed, entity=sense.entity, sense_tag=sense.sense_tag or "",
                           sense_hint=hint, h=str(h))
    lines = list(dict.fromkeys(parse_lines(backend.complete(request))))
    if len(lines) != h:
        raise MalformedResponse(f"expected {h} distinct descriptions, got {len(lines)}")
    return lines


def resolve_ambiguity(backend, entity: str, seed: int = 0) -> list[tuple[str, str]]:
    answer = parse_lines(backend.complete(make_request("identify_ambiguous", seed=seed, entity=entity)))
    verdict = answer[0].split()[0].lower().strip(".,!") if answer else ""
    if verdict not in ("yes", "no"):
        raise MalformedResponse(f"expected yes/no, got {answer[:1]!r}")
    if verdict == "no":
        return []
    senses: list[tuple[str, str]] = []
    for line in parse_lines(backend.complete(make_request("explain_senses", seed=seed, entity=entity))):
        tag, sep, gloss = line.partition(":")
        tag = tag.strip().lower()
        if not sep or not tag:
            raise MalformedResponse(f"expected 'tag: explanation', got {line!r}")
        if tag not in (t for t, _ in senses):
            senses.append((tag, gloss.strip()))
    if len(senses) < 2:
        raise MalformedResponse(f"an ambiguous entity needs >= 2 senses, got {len(senses)}")
    return senses


def _catalog(query: str, space) -> str:
    lines = []
    for t, choices in enumerate(space):
        surface = query[choices[0].span[0]:choices[0].span[1]]
        opts = ["0 unchanged"]
        for c, a in enumerate(choices[1:], start=1):
            sense = f"[{a.sense_tag}] " if a.sense_tag else ""
            opts.append(f"{c} {a.template}: {sense}{a.description}")
        lines.append(f"entity {t + 1} '{surface}': " + " | ".join(opts))
    return "\n".join(lines)


def generate_rewrite_candidates(backend, query: str, matched_evd: Sequence[tuple[EntityMatch, Sequence[EvdEntry]]],
                                k: int, seed: int = 0, H: int = 5, templates: Sequence[str] = TEMPLATES,
                                temperature: float = 1.0) -> list[RewriteCandidate]:
    """Ask the model for ``k`` rewrites, returned as action sequences plus text."""
    if k < 1:
        raise ValueError("k must be >= 1")
    matched = [(m, e if isinstance(e, (list, tuple)) else [e]) for m, e in matched_evd]
    space = space_from_matches(matched, H, templates)
    if not space:
        return [RewriteCandidate((), query) for _ in range(k)]
    request = make_request("rewrite_query", temperature=temperature, seed=seed, query=query,
                           catalog=_catalog(query, space), k=str(k),
                           slot_sizes=" ".join(str(len(s)) for s in space))
    lines = parse_lines(backend.complete(request))
    if len(lines) < k:
        raise MalformedResponse(f"expected {k} rewrites, got {len(lines)}")
    out = []
    for line in lines[:k]:
        try:
            ids = [int(tok) for tok in line.replace(",", " ").split()]
        except ValueError:
            raise MalformedResponse(f"non-numeric choice line {line!r}") from None
        if len(ids) != len(space) or any(not 0 <= c < len(s) for c, s in zip(ids, space)):
            raise MalformedResponse(f"choice line {line!r} does not fit slot sizes")
        actions = tuple(s[c] for c, s in zip(ids, space))
        out.append(RewriteCandidate(actions, render_rewrite(query, actions)))
    return out
