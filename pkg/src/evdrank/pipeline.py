"""End-to-end pipeline stages.

Each ``cmd_*`` function is one CLI subcommand.  Stages communicate only
through files named in :class:`PipelineConfig`, so any stage can be rerun
in isolation:

    build-kb -> build-dqr -> train-rewriter (warmup, align)
             -> finetune-retriever -> evaluate
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from ._hashing import seed_from
from .dqr import build_dataset, load_dqr, save_dqr
from .encoder import (CorpusItem, EncoderParams, encode_item, encode_items, encode_text, encode_texts, fit, init_params,
                      load_corpus, load_params, rank_order, recall_at_h, save_params, similarity)
from .errors import IoFailure
from .kb import (EntitySense, EvdEntry, EvdKnowledgeBase, add_parallel_sense, atomic_write, inject_knowledge,
                 load_kb, save_kb)
from .llm import default_lexicon, extract_visual_entities, generate_descriptions, make_backend, resolve_ambiguity
from .rewriter import (RewriteAction, RewritePolicy, RewriterTrainConfig, action_space, decode_greedy,
                       load_policy, prepare, render_rewrite, save_policy, train_rewriter)

log = logging.getLogger(__name__)

STRATEGIES = ("none", "det_style", "des_style", "evd_rewriter")
BUNDLED = "bundled"
N_PARALLEL = 5


# --------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    workdir: str = "."
    corpus_path: str = BUNDLED
    kb_path: str = "kb.jsonl"
    dqr_path: str = "dqr.jsonl"
    encoder_base_path: str = "encoder_base.bin"
    encoder_path: str = "encoder.bin"
    policy_warmup_path: str = "rewriter_warmup.bin"
    policy_path: str = "rewriter.bin"
    metrics_path: str = "metrics.jsonl"
    cache_dir: str = ""

    backend: str = "mock"
    endpoint: str = ""
    model_name: str = ""

    seed: int = 0
    hash_seed: int = 0
    tau: float = 0.07
    d_feat: int = 4096
    d_emb: int = 64
    H: int = 5
    k: int = 5
    beta: float = 0.2
    p: float = 0.6
    min_entity_freq: int = 2
    best_only: bool = False
    kb_splits: str = "all"
    train_split: str = "train"
    eval_split: str = "test"
    kb_timestamp: str = "1970-01-01T00:00:00Z"

    encoder_lr: float = 1e-2
    encoder_epochs: int = 200
    encoder_batch_size: int = 32
    encoder_momentum: float = 0.0

    feature_dim: int = 1 << 14
    warmup_lr: float = 0.5
    warmup_epochs: int = 20
    warmup_batch_size: int = 8
    align_lr: float = 0.5
    align_epochs: int = 5
    align_batch_size: int = 16
    reward_source: str = "score"
    normalize_rewards: bool = True

    strategy: str = "all"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.backend not in ("mock", "remote"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.strategy not in STRATEGIES + ("all",):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.reward_source not in ("score", "logprob"):
            raise ValueError(f"unknown reward_source {self.reward_source!r}")

    def path(self, name: str) -> Path:
        value = getattr(self, name)
        p = Path(value)
        return p if p.is_absolute() else Path(self.workdir) / p

    def updated(self, **overrides) -> "PipelineConfig":
        d = asdict(self)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return PipelineConfig(**d)

    def rewriter_train_config(self) -> RewriterTrainConfig:
        return RewriterTrainConfig(self.warmup_lr, self.warmup_epochs, self.warmup_batch_size, self.align_lr,
                                   self.align_epochs, self.align_batch_size, self.beta, self.normalize_rewards,
                                   self.reward_source, self.seed)


def _coerce(kind, raw: str):
    if kind is bool or kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(PipelineConfig)}
    values = asdict(base or PipelineConfig())
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in types:
            raise ValueError(f"config line {line_no}: unknown or malformed entry {raw.strip()!r}")
        values[key] = _coerce(types[key], value.strip())
    return PipelineConfig(**values)


def load_config(path: str | os.PathLike | None, **overrides) -> PipelineConfig:
    if path is None:
        cfg = PipelineConfig()
    else:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot read config {p}: {exc}") from exc
        cfg = parse_config_text(text, PipelineConfig(workdir=str(p.parent)))
    return cfg.updated(**overrides)


def dumps_config(cfg: PipelineConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


# --------------------------------------------------------------------------
# shared loaders


def bundled_corpus_text() -> str:
    return resources.files("evdrank").joinpath("data/confusable_corpus.jsonl").read_text(encoding="utf-8")


def corpus_items(cfg: PipelineConfig) -> list[CorpusItem]:
    if cfg.corpus_path == BUNDLED:
        with resources.as_file(resources.files("evdrank").joinpath("data/confusable_corpus.jsonl")) as p:
            return load_corpus(p)
    return load_corpus(cfg.path("corpus_path"))


def split_items(items: Sequence[CorpusItem], split: str) -> list[CorpusItem]:
    if split in ("", "all"):
        return list(items)
    return [it for it in items if it.split == split]


def backend_for(cfg: PipelineConfig):
    cache = cfg.path("cache_dir") if cfg.cache_dir else None
    return make_backend(cfg.backend, cfg.endpoint or None, cfg.model_name or None, cache)


def load_kb_for(cfg: PipelineConfig) -> EvdKnowledgeBase:
    return load_kb(cfg.path("kb_path"), h_max=cfg.H)


def base_params(cfg: PipelineConfig) -> EncoderParams:
    """Starting retriever: loaded if present, otherwise a seeded tied init (written to disk)."""
    path = cfg.path("encoder_base_path")
    if path.exists():
        return load_params(path)
    params = init_params(cfg.d_feat, cfg.d_emb, cfg.tau, cfg.hash_seed, seed=seed_from("encoder", cfg.seed))
    save_params(params, path)
    return params


def trained_policy(cfg: PipelineConfig) -> RewritePolicy:
    for name in ("policy_path", "policy_warmup_path"):
        if cfg.path(name).exists():
            return load_policy(cfg.path(name))
    raise IoFailure(f"no rewriter checkpoint at {cfg.path('policy_path')} or {cfg.path('policy_warmup_path')}")


# --------------------------------------------------------------------------
# build-kb


@dataclass
class KbStats:
    captions: int = 0
    entities_seen: int = 0
    entities_kept: int = 0
    ambiguous: int = 0
    entries: int = 0


def build_kb(items: Sequence[CorpusItem], backend, H: int = 5, min_entity_freq: int = 2, seed: int = 0,
             timestamp: str = "1970-01-01T00:00:00Z") -> tuple[EvdKnowledgeBase, KbStats]:
    stats = KbStats(captions=len(items))
    freq: Counter[str] = Counter()
    for it in items:
        freq.update(set(extract_visual_entities(backend, it.caption, seed=seed)))
    stats.entities_seen = len(freq)
    kept = sorted(e for e, n in freq.items() if n >= min_entity_freq)
    stats.entities_kept = len(kept)
    entries = []
    for entity in kept:
        senses = resolve_ambiguity(backend, entity, seed=seed)
        tags = [tag for tag, _ in senses] or [None]
        stats.ambiguous += bool(senses)
        for tag in tags:
            sense = EntitySense(entity, tag, "llm")
            entries.append(EvdEntry(sense, tuple(generate_descriptions(backend, sense, H, seed=seed)), timestamp))
    kb = EvdKnowledgeBase.from_entries(entries, version=0, h_max=H)
    stats.entries = len(kb)
    return kb, stats


def cmd_build_kb(cfg: PipelineConfig) -> KbStats:
    items = split_items(corpus_items(cfg), cfg.kb_splits)
    kb, stats = build_kb(items, backend_for(cfg), cfg.H, cfg.min_entity_freq, cfg.seed, cfg.kb_timestamp)
    save_kb(kb, cfg.path("kb_path"))
    log.info("knowledge base: %s", stats)
    return stats


# --------------------------------------------------------------------------
# build-dqr / train-rewriter


def cmd_build_dqr(cfg: PipelineConfig):
    kb = load_kb_for(cfg)
    train = split_items(corpus_items(cfg), cfg.train_split)
    records, report = build_dataset(base_params(cfg), backend_for(cfg), kb, train, cfg.k, cfg.seed, cfg.best_only)
    save_dqr(records, cfg.path("dqr_path"), report)
    log.info("rewrite dataset: %s", report)
    return report


def cmd_train_rewriter(cfg: PipelineConfig, phase: str) -> RewritePolicy:
    kb = load_kb_for(cfg)
    records = load_dqr(cfg.path("dqr_path"), kb)
    tcfg = cfg.rewriter_train_config()
    if phase == "warmup":
        start = RewritePolicy.zeros(cfg.feature_dim, seed_from("rewriter", cfg.seed) & 0xFFFFFFFF, cfg.H)
        policy = train_rewriter(start, kb, records, "warmup", tcfg)
        save_policy(policy, cfg.path("policy_warmup_path"))
    elif phase == "align":
        start = load_policy(cfg.path("policy_warmup_path"))
        policy = train_rewriter(start, kb, records, "align", tcfg)
        save_policy(policy, cfg.path("policy_path"))
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return policy


# --------------------------------------------------------------------------
# inference-time rewriting


def inference_rewrites(policy: RewritePolicy, kb: EvdKnowledgeBase, query: str) -> list[str]:
    """Greedy rewrite, expanded into parallel per-sense variants.

    Where the chosen action inserts a description of a multi-sense entity,
    one variant per sense is produced (same description slot and template,
    clipped to that sense's description count).
    """
    prepared = prepare(policy, query, kb)
    best = decode_greedy(policy, query, kb, prepared)
    if not best.actions:
        return [best.text]
    options: list[list[RewriteAction]] = []
    space = [slot.choices for slot in prepared.slots]
    for a, choices in zip(best.actions, space):
        senses = kb.senses_of(a.entity)
        if a.is_skip or len(senses) < 2:
            options.append([a])
            continue
        per_sense = []
        for entry in senses:
            d = min(a.desc_index, len(entry.descriptions) - 1)
            match = [c for c in choices if c.choice == (entry.sense.sense_tag, d, a.template)]
            per_sense.extend(match[:1])
        options.append(per_sense or [a])
    texts = [render_rewrite(query, combo) for combo in _product(options)]
    return list(dict.fromkeys(texts))


def _product(options: list[list[RewriteAction]]) -> list[list[RewriteAction]]:
    combos: list[list[RewriteAction]] = [[]]
    for opts in options:
        combos = [c + [o] for c in combos for o in opts]
    return combos


def final_score(params: EncoderParams, policy: RewritePolicy, kb: EvdKnowledgeBase, query: str,
                item: CorpusItem) -> float:
    """Mean of the original query's similarity and the rewritten query's similarity."""
    item_vec = encode_item(params, item)
    plain = similarity(encode_text(params, query), item_vec)
    variants = inference_rewrites(policy, kb, query)
    rewritten = sum(similarity(encode_text(params, v), item_vec) for v in variants) / len(variants)
    return 0.5 * plain + 0.5 * rewritten


# --------------------------------------------------------------------------
# evaluation


def parallel_variants(strategy: str, query: str, kb: EvdKnowledgeBase, seed: int,
                      fillers: Sequence[str] = ()) -> list[str]:
    """The five parallel queries of the description-augmentation baselines.

    ``det_style`` appends random non-visual filler glosses; ``des_style``
    splices random knowledge-base descriptions into every linked entity.
    Both keep the original query as the first variant.
    """
    rng = np.random.default_rng(seed_from(strategy, seed, query))
    out = [query]
    if strategy == "det_style":
        fillers = list(fillers) or list(default_lexicon().non_visual_fillers)
        for _ in range(N_PARALLEL - 1):
            out.append(f"{query}, {fillers[int(rng.integers(len(fillers)))]}")
        return out
    if strategy != "des_style":
        raise ValueError(f"{strategy!r} has no parallel variants")
    space = action_space(query, kb)
    for _ in range(N_PARALLEL - 1):
        actions = []
        for choices in space:
            concrete = [c for c in choices[1:] if c.template == "appositive"]
            actions.append(concrete[int(rng.integers(len(concrete)))] if concrete else choices[0])
        out.append(render_rewrite(query, actions))
    return out


def _grouped_mean(params: EncoderParams, groups: Sequence[Sequence[str]], item_emb: np.ndarray) -> np.ndarray:
    flat = [t for g in groups for t in g]
    sims = encode_texts(params, flat) @ item_emb.T
    out = np.empty((len(groups), item_emb.shape[0]))
    pos = 0
    for i, g in enumerate(groups):
        out[i] = sims[pos:pos + len(g)].mean(axis=0)
        pos += len(g)
    return out


def score_matrix(strategy: str, params: EncoderParams, items: Sequence[CorpusItem], queries: Sequence[str],
                 kb: EvdKnowledgeBase | None = None, policy: RewritePolicy | None = None,
                 seed: int = 0) -> np.ndarray:
    """Query x item score matrix for one strategy."""
    item_emb = encode_items(params, items)
    if strategy == "none":
        return encode_texts(params, queries) @ item_emb.T
    if strategy in ("det_style", "des_style"):
        groups = [parallel_variants(strategy, q, kb, seed) for q in queries]
        return _grouped_mean(params, groups, item_emb)
    if strategy == "evd_rewriter":
        plain = encode_texts(params, queries) @ item_emb.T
        rewritten = _grouped_mean(params, [inference_rewrites(policy, kb, q) for q in queries], item_emb)
        return 0.5 * plain + 0.5 * rewritten
    raise ValueError(f"unknown strategy {strategy!r}")


def recall_report(scores: np.ndarray, ids: Sequence[str], strategy: str) -> list[dict]:
    """R@1/5/10 for text-to-image (rows) and image-to-text (columns).

    Query ``i`` is the caption of item ``i``, so the ground truth of either
    direction is the matching index.
    """
    ids = list(ids)
    rows = []
    for direction, mat in (("t2i", scores), ("i2t", scores.T)):
        order = rank_order(mat, ids)
        rankings = [[ids[j] for j in row[:10]] for row in order]
        truths = [{ids[i]} for i in range(len(ids))]
        rows.append({"strategy": strategy, "direction": direction,
                     "R@1": recall_at_h(rankings, truths, 1), "R@5": recall_at_h(rankings, truths, 5),
                     "R@10": recall_at_h(rankings, truths, 10), "n_queries": len(ids)})
    return rows


def evaluate(params: EncoderParams, items: Sequence[CorpusItem], strategies: Sequence[str],
             kb: EvdKnowledgeBase | None = None, policy: RewritePolicy | None = None, seed: int = 0) -> list[dict]:
    queries = [it.caption for it in items]
    ids = [it.id for it in items]
    wanted = list(dict.fromkeys(["none", *strategies]))
    report = []
    baseline = {}
    for strategy in wanted:
        rows = recall_report(score_matrix(strategy, params, items, queries, kb, policy, seed), ids, strategy)
        for row in rows:
            if strategy == "none":
                baseline[row["direction"]] = row
            else:
                base = baseline[row["direction"]]
                row["delta_vs_none"] = {m: row[m] - base[m] for m in ("R@1", "R@5", "R@10")}
        report.extend(rows)
    return report


def dumps_metrics(rows: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=False) + "\n" for r in rows)


def cmd_evaluate(cfg: PipelineConfig) -> list[dict]:
    items = split_items(corpus_items(cfg), cfg.eval_split)
    params = load_params(cfg.path("encoder_path"))
    strategies = list(STRATEGIES) if cfg.strategy == "all" else [cfg.strategy]
    needs_kb = any(s in ("des_style", "evd_rewriter") for s in strategies)
    kb = load_kb_for(cfg) if needs_kb else None
    policy = trained_policy(cfg) if "evd_rewriter" in strategies else None
    rows = evaluate(params, items, strategies, kb, policy, cfg.seed)
    atomic_write(cfg.path("metrics_path"), dumps_metrics(rows).encode("utf-8"))
    return rows


# --------------------------------------------------------------------------
# finetune-retriever


def finetune_retriever(params: EncoderParams, items: Sequence[CorpusItem], rewrites: Sequence[str] | None,
                       p: float, epochs: int, learning_rate: float, batch_size: int, momentum: float,
                       seed: int) -> EncoderParams:
    """Contrastive fine-tuning where each caption is swapped for its rewrite with probability ``p``.

    The swap is drawn independently per item and epoch from its own RNG, so
    ``p = 0`` reproduces plain fine-tuning exactly.
    """
    draw_rng = np.random.default_rng(seed_from("rewrite-draws", seed))
    current: dict[int, list[str]] = {}

    def text_for(epoch: int, i: int) -> str:
        if epoch not in current:
            current.clear()
            coins = draw_rng.random(len(items))
            current[epoch] = [rewrites[j] if (rewrites is not None and coins[j] < p) else items[j].caption
                              for j in range(len(items))]
        return current[epoch][i]

    return fit(params, items, epochs=epochs, learning_rate=learning_rate, batch_size=batch_size,
               momentum=momentum, seed=seed, text_for=text_for)


def cmd_finetune_retriever(cfg: PipelineConfig) -> EncoderParams:
    kb = load_kb_for(cfg)
    policy = trained_policy(cfg)
    train = split_items(corpus_items(cfg), cfg.train_split)
    rewrites = [decode_greedy(policy, it.caption, kb).text for it in train]
    params = finetune_retriever(base_params(cfg), train, rewrites, cfg.p, cfg.encoder_epochs, cfg.encoder_lr,
                                cfg.encoder_batch_size, cfg.encoder_momentum, cfg.seed)
    save_params(params, cfg.path("encoder_path"))
    return params


# --------------------------------------------------------------------------
# kb-edit


def cmd_kb_edit(cfg: PipelineConfig, op: str, entity: str, descriptions: Sequence[str],
                sense_tag: str | None = None, default_tag: str | None = None,
                created_at: str | None = None) -> EvdKnowledgeBase:
    kb = load_kb_for(cfg)
    if op == "inject":
        kb = inject_knowledge(kb, EntitySense(entity.lower(), sense_tag, "manual"), descriptions, created_at)
    elif op == "add-sense":
        if not sense_tag:
            raise ValueError("add-sense needs a sense tag")
        kb = add_parallel_sense(kb, entity, sense_tag, descriptions, default_tag, created_at)
    else:
        raise ValueError(f"unknown kb-edit op {op!r}")
    save_kb(kb, cfg.path("kb_path"))
    return kb


# --------------------------------------------------------------------------
# everything


def run_all(cfg: PipelineConfig) -> list[dict]:
    cmd_build_kb(cfg)
    cmd_build_dqr(cfg)
    cmd_train_rewriter(cfg, "warmup")
    cmd_train_rewriter(cfg, "align")
    cmd_finetune_retriever(cfg)
    return cmd_evaluate(cfg)
