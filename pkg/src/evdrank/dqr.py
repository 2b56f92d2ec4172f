"""Rewrite-dataset construction from retriever feedback.

For each training caption the LLM proposes ``k`` description-enhanced
rewrites.  The retriever scores every rewrite against the caption's own
item; rewrites that beat the original caption's score (strictly) are kept,
best first.  Captions with no improving rewrite are dropped.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._hashing import seed_from
from .encoder import CorpusItem, EncoderParams, encode_item, encode_texts, similarity
from .errors import IoFailure
from .kb import EvdKnowledgeBase, atomic_write
from .llm import generate_rewrite_candidates
from .rewriter import RewriteCandidate, candidate_from_records, matched_entries


@dataclass(frozen=True)
class DqrRecord:
    query_id: str
    x: str
    original_score: float
    candidates: tuple[RewriteCandidate, ...]

    @property
    def k_effective(self) -> int:
        return len(self.candidates)

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "x": self.x,
            "original_score": self.original_score,
            "candidates": [{"actions": [a.to_record() for a in c.actions], "text": c.text, "score": c.score}
                           for c in self.candidates],
        }


@dataclass
class BuildReport:
    attempted: int = 0
    kept: int = 0
    skipped_no_entity: int = 0
    skipped_no_improver: int = 0


def score_candidate(params: EncoderParams, candidate_text: str, truth_item: CorpusItem) -> float:
    return similarity(encode_texts(params, [candidate_text])[0], encode_item(params, truth_item))


def select_improvers(original_score: float, candidates: Sequence[RewriteCandidate], k: int,
                     best_only: bool = False) -> list[RewriteCandidate]:
    """Strict improvers over the original, best first (stable on equal scores)."""
    better = [c for c in candidates if c.score > original_score]
    better.sort(key=lambda c: -c.score)
    return better[:1] if best_only else better[:k]


def build_record(params: EncoderParams, backend, kb: EvdKnowledgeBase, query_id: str, x: str,
                 truth_item: CorpusItem, k: int, seed: int, best_only: bool = False) -> DqrRecord | None:
    if k < 1:
        raise ValueError("k must be >= 1")
    proposals = generate_rewrite_candidates(backend, x, matched_entries(x, kb), k, seed=seed, H=kb.h_max)
    unique: dict[str, RewriteCandidate] = {}
    for c in proposals:
        unique.setdefault(c.text, c)
    texts = [x] + list(unique)
    item_vec = encode_item(params, truth_item)
    scores = encode_texts(params, texts) @ item_vec
    original = float(np.clip(scores[0], -1.0, 1.0))
    scored = [c.with_score(float(np.clip(s, -1.0, 1.0))) for c, s in zip(unique.values(), scores[1:])]
    kept = select_improvers(original, scored, k, best_only)
    if not kept:
        return None
    return DqrRecord(query_id, x, original, tuple(kept))


def build_dataset(params: EncoderParams, backend, kb: EvdKnowledgeBase, corpus: Sequence[CorpusItem],
                  k: int = 5, seed: int = 0, best_only: bool = False) -> tuple[list[DqrRecord], BuildReport]:
    report = BuildReport()
    records = []
    for item in corpus:
        report.attempted += 1
        if not kb.link_entities(item.caption):
            report.skipped_no_entity += 1
            continue
        rec = build_record(params, backend, kb, item.id, item.caption, item, k,
                           seed_from("dqr", seed, item.id), best_only)
        if rec is None:
            report.skipped_no_improver += 1
            continue
        report.kept += 1
        records.append(rec)
    return records, report


# --------------------------------------------------------------------------
# files


def dumps_dqr(records: Sequence[DqrRecord]) -> str:
    return "".join(json.dumps(r.to_json(), ensure_ascii=False) + "\n" for r in records)


def save_dqr(records: Sequence[DqrRecord], path: str | os.PathLike, report: BuildReport | None = None) -> None:
    atomic_write(path, dumps_dqr(records).encode("utf-8"))
    if report is not None:
        atomic_write(report_path(path), (json.dumps(asdict(report)) + "\n").encode("utf-8"))


def report_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".report.json")


def _read_lines(path) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def load_dqr(path: str | os.PathLike, kb: EvdKnowledgeBase) -> list[DqrRecord]:
    """Read a dataset file and re-resolve every action sequence against ``kb``."""
    records = []
    for line_no, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        cands = []
        for c in rec["candidates"]:
            cand = candidate_from_records(rec["x"], kb, c["actions"])
            if cand.text != c["text"]:
                raise ValueError(f"{path}:{line_no}: stored text does not match its actions")
            cands.append(cand.with_score(float(c["score"])))
        records.append(DqrRecord(rec["query_id"], rec["x"], float(rec["original_score"]), tuple(cands)))
    return records


@dataclass
class AuditResult:
    records: int = 0
    candidates: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def audit_dqr_file(path: str | os.PathLike) -> AuditResult:
    """Check selection soundness and ordering using only the file's contents."""
    res = AuditResult()
    for line_no, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        res.records += 1
        orig = rec["original_score"]
        scores = [c["score"] for c in rec["candidates"]]
        res.candidates += len(scores)
        if not scores:
            res.violations.append(f"line {line_no}: record without candidates")
        for i, s in enumerate(scores):
            if not s > orig:
                res.violations.append(f"line {line_no}: candidate {i} score {s} <= original {orig}")
        for i, (a, b) in enumerate(zip(scores, scores[1:])):
            if b > a:
                res.violations.append(f"line {line_no}: candidates {i},{i + 1} out of order")
    return res
