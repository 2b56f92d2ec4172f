from __future__ import annotations

import numpy as np
import pytest

from evdrank.kb import EntitySense, EvdEntry, EvdKnowledgeBase
from evdrank.rewriter import RewritePolicy

TS = "2024-01-01T00:00:00Z"

FD_EPS = 1e-5
GRAD_FLOOR = 1e-6


def entry(entity, descriptions, tag=None, source="llm"):
    return EvdEntry(EntitySense(entity, tag, source), tuple(descriptions), TS)


def small_kb() -> EvdKnowledgeBase:
    return EvdKnowledgeBase.from_entries([
        entry("tent", ["has pointed fabric roofs", "has guy ropes", "has zipped flaps",
                       "has nylon walls", "has metal poles"]),
        entry("village", ["has tiled roofs", "has stone houses", "has narrow lanes"]),
        entry("camp of tents", ["has rows of fabric shelters"]),
        entry("dog", ["has floppy ears", "has a wagging tail"]),
        entry("bank", ["has marble columns", "has a vault door"], tag="financial institution"),
        entry("bank", ["has muddy slopes", "has reeds along the water"], tag="riverbank"),
    ])


@pytest.fixture
def kb() -> EvdKnowledgeBase:
    return small_kb()


def random_policy(seed: int, dim: int = 512, scale: float = 0.5) -> RewritePolicy:
    rng = np.random.default_rng(seed)
    return RewritePolicy(rng.normal(0.0, scale, size=dim), feature_seed=seed, H=5)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), maximised."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def vector_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max |a|, max |n|) over the checked coordinates."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)))
    return float(np.max(np.abs(a - n))) / scale if scale > 0 else 0.0


def central_difference(f, x: np.ndarray, coords, eps: float = FD_EPS) -> np.ndarray:
    """Central differences of ``f`` at ``x`` along the flat indices ``coords``.

    ``f`` may return a scalar or a fixed-shape array; results are stacked
    along a leading coordinate axis.
    """
    out = []
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    for c in coords:
        old = flat[c]
        flat[c] = old + eps
        up = np.asarray(f(x), dtype=np.float64)
        flat[c] = old - eps
        down = np.asarray(f(x), dtype=np.float64)
        flat[c] = old
        out.append((up - down) / (2 * eps))
    return np.array(out, dtype=np.float64)


# acceptance criteria report: one line per criterion in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"criterion {criterion} [{'PASS' if ok else 'FAIL'}] {title}" + (f" :: {detail}" if detail else "")
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
