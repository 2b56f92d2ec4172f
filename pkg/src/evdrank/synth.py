"""Bundled synthetic corpus of visually confusable entities.

Items are attribute bags standing in for images: the visual descriptors of
the depicted entity plus two scene tokens (a place and a time of day).
Captions name the entity and the scene but none of the visual descriptors,
so a caption alone cannot tell an item apart from the item showing the
confusable partner entity in the same scene.  The partner's descriptors are
disjoint, so inserting the right description recovers the distinction.

Confusable pairs are split: some pairs occur only in training items, the
others only in test items.  A small set of everyday entities, plus the
ambiguous ``bank``, appear across both splits.
"""

from __future__ import annotations

import itertools

import numpy as np

from .encoder import CorpusItem
from .llm import Lexicon, default_lexicon

TRAIN_PAIRS = (("yacht", "ferry"), ("muffin", "cupcake"), ("violin", "cello"), ("moth", "butterfly"),
               ("tram", "train"), ("hare", "rabbit"), ("canoe", "kayak"), ("goose", "swan"))
TEST_PAIRS = (("tent", "village"), ("wolf", "husky"), ("crocodile", "alligator"), ("leopard", "cheetah"),
              ("dolphin", "shark"), ("mansion", "castle"))
COMMON = ("dog", "bicycle", "umbrella", "horse", "kite")
PLACES = ("lake", "forest", "desert", "beach", "meadow", "harbor", "canyon", "glacier")
TIMES = ("dawn", "dusk", "noon", "night", "sunset")


def make_confusable_corpus(seed: int = 0, train_per_entity: int = 6, test_per_entity: int = 5,
                           secondary_rate: float = 0.3, bank_items: int = 4,
                           lexicon: Lexicon | None = None) -> list[CorpusItem]:
    lex = lexicon or default_lexicon()
    rng = np.random.default_rng(seed)
    scenes = list(itertools.product(PLACES, TIMES))
    drafts: list[tuple[str, str, tuple[str, ...]]] = []

    def add_pair(pair, n, split):
        picks = rng.choice(len(scenes), size=n, replace=False)
        for s in picks:
            place, tod = scenes[s]
            second = COMMON[int(rng.integers(len(COMMON)))] if rng.random() < secondary_rate else None
            for entity in pair:
                attrs = list(lex.descriptors(entity)) + [place, tod]
                if second:
                    caption = f"a {entity} and a {second} near a {place} at {tod}"
                    attrs += lex.descriptors(second)
                else:
                    caption = f"a {entity} near a {place} at {tod}"
                drafts.append((split, caption, tuple(attrs)))

    for pair in TRAIN_PAIRS:
        add_pair(pair, train_per_entity, "train")
    for pair in TEST_PAIRS:
        add_pair(pair, test_per_entity, "test")
    for _ in range(bank_items):
        place, tod = scenes[int(rng.integers(len(scenes)))]
        second = COMMON[int(rng.integers(len(COMMON)))]
        attrs = tuple(lex.descriptors("bank", "riverbank") + lex.descriptors(second) + [place, tod])
        drafts.append(("train", f"a {second} on the bank of a {place} at {tod}", attrs))

    order = rng.permutation(len(drafts))
    items = []
    for n, i in enumerate(order):
        split, caption, attrs = drafts[i]
        items.append(CorpusItem(f"item-{n:04d}", caption, attrs, split))
    return items
