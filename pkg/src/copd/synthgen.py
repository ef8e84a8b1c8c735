"""Synthetic dual-domain click logs with planted interest groups and popularity skew."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import Interaction


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 300
    n_items_a: int = 500
    n_items_b: int = 500
    n_groups: int = 4
    interactions_per_user_per_domain: int = 30
    conformity_fraction: float = 0.5
    popularity_exponent: float = 1.5
    seed: int = 0

    def validate(self):
        if min(self.n_users, self.n_items_a, self.n_items_b, self.n_groups) < 1:
            raise ValueError("counts must be positive")
        if self.n_groups > min(self.n_items_a, self.n_items_b):
            raise ValueError("more groups than items")
        if self.interactions_per_user_per_domain > min(self.n_items_a, self.n_items_b):
            raise ValueError("more interactions per user than items in a domain")
        if not 0.0 <= self.conformity_fraction <= 1.0:
            raise ValueError("conformity_fraction must lie in [0, 1]")
        if self.popularity_exponent < 0:
            raise ValueError("popularity_exponent must be >= 0")


def group_blocks(n_items, n_groups):
    """Contiguous item blocks per group; the remainder goes to the last group."""
    size = n_items // n_groups
    bounds = [g * size for g in range(n_groups)] + [n_items]
    return [np.arange(bounds[g], bounds[g + 1]) for g in range(n_groups)]


def popularity_distribution(n_items, exponent, rng):
    """Power-law click probabilities over a random item ordering."""
    weights = np.arange(1, n_items + 1, dtype=np.float64) ** -exponent
    probs = np.empty(n_items)
    probs[rng.permutation(n_items)] = weights / weights.sum()
    return probs


def generate(spec):
    """Return ``(raw_a, raw_b)`` interaction lists.

    Each click is a popularity draw with probability ``conformity_fraction``,
    otherwise a uniform draw from the user's group block. Group membership is
    shared by both domains. Repeat clicks are kept; dataset building dedupes.
    """
    spec.validate()
    rng = np.random.default_rng([int(spec.seed), 0x5EED])
    groups = rng.integers(0, spec.n_groups, size=spec.n_users)
    n = spec.interactions_per_user_per_domain
    out = []
    for dom, n_items in (("A", spec.n_items_a), ("B", spec.n_items_b)):
        blocks = group_blocks(n_items, spec.n_groups)
        probs = popularity_distribution(n_items, spec.popularity_exponent, rng)
        cdf = np.cumsum(probs)
        raw = []
        for u in range(spec.n_users):
            conform = rng.random(n) < spec.conformity_fraction
            block = blocks[groups[u]]
            by_group = block[rng.integers(0, len(block), size=n)]
            by_pop = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), n_items - 1)
            items = np.where(conform, by_pop, by_group)
            for t, item in enumerate(items):
                raw.append(Interaction(f"u{u}", f"{dom.lower()}{item}", 1.0, 1_000_000 + t))
        out.append(raw)
    return out[0], out[1]


def user_groups(spec):
    """The planted group of each synthetic user (index ``k`` is user ``u{k}``)."""
    rng = np.random.default_rng([int(spec.seed), 0x5EED])
    return rng.integers(0, spec.n_groups, size=spec.n_users)
