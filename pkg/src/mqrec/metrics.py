"""Leave-one-out ranking metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["CUTOFFS", "hit_ratio_at_k", "ndcg_at_k", "rank_of", "MetricReport", "random_hit_ratio"]

CUTOFFS = (10, 20, 30)


def rank_of(ranked, truth) -> int | None:
    """1-based position of ``truth`` in ``ranked`` or ``None``."""
    for pos, item in enumerate(ranked, start=1):
        if item == truth:
            return pos
    return None


def hit_ratio_at_k(ranked, truth, k: int) -> int:
    if k < 1:
        raise ValueError("cutoff must be >= 1")
    r = rank_of(ranked, truth)
    return int(r is not None and r <= k)


def ndcg_at_k(ranked, truth, k: int) -> float:
    # a single relevant item makes the ideal DCG equal to 1
    if k < 1:
        raise ValueError("cutoff must be >= 1")
    r = rank_of(ranked, truth)
    if r is None or r > k:
        return 0.0
    return 1.0 / math.log2(r + 1)


def random_hit_ratio(k: int, candidate_counts) -> float:
    """Expected HR@k of a uniformly random ranking over each user's candidates."""
    counts = np.asarray(candidate_counts, dtype=np.float64)
    return float(np.mean(np.minimum(1.0, k / counts)))


@dataclass
class MetricReport:
    protocol: str
    n_users: int
    hr: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)

    @classmethod
    def from_ranks(cls, ranks, protocol: str, cutoffs=CUTOFFS) -> "MetricReport":
        """Aggregate per-user 1-based ranks (``None`` = not retrieved)."""
        ranks = list(ranks)
        if not ranks:
            raise ValueError("no users to evaluate")
        rep = cls(protocol=protocol, n_users=len(ranks))
        for k in cutoffs:
            hits = [1.0 if r is not None and r <= k else 0.0 for r in ranks]
            gains = [1.0 / math.log2(r + 1) if r is not None and r <= k else 0.0 for r in ranks]
            rep.hr[k] = float(np.mean(hits))
            rep.ndcg[k] = float(np.mean(gains))
        return rep

    def to_kv(self) -> str:
        lines = [f"protocol = {self.protocol}", f"users = {self.n_users}"]
        for k in sorted(self.hr):
            lines.append(f"hr@{k} = {self.hr[k]:.4f}")
        for k in sorted(self.ndcg):
            lines.append(f"ndcg@{k} = {self.ndcg[k]:.4f}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        ks = sorted(self.hr)
        head = "metric  " + "  ".join(f"@{k:<6d}" for k in ks)
        hr = "HR      " + "  ".join(f"{self.hr[k]:.4f} " for k in ks)
        nd = "NDCG    " + "  ".join(f"{self.ndcg[k]:.4f} " for k in ks)
        return f"[{self.protocol}] users={self.n_users}\n{head}\n{hr}\n{nd}\n"
