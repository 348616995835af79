"""Interaction log loading and evaluation splits.

Users and items are re-indexed densely (0-based, order of first appearance
in the file).  Histories are kept in timestamp order when timestamps are
available, file order otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DatasetError",
    "InteractionDataset",
    "DatasetSplit",
    "load_interactions",
    "leave_one_out_split",
    "hold_out_unseen_users",
    "reveal_unseen",
    "truncate_and_shuffle_history",
]

FORMATS = ("tsv", "movielens-dat")


class DatasetError(ValueError):
    """Raised for empty or malformed interaction files."""


@dataclass
class InteractionDataset:
    user_ids: list[str]
    item_ids: list[str]
    # per user: list of (item index, timestamp rank)
    interactions: list[list[tuple[int, int]]]

    def __post_init__(self):
        self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        self.item_index = {v: j for j, v in enumerate(self.item_ids)}

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_interactions(self) -> int:
        return sum(len(h) for h in self.interactions)

    def history(self, user: int) -> list[int]:
        return [j for j, _ in self.interactions[user]]

    def stats(self) -> dict:
        n, m, e = self.n_users, self.n_items, self.n_interactions
        return {"users": n, "items": m, "interactions": e,
                "density": 100.0 * e / (n * m) if n and m else 0.0}


@dataclass
class DatasetSplit:
    """Per-user train/validation/test assignment.

    ``held_out`` carries the non-test history of unseen users.  It is kept
    out of ``train`` so that nothing trained on the split sees it; the
    refresh path moves it back in with :func:`reveal_unseen`.
    """

    n_users: int
    n_items: int
    train: list[list[int]]
    validation: list[int | None]
    test: list[int | None]
    unseen_users: set[int] = field(default_factory=set)
    unseen_items: set[int] = field(default_factory=set)
    held_out: dict[int, list[int]] = field(default_factory=dict)

    def test_users(self) -> list[int]:
        return [u for u in range(self.n_users)
                if self.test[u] is not None and u not in self.unseen_users]

    def train_sets(self) -> list[set[int]]:
        return [set(items) for items in self.train]

    def full_history(self, user: int) -> list[int]:
        items = list(self.held_out.get(user, self.train[user]))
        for extra in (self.validation[user], self.test[user]):
            if extra is not None:
                items.append(extra)
        return items

    @property
    def n_train(self) -> int:
        return sum(len(t) for t in self.train)


def _parse_line(line: str, fmt: str):
    if fmt == "movielens-dat":
        fields = line.split("::")
    else:
        fields = line.split()
    if len(fields) < 2 or len(fields) > 4 or not fields[0] or not fields[1]:
        raise ValueError("expected 2 to 4 fields")
    ts = None
    if len(fields) >= 3:
        float(fields[2])  # rating: parsed for validation only
    if len(fields) == 4:
        ts = float(fields[3])
    return fields[0].strip(), fields[1].strip(), ts


def load_interactions(path, format: str = "tsv") -> InteractionDataset:
    """Read ``user item [rating] [timestamp]`` records into a dense dataset.

    A first line that does not parse as a record is treated as a column
    header and skipped (the HetRec and RecBole dumps carry one).  Any later
    malformed line raises :class:`DatasetError` naming its line number.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    records = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            records.append(_parse_line(line, format))
        except ValueError as exc:
            if lineno == 1:
                continue
            raise DatasetError(f"{path}:{lineno}: cannot parse record ({exc}): {raw!r}") from None
    if not records:
        raise DatasetError(f"{path}: no valid interaction records")

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    per_user: dict[int, list[tuple[float, int, int]]] = {}
    has_ts = all(r[2] is not None for r in records)
    for order, (u, v, ts) in enumerate(records):
        ui = user_index.setdefault(u, len(user_index))
        vi = item_index.setdefault(v, len(item_index))
        key = ts if has_ts else float(order)
        per_user.setdefault(ui, []).append((key, order, vi))

    interactions = []
    for ui in range(len(user_index)):
        seen = set()
        hist = []
        for _, _, vi in sorted(per_user[ui]):
            if vi in seen:
                continue
            seen.add(vi)
            hist.append((vi, len(hist)))
        interactions.append(hist)
    return InteractionDataset(list(user_index), list(item_index), interactions)


def _loo(history: list[int], use_validation: bool):
    if len(history) < 2:
        return list(history), None, None
    if use_validation and len(history) >= 3:
        return list(history[:-2]), history[-2], history[-1]
    return list(history[:-1]), None, history[-1]


def leave_one_out_split(ds: InteractionDataset, use_validation: bool = False) -> DatasetSplit:
    if ds.n_users == 0:
        raise DatasetError("cannot split an empty dataset")
    train, val, test = [], [], []
    for u in range(ds.n_users):
        tr, va, te = _loo(ds.history(u), use_validation)
        train.append(tr)
        val.append(va)
        test.append(te)
    return DatasetSplit(ds.n_users, ds.n_items, train, val, test)


def hold_out_unseen_users(ds: InteractionDataset, fraction: float,
                          use_validation: bool = False) -> DatasetSplit:
    """Hide the least active ``ceil(fraction * n)`` users from training.

    Unseen users keep their last interaction as test item; the rest of their
    history goes to ``held_out``.  Items that only they interacted with are
    reported in ``unseen_items``.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    split = leave_one_out_split(ds, use_validation)
    count = math.ceil(fraction * ds.n_users - 1e-9)
    order = sorted(range(ds.n_users), key=lambda u: (len(ds.interactions[u]), u))
    unseen = set(order[:count])

    seen_items = set()
    for u in range(ds.n_users):
        if u not in unseen:
            seen_items.update(ds.history(u))
    for u in unseen:
        hist = ds.history(u)
        split.held_out[u] = hist[:-1] if len(hist) >= 2 else list(hist)
        split.test[u] = hist[-1] if len(hist) >= 2 else None
        split.validation[u] = None
        split.train[u] = []
    split.unseen_users = unseen
    split.unseen_items = {j for u in unseen for j in ds.history(u)} - seen_items
    return split


def reveal_unseen(split: DatasetSplit) -> DatasetSplit:
    """Training view after unseen users arrive: their held-out history joins train."""
    train = [list(t) for t in split.train]
    for u, items in split.held_out.items():
        train[u] = list(items)
    return DatasetSplit(split.n_users, split.n_items, train,
                        list(split.validation), list(split.test))


def truncate_and_shuffle_history(history, max_len: int, seed: int) -> list[int]:
    """Keep the ``max_len`` most recent items, then permute them with ``seed``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    kept = list(history)[-max_len:]
    perm = np.random.default_rng(seed).permutation(len(kept))
    return [kept[i] for i in perm]
