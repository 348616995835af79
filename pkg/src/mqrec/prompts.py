"""Hybrid vocabulary, prompt templates and prompt rendering.

Token ids are laid out as ``[lexicon words | hash buckets | user OOV | item OOV]``.
OOV token ``<u{k}-{l}>`` is codeword ``l`` of user sub-codebook ``k``; both
indices are printed 1-based, ids are assigned row-major over ``(k, l)``.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .tokenizer import TokenTuple

__all__ = [
    "Vocabulary",
    "PromptTemplate",
    "RenderedPrompt",
    "TEMPLATES",
    "UNSEEN_TEMPLATE",
    "USER_ONLY_TEMPLATE",
    "build_vocabulary",
    "encode_text_tokens",
    "render_prompt",
    "load_templates",
    "save_templates",
]

MAX_PROMPT_LEN = 512
HASH_BUCKETS = 4096

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


@dataclass(frozen=True)
class PromptTemplate:
    id: int
    text: str
    split: str = "seen"
    requires_history: bool = False

    def __post_init__(self):
        if self.split not in ("seen", "unseen"):
            raise ValueError(f"template split must be seen/unseen, got {self.split!r}")
        if self.text.count("{user}") != 1:
            raise ValueError(f"template {self.id} needs exactly one {{user}} placeholder")
        if ("{items}" in self.text) != self.requires_history or self.text.count("{items}") > 1:
            raise ValueError(f"template {self.id}: {{items}} placeholder must appear once iff history is required")


# 0 and 1 are the two published prompts; 2-9 are paraphrases; 10 is held out.
TEMPLATES = (
    PromptTemplate(0, "I wonder what the user_{user} will like. Can you help me decide?"),
    PromptTemplate(1, "According to what items the user_{user} has interacted with: {items}. "
                      "Can you describe the user's preferences?", requires_history=True),
    PromptTemplate(2, "What should we recommend to user_{user} next?"),
    PromptTemplate(3, "Which items would user_{user} enjoy the most?"),
    PromptTemplate(4, "Please suggest some items for user_{user}."),
    PromptTemplate(5, "Predict the next item that user_{user} will interact with."),
    PromptTemplate(6, "User_{user} has interacted with the following items: {items}. "
                      "What else might the user like?", requires_history=True),
    PromptTemplate(7, "Given that user_{user} liked {items}, recommend more items for this user.",
                   requires_history=True),
    PromptTemplate(8, "Here is the history of user_{user}: {items}. Which item comes next?",
                   requires_history=True),
    PromptTemplate(9, "The items {items} were chosen by user_{user}. Find similar items the user may like.",
                   requires_history=True),
    PromptTemplate(10, "Considering the items {items} that user_{user} engaged with, "
                       "what would this user prefer to see?", split="unseen", requires_history=True),
)
UNSEEN_TEMPLATE = 10
USER_ONLY_TEMPLATE = 0


def _lexicon_from_templates(templates) -> list[str]:
    words = []
    for t in templates:
        text = t.text.replace("{user}", " ").replace("{items}", " ")
        for w in _WORD_RE.findall(text.lower()):
            if w not in words:
                words.append(w)
    return words


BASE_LEXICON = tuple(["<pad>", "<unk>"] + _lexicon_from_templates(TEMPLATES))


@dataclass
class Vocabulary:
    K: int
    L: int
    words: dict
    hash_buckets: int

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def user_offset(self) -> int:
        return self.n_words + self.hash_buckets

    @property
    def item_offset(self) -> int:
        return self.user_offset + self.K * self.L

    @property
    def size(self) -> int:
        return self.item_offset + self.K * self.L

    @property
    def n_oov(self) -> int:
        return 2 * self.K * self.L

    def oov_id(self, side: str, k: int, code: int) -> int:
        """Token id of codeword ``code`` (0-based) in sub-codebook ``k`` (0-based)."""
        if not (0 <= k < self.K and 0 <= code < self.L):
            raise ValueError(f"OOV index ({k}, {code}) outside K={self.K}, L={self.L}")
        base = self.user_offset if side == "user" else self.item_offset
        return base + k * self.L + code

    def oov_name(self, token_id: int) -> str:
        if token_id < self.user_offset or token_id >= self.size:
            raise ValueError(f"token {token_id} is not an OOV token")
        side = "u" if token_id < self.item_offset else "v"
        rel = token_id - (self.user_offset if side == "u" else self.item_offset)
        k, code = divmod(rel, self.L)
        return f"<{side}{k + 1}-{code + 1}>"

    def token_class(self, token_id: int) -> str:
        if token_id < self.n_words:
            return "word"
        if token_id < self.user_offset:
            return "bucket"
        if token_id < self.item_offset:
            return "user"
        if token_id < self.size:
            return "item"
        raise ValueError(f"token id {token_id} outside vocabulary of size {self.size}")

    def codes_of(self, token_ids) -> tuple:
        """Inverse of :meth:`oov_id` over one entity's K tokens."""
        out = []
        for k, tid in enumerate(token_ids):
            base = self.user_offset if self.token_class(tid) == "user" else self.item_offset
            kk, code = divmod(tid - base, self.L)
            if kk != k:
                raise ValueError("OOV tokens out of sub-codebook order")
            out.append(code)
        return tuple(out)


@dataclass
class RenderedPrompt:
    token_ids: list
    id_spans: list = field(default_factory=list)  # (side, start) of each K-token group
    template_id: int = -1


def build_vocabulary(K: int, L: int, base_lexicon=BASE_LEXICON, hash_buckets: int = HASH_BUCKETS) -> Vocabulary:
    if K < 1 or L < 1:
        raise ValueError("K and L must be >= 1")
    words = {}
    for w in base_lexicon:
        words.setdefault(w, len(words))
    return Vocabulary(K, L, words, hash_buckets)


def encode_text_tokens(text: str, vocab: Vocabulary) -> list[int]:
    """Lowercase word-level tokenization; unknown words hash to a fixed bucket."""
    ids = []
    for w in _WORD_RE.findall(text.lower()):
        tid = vocab.words.get(w)
        if tid is None:
            tid = vocab.n_words + zlib.crc32(w.encode("utf-8")) % vocab.hash_buckets
        ids.append(tid)
    return ids


def _entity_tokens(t, side: str, vocab: Vocabulary) -> list[int]:
    codes = t.codes if isinstance(t, TokenTuple) else t
    if len(codes) != vocab.K:
        raise ValueError(f"expected {vocab.K} codes per entity, got {len(codes)}")
    return [vocab.oov_id(side, k, int(c)) for k, c in enumerate(codes)]


def render_prompt(t: PromptTemplate, user, history, vocab: Vocabulary,
                  max_len: int = MAX_PROMPT_LEN) -> RenderedPrompt:
    """Fill a template with the user's OOV tokens and, if required, the history's.

    ``user`` and each history entry are TokenTuples or plain code sequences.
    History items are emitted comma-separated in the order given.  When the
    full history would overflow ``max_len``, trailing history entries are
    dropped; callers pass an already shuffled history, so the kept part is a
    random subset.
    """
    if t.requires_history and not history:
        raise ValueError(f"template {t.id} requires a non-empty interaction history")
    if not t.requires_history and history:
        raise ValueError(f"template {t.id} takes no interaction history")
    comma = vocab.words.get(",")
    parts = [p for p in re.split(r"(\{user\}|\{items\})", t.text) if p]
    words = {i: encode_text_tokens(p, vocab) for i, p in enumerate(parts) if p not in ("{user}", "{items}")}
    fixed = sum(len(w) for w in words.values()) + vocab.K
    if history:
        fit = (max_len - fixed + 1) // (vocab.K + 1)
        if fit < 1:
            raise ValueError(f"template {t.id} cannot fit one history item in {max_len} tokens")
        history = list(history)[:fit]
    ids: list[int] = []
    spans: list = []
    for i, part in enumerate(parts):
        if part == "{user}":
            spans.append(("user", len(ids)))
            ids.extend(_entity_tokens(user, "user", vocab))
        elif part == "{items}":
            for n, item in enumerate(history):
                if n:
                    ids.append(comma)
                spans.append(("item", len(ids)))
                ids.extend(_entity_tokens(item, "item", vocab))
        else:
            ids.extend(words[i])
    if len(ids) > max_len:
        raise ValueError(f"rendered prompt has {len(ids)} tokens, limit is {max_len}")
    return RenderedPrompt(ids, spans, t.id)


def render_text(p: RenderedPrompt, vocab: Vocabulary) -> str:
    """Human-readable form with OOV tokens spelled ``<u1-128>``."""
    inv = {v: k for k, v in vocab.words.items()}
    out = []
    for tid in p.token_ids:
        cls = vocab.token_class(tid)
        if cls == "word":
            out.append(inv[tid])
        elif cls == "bucket":
            out.append(f"#{tid - vocab.n_words}")
        else:
            out.append(vocab.oov_name(tid))
    return " ".join(out)


def save_templates(path, templates=TEMPLATES) -> None:
    lines = [f"{t.id}\t{t.split}\t{str(t.requires_history).lower()}\t{t.text}" for t in templates]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_templates(path) -> tuple:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t", 3)
        if len(parts) != 4 or parts[2] not in ("true", "false"):
            raise ValueError(f"{path}:{lineno}: expected id<TAB>split<TAB>requires_history<TAB>text")
        out.append(PromptTemplate(int(parts[0]), parts[3], parts[1], parts[2] == "true"))
    if len(out) != 11 or sum(t.split == "unseen" for t in out) != 1:
        raise ValueError(f"{path}: catalog must hold 11 templates with exactly one unseen")
    return tuple(out)
