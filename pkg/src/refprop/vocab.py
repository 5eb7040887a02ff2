"""Fixed vocabulary and whitespace tokenizer for the prompt templates.

The vocabulary is hand-written and small on purpose: every word the prompt
templates can emit is listed here, so the text encoder never depends on a
pretrained tokenizer. Unknown words fall back to a dedicated UNK id.
"""

from __future__ import annotations

VOCAB_VERSION = "v1"

UNK_TOKEN = "<unk>"
UNK_ID = 0

# Template words first, then attribute values, then filler words kept for
# prompt variations. Order is frozen; ids are positions in this tuple.
WORDS = (
    UNK_TOKEN,
    "a",
    "an",
    "the",
    "image",
    "images",
    "sequence",
    "sequences",
    "showing",
    "structure",
    "object",
    "with",
    "shape",
    "region",
    "in",
    "of",
    "frame",
    "frames",
    # profile values
    "mass-like",
    "organ-like",
    "vessel-like",
    "cavity-like",
    # shape values and their adjectives
    "circle",
    "circular",
    "square",
    "triangle",
    "triangular",
    "ellipse",
    "elliptical",
    # intensity bands
    "dark",
    "mid",
    "bright",
    # filler for prompt variations
    "this",
    "that",
    "is",
    "on",
    "at",
    "and",
    "target",
    "referred",
    "moving",
    "deforming",
    "scene",
    "canvas",
    "visible",
    "outline",
    "solid",
    "hollow",
    "striped",
    "textured",
    "shaded",
    "small",
    "large",
    "round",
    "gray",
    "grey",
    "area",
    "spot",
    "body",
    "figure",
    "across",
    "over",
    "every",
)

assert len(WORDS) <= 256, "vocabulary must stay within 256 entries"

WORD_TO_ID = {w: i for i, w in enumerate(WORDS)}


def vocab_size() -> int:
    return len(WORDS)


def tokenize(text: str) -> list[int]:
    """Lowercase + whitespace tokenization against the fixed vocabulary.

    Unknown words map to UNK_ID; the empty string maps to an empty list.
    """
    return [WORD_TO_ID.get(word, UNK_ID) for word in text.lower().split()]


def detokenize(token_ids: list[int]) -> str:
    return " ".join(WORDS[i] if 0 <= i < len(WORDS) else UNK_TOKEN for i in token_ids)
