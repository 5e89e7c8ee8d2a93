"""Fixed symbol vocabulary shared by the task suite and the base model."""
from __future__ import annotations

SPECIALS = ["<pad>", "<bos>", "=", ".", "~", "?"]
FRAMING_POSITIVE = ["<rig0>", "<rig1>"]
FRAMING_NEGATIVE = ["<auto0>", "<auto1>"]
SKILL_TOKENS = ["ADD", "REV", "PAR", "MAX", "LOOK", "PAT"]
DIGITS = [str(i) for i in range(10)]
LETTERS = [chr(ord("a") + i) for i in range(16)]

_used = SPECIALS + FRAMING_POSITIVE + FRAMING_NEGATIVE + SKILL_TOKENS + DIGITS + LETTERS
VOCAB_SIZE = 64
TOKENS = _used + [f"<unused{i}>" for i in range(VOCAB_SIZE - len(_used))]
ID = {tok: i for i, tok in enumerate(TOKENS)}

PAD = ID["<pad>"]
BOS = ID["<bos>"]
SEP = ID["="]
END = ID["."]
HURRY = ID["~"]
QUERY = ID["?"]
POSITIVE_PREFIXES = [ID[t] for t in FRAMING_POSITIVE]
NEGATIVE_PREFIXES = [ID[t] for t in FRAMING_NEGATIVE]
FRAMING_IDS = frozenset(POSITIVE_PREFIXES + NEGATIVE_PREFIXES)
DIGIT_IDS = [ID[d] for d in DIGITS]
LETTER_IDS = [ID[c] for c in LETTERS]


def encode(symbols) -> list[int]:
    return [ID[s] for s in symbols]


def decode(ids) -> list[str]:
    return [TOKENS[int(i)] for i in ids]


def render(ids) -> str:
    return " ".join(decode(ids))
