"""Synthetic multi-skill tasks, contrast pairs and programmatic verification.

Every family has a finite content space enumerated by a keyed bijection of
the instance seed, so disjoint seed ranges can never produce the same prompt.
A seeded fraction of prompts carries the ``~`` distractor marker. During
pretraining the marker makes the model fall back to a family-specific
shortcut answer most of the time, which is what leaves room for steering.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import vocab
from .vocab import BOS, END, HURRY, PAD, QUERY, SEP

FAMILIES = ("mod_add", "reverse", "parity", "max", "lookup", "pattern")
SKILL_TOKEN = dict(zip(FAMILIES, vocab.encode(vocab.SKILL_TOKENS)))
_PATTERN_ALPHABET = vocab.DIGIT_IDS + vocab.LETTER_IDS


class ExhaustedSpace(ValueError):
    pass


class ContextOverflow(ValueError):
    pass


@dataclass(frozen=True)
class SkillSpec:
    skill_id: str
    hurry_rate: float = 0.5

    def __post_init__(self):
        if self.skill_id not in FAMILIES:
            raise ValueError(f"unknown skill family {self.skill_id!r}")
        if not 0.0 <= self.hurry_rate <= 1.0:
            raise ValueError("hurry_rate must lie in [0, 1]")

    @property
    def space_size(self) -> int:
        return _SPACE[self.skill_id]

    @property
    def chance(self) -> float:
        return _CHANCE[self.skill_id]


@dataclass(frozen=True)
class TaskInstance:
    prompt: tuple[int, ...]
    gold: tuple[int, ...]
    skill_id: str
    seed: int
    hurried: bool = False
    shortcut: tuple[int, ...] = field(default=(), compare=False)

    @property
    def payload(self) -> tuple[int, ...]:
        """The question without BOS (what framing prefixes are prepended to)."""
        return self.prompt[1:]


@dataclass(frozen=True)
class ContrastPair:
    base: TaskInstance
    positive_prompt: tuple[int, ...]
    negative_prompt: tuple[int, ...]
    variant: int


# -- content spaces -------------------------------------------------------------
def _digits(index: int, n: int) -> list[int]:
    out = []
    for _ in range(n):
        index, r = divmod(index, 10)
        out.append(r)
    return out[::-1]


MOD_ADD_OFFSET = 3


def _decode_mod_add(i):
    xs = _digits(i, 4)
    # answer: second digit plus a fixed offset, mod 10; shortcut forgets the offset
    return ([vocab.DIGIT_IDS[x] for x in xs], [vocab.DIGIT_IDS[(xs[1] + MOD_ADD_OFFSET) % 10]],
            [vocab.DIGIT_IDS[xs[1]]])


def _decode_reverse(i):
    xs = [vocab.DIGIT_IDS[x] for x in _digits(i, 4)]
    return xs, xs[::-1], list(xs)


def _decode_parity(i):
    a, r = divmod(i, 5)
    xs = _digits(a, 4)
    # parity of the first digit; the last digit always has the other parity and is the shortcut
    xs.append(2 * r + 1 - xs[0] % 2)
    return ([vocab.DIGIT_IDS[x] for x in xs], [vocab.DIGIT_IDS[xs[0] % 2]], [vocab.DIGIT_IDS[xs[-1] % 2]])


def _decode_max(i):
    xs = _digits(i, 4)
    return [vocab.DIGIT_IDS[x] for x in xs], [vocab.DIGIT_IDS[max(xs)]], [vocab.DIGIT_IDS[xs[0]]]


def _decode_lookup(i):
    i, q = divmod(i, 4)
    xs = _digits(i, 4)
    # "? c" asks for the third value; shortcut answers with the last one
    payload = [vocab.DIGIT_IDS[x] for x in xs] + [QUERY, vocab.LETTER_IDS[q]]
    return payload, [vocab.DIGIT_IDS[xs[q]]], [vocab.DIGIT_IDS[xs[-1]]]


_N_SYM = len(_PATTERN_ALPHABET)
_PERIOD2 = _N_SYM * (_N_SYM - 1)


def _decode_pattern(i):
    if i < _PERIOD2:
        a, b = divmod(i, _N_SYM - 1)
        b = b + (b >= a)
        cycle = [a, b]
    else:
        j = i - _PERIOD2
        a, rest = divmod(j, (_N_SYM - 1) * (_N_SYM - 2))
        b, c = divmod(rest, _N_SYM - 2)
        others = [s for s in range(_N_SYM) if s != a]
        b = others[b]
        others = [s for s in others if s != b]
        c = others[c]
        cycle = [a, b, c]
    seq = [cycle[k % len(cycle)] for k in range(8)]
    toks = [_PATTERN_ALPHABET[s] for s in seq]
    return toks[:7], [toks[7]], [toks[6]]


_DECODERS = {
    "mod_add": _decode_mod_add,
    "reverse": _decode_reverse,
    "parity": _decode_parity,
    "max": _decode_max,
    "lookup": _decode_lookup,
    "pattern": _decode_pattern,
}
_SPACE = {
    "mod_add": 10_000,
    "reverse": 10_000,
    "parity": 50_000,
    "max": 10_000,
    "lookup": 40_000,
    "pattern": _PERIOD2 + _N_SYM * (_N_SYM - 1) * (_N_SYM - 2),
}
_CHANCE = {"mod_add": 0.1, "reverse": 1e-4, "parity": 0.5, "max": 0.1, "lookup": 0.1, "pattern": 1 / _N_SYM}


def _key(*parts) -> int:
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


def _bijection(skill_id: str, seed: int) -> int:
    """Keyed affine permutation of ``range(space)``."""
    n = _SPACE[skill_id]
    a = _key("mult", skill_id) % n
    while math.gcd(a, n) != 1 or a < 2:
        a = (a + 1) % n
    b = _key("shift", skill_id) % n
    return (a * seed + b) % n


def _hurried(skill_id: str, seed: int, rate: float) -> bool:
    return (_key("hurry", skill_id, seed) % 1_000_003) / 1_000_003 < rate


def make_instance(spec: SkillSpec, seed: int) -> TaskInstance:
    if not 0 <= seed < spec.space_size:
        raise ExhaustedSpace(
            f"{spec.skill_id}: instance seed {seed} outside the content space of size {spec.space_size}")
    payload, gold, shortcut = _DECODERS[spec.skill_id](_bijection(spec.skill_id, seed))
    hurried = _hurried(spec.skill_id, seed, spec.hurry_rate)
    prompt = [BOS, SKILL_TOKEN[spec.skill_id]] + ([HURRY] if hurried else []) + payload + [SEP]
    return TaskInstance(tuple(prompt), tuple(gold), spec.skill_id, seed, hurried, tuple(shortcut))


def generate_tasks(spec: SkillSpec, n: int, seed: int) -> list[TaskInstance]:
    """Instances with seeds ``seed, seed+1, ..., seed+n-1``; distinct by construction."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if seed < 0 or seed + n > spec.space_size:
        raise ExhaustedSpace(
            f"{spec.skill_id}: requested seeds [{seed}, {seed + n}) but the space holds {spec.space_size}")
    return [make_instance(spec, s) for s in range(seed, seed + n)]


def default_specs(hurry_rate: float = 0.5) -> list[SkillSpec]:
    return [SkillSpec(f, hurry_rate) for f in FAMILIES]


# -- verification -----------------------------------------------------------------
def extract_answer(tokens: Iterable[int]) -> tuple[int, ...]:
    """Tokens before the first answer delimiter, ignoring padding.

    Without a delimiter there is no committed answer and the result is empty.
    """
    out = []
    for t in tokens:
        t = int(t)
        if t == END:
            return tuple(out)
        if t != PAD:
            out.append(t)
    return ()


def verify(answer: Iterable[int], instance: TaskInstance) -> int:
    """Reward 1 iff the delimited answer equals the gold answer."""
    try:
        got = extract_answer(answer)
    except (TypeError, ValueError):
        return 0
    return int(len(got) > 0 and got == instance.gold)


# -- contrast pairs -----------------------------------------------------------------
def apply_prefix(prompt: tuple[int, ...], prefix: int) -> tuple[int, ...]:
    if prompt[:1] != (BOS,):
        raise ValueError("prompt must start with <bos>")
    if any(t in vocab.FRAMING_IDS for t in prompt):
        raise ValueError("prompt already carries a framing prefix; prefixes are applied exactly once")
    return (BOS, prefix) + prompt[1:]


def strip_prefix(prompt: tuple[int, ...]) -> tuple[int, ...]:
    if len(prompt) > 1 and prompt[1] in vocab.FRAMING_IDS:
        return (prompt[0],) + prompt[2:]
    return prompt


def make_contrast_pair(instance: TaskInstance, variant: int = 0, max_context: int = 128) -> ContrastPair:
    if not 0 <= variant < len(vocab.POSITIVE_PREFIXES):
        raise ValueError(f"prefix variant must be in [0, {len(vocab.POSITIVE_PREFIXES)})")
    pos = apply_prefix(instance.prompt, vocab.POSITIVE_PREFIXES[variant])
    neg = apply_prefix(instance.prompt, vocab.NEGATIVE_PREFIXES[variant])
    if len(pos) > max_context:
        raise ContextOverflow(f"framed prompt of length {len(pos)} exceeds max_context {max_context}")
    return ContrastPair(instance, pos, neg, variant)


def make_contrast_pairs(instance: TaskInstance, per_question: int = 2, max_context: int = 128) -> list[ContrastPair]:
    return [make_contrast_pair(instance, k, max_context) for k in range(per_question)]


@dataclass(frozen=True)
class FilterResult:
    accepted: bool
    reason: str


def quality_filter(pos_gen, neg_gen, instance: TaskInstance, band: tuple[float, float] = (0.5, 2.0)) -> FilterResult:
    """Keep a pair only if the positive generation is right, the negative one is
    wrong, and their lengths are comparable."""
    pos_ok = verify(pos_gen, instance)
    neg_ok = verify(neg_gen, instance)
    if not pos_ok:
        return FilterResult(False, "positive unsound")
    if neg_ok:
        return FilterResult(False, "no reasoning gap")
    lp, ln = len(list(pos_gen)), len(list(neg_gen))
    ratio = ln / lp if lp else math.inf
    if not band[0] <= ratio <= band[1]:
        return FilterResult(False, "structural parity")
    return FilterResult(True, "accepted")


# -- pretraining stream ----------------------------------------------------------------
@dataclass(frozen=True)
class PretrainMix:
    """How framed and plain sequences are mixed during pretraining."""
    plain: float = 0.6
    positive: float = 0.2
    negative: float = 0.2
    hurried_shortcut_rate: float = 0.8


def training_sequence(instance: TaskInstance, mode: str, rng: np.random.Generator,
                      mix: PretrainMix, variant: int = 0) -> tuple[list[int], int]:
    """Token sequence and the index of the first answer token."""
    if mode == "positive":
        prompt, answer = apply_prefix(instance.prompt, vocab.POSITIVE_PREFIXES[variant]), instance.gold
    elif mode == "negative":
        prompt, answer = apply_prefix(instance.prompt, vocab.NEGATIVE_PREFIXES[variant]), instance.shortcut
    else:
        prompt = instance.prompt
        use_shortcut = instance.hurried and rng.random() < mix.hurried_shortcut_rate
        answer = instance.shortcut if use_shortcut else instance.gold
    return list(prompt) + list(answer) + [END], len(prompt)


def pretrain_batch(specs: list[SkillSpec], seed_range: tuple[int, int], batch_size: int,
                   rng: np.random.Generator, mix: PretrainMix = PretrainMix()):
    """Right-padded ``(tokens, targets, loss_mask)`` for next-token training on answers."""
    seqs, starts = [], []
    modes = np.array(["plain", "positive", "negative"])
    probs = np.array([mix.plain, mix.positive, mix.negative])
    for _ in range(batch_size):
        spec = specs[rng.integers(len(specs))]
        inst = make_instance(spec, int(rng.integers(*seed_range)))
        mode = modes[rng.choice(3, p=probs / probs.sum())]
        seq, start = training_sequence(inst, mode, rng, mix, int(rng.integers(len(vocab.POSITIVE_PREFIXES))))
        seqs.append(seq)
        starts.append(start)
    T = max(len(s) for s in seqs)
    tokens = np.full((batch_size, T), PAD, dtype=np.int64)
    mask = np.zeros((batch_size, T - 1))
    for b, (s, st) in enumerate(zip(seqs, starts)):
        tokens[b, :len(s)] = s
        mask[b, st - 1:len(s) - 1] = 1.0
    return tokens[:, :-1], tokens[:, 1:], mask


# -- task dump ----------------------------------------------------------------------------
def dump_tasks(instances: Iterable[TaskInstance], path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            rec = {"skill_id": inst.skill_id, "seed": inst.seed,
                   "prompt": vocab.decode(inst.prompt), "gold": vocab.decode(inst.gold)}
            fh.write(json.dumps(rec) + "\n")


def load_task_dump(path, hurry_rate: float = 0.5) -> list[TaskInstance]:
    """Replay a dump by regenerating each record from its seed and checking it."""
    out = []
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        inst = make_instance(SkillSpec(rec["skill_id"], hurry_rate), rec["seed"])
        if vocab.decode(inst.prompt) != rec["prompt"] or vocab.decode(inst.gold) != rec["gold"]:
            raise ValueError(f"dump record for {rec['skill_id']}#{rec['seed']} does not replay")
        out.append(inst)
    return out
