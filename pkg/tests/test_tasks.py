import numpy as np
import pytest
from hypothesis import given, strategies as st

from routed_steering import tasks as T
from routed_steering import vocab
from routed_steering.vocab import END, PAD

SPECS = T.default_specs()
spec_st = st.sampled_from(SPECS)


def inst(family="mod_add", seed=0):
    return T.make_instance(T.SkillSpec(family), seed)


@given(spec_st, st.integers(1, 30), st.integers(0, 5000))
def test_generation_is_deterministic(spec, n, seed):
    assert T.generate_tasks(spec, n, seed) == T.generate_tasks(spec, n, seed)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.skill_id)
def test_disjoint_seed_ranges_never_collide(spec):
    train = {x.prompt + x.gold for x in T.generate_tasks(spec, 5000, 0)}
    held = {x.prompt + x.gold for x in T.generate_tasks(spec, 5000, 5000)}
    assert len(train) == 5000 and len(held) == 5000
    assert not train & held


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.skill_id)
def test_gold_always_verifies_and_shortcut_differs(spec):
    xs = T.generate_tasks(spec, 2000, 0)
    assert all(T.verify(list(x.gold) + [END], x) == 1 for x in xs)
    wrong = np.mean([x.shortcut != x.gold for x in xs])
    assert wrong > 0.5


def test_exhausted_space_is_reported():
    spec = T.SkillSpec("mod_add")
    with pytest.raises(T.ExhaustedSpace):
        T.generate_tasks(spec, 10, spec.space_size - 5)
    with pytest.raises(ValueError):
        T.generate_tasks(spec, 0, 0)


def test_hurry_rate_is_roughly_respected():
    xs = T.generate_tasks(T.SkillSpec("max", 0.3), 4000, 0)
    assert abs(np.mean([x.hurried for x in xs]) - 0.3) < 0.03
    assert all(T.HURRY in x.prompt for x in xs if x.hurried)


# hand-built normalisation cases: (answer tokens, expected reward) for gold = (d3,)
D = vocab.DIGIT_IDS
NORMALISATION = [
    ([D[3], END], 1),
    ([D[3], END, D[4]], 1),
    ([D[3], END, END], 1),
    ([D[3], END, D[3], D[3], END], 1),
    ([PAD, D[3], END], 1),
    ([D[3], PAD, END], 1),
    ([D[3], END, PAD, PAD], 1),
    ([D[3], END] + [D[9]] * 10, 1),
    ([D[3], END, vocab.SEP], 1),
    ([D[3], END, vocab.BOS], 1),
    ([], 0),
    ([END], 0),
    ([D[3]], 0),
    ([D[4], END], 0),
    ([D[3], D[3], END], 0),
    ([D[4], END, D[3], END], 0),
    ([PAD, PAD], 0),
    ([vocab.SEP, D[3], END], 0),
    ([D[3], D[4]], 0),
    ([END, D[3], END], 0),
]


@pytest.mark.parametrize("answer,expected", NORMALISATION)
def test_verify_normalisation(answer, expected):
    x = T.TaskInstance(prompt=(vocab.BOS, D[1], vocab.SEP), gold=(D[3],), skill_id="mod_add", seed=0)
    assert T.verify(answer, x) == expected


@given(st.lists(st.integers(-5, 200), max_size=12))
def test_verify_is_total(tokens):
    assert T.verify(tokens, inst()) in (0, 1)


def test_verify_malformed_input_scores_zero():
    assert T.verify([None, "x"], inst()) == 0


@given(spec_st, st.integers(0, 4000), st.integers(0, 1))
def test_contrast_pair_payload_identity(spec, seed, variant):
    x = T.make_instance(spec, seed)
    pair = T.make_contrast_pair(x, variant)
    assert T.strip_prefix(pair.positive_prompt) == T.strip_prefix(pair.negative_prompt) == x.prompt
    assert pair.positive_prompt != pair.negative_prompt


def test_prefix_applied_exactly_once():
    pair = T.make_contrast_pair(inst())
    with pytest.raises(ValueError):
        T.apply_prefix(pair.positive_prompt, vocab.POSITIVE_PREFIXES[0])


def test_several_pairs_per_question():
    pairs = T.make_contrast_pairs(inst(), per_question=2)
    assert len(pairs) == 2 and len({p.positive_prompt for p in pairs}) == 2


def test_context_overflow_rejected():
    with pytest.raises(T.ContextOverflow):
        T.make_contrast_pair(inst(), max_context=4)


def test_quality_filter_reasons():
    x = inst()
    good = list(x.gold) + [END]
    bad = list(x.shortcut) + [END]
    assert T.quality_filter(good, bad, x) == T.FilterResult(True, "accepted")
    assert T.quality_filter(good, good, x).reason == "no reasoning gap"
    assert T.quality_filter(bad, bad, x).reason == "positive unsound"
    long_bad = list(x.shortcut) * 9 + [END]
    assert T.quality_filter(good, long_bad, x).reason == "structural parity"


@given(st.lists(st.integers(0, vocab.VOCAB_SIZE - 1), max_size=8),
       st.lists(st.integers(0, vocab.VOCAB_SIZE - 1), max_size=8), spec_st, st.integers(0, 3000))
def test_filter_acceptance_implies_gap(pos, neg, spec, seed):
    x = T.make_instance(spec, seed)
    if T.quality_filter(pos, neg, x).accepted:
        assert T.verify(pos, x) == 1 and T.verify(neg, x) == 0


def test_pretrain_batch_masks_answers_only():
    rng = np.random.default_rng(0)
    tokens, targets, mask = T.pretrain_batch(SPECS, (0, 1000), 8, rng)
    assert tokens.shape == targets.shape == mask.shape
    assert np.all(targets[mask > 0] != PAD)
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_task_dump_roundtrip(tmp_path):
    xs = T.generate_tasks(T.SkillSpec("lookup"), 20, 100)
    p = tmp_path / "dump.jsonl"
    T.dump_tasks(xs, p)
    assert T.load_task_dump(p) == xs
