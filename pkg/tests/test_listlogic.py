from __future__ import annotations

import itertools

import pytest
from hypothesis import given, strategies as st

from listqa.corpus import ListBlock
from listqa.listlogic import (
    EmptyStatuses, ListType, LogicalRelation, MissingListType, MissingRelation, NOutOfRange,
    ShortAnswer, StatusAssignment, UserItemStatus, check_assignment, deduce_answer,
    enumerate_answer_table, sample_status_assignment,
)
from oracles import kleene

S, C, U = UserItemStatus.SUPPORTED, UserItemStatus.CONTRADICTED, UserItemStatus.UNKNOWN
AND, OR = LogicalRelation.AND, LogicalRelation.OR

# the six two-item rows of the published table
TABLE_ROWS = [
    (AND, [S, S], ShortAnswer.YES),
    (AND, [S, C], ShortAnswer.NO),
    (AND, [S, U], ShortAnswer.UNCERTAIN),
    (OR, [S, C], ShortAnswer.YES),
    (OR, [C, C], ShortAnswer.NO),
    (OR, [C, U], ShortAnswer.UNCERTAIN),
]

statuses = st.lists(st.sampled_from(list(UserItemStatus)), min_size=1, max_size=8)
relations = st.sampled_from(list(LogicalRelation))


@pytest.mark.parametrize("relation,items,expected", TABLE_ROWS)
def test_published_rows(relation, items, expected):
    assert deduce_answer(relation, items) is expected


def test_examples():
    assert deduce_answer(AND, [S]) is ShortAnswer.YES
    assert deduce_answer(OR, [U, U, S]) is ShortAnswer.YES


def test_empty_statuses():
    with pytest.raises(EmptyStatuses):
        deduce_answer(AND, [])


@pytest.mark.parametrize("relation", [AND, OR])
@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_matches_kleene_oracle(relation, n):
    for vector in itertools.product(list(UserItemStatus), repeat=n):
        expected = kleene(relation.value, [s.value for s in vector])
        assert deduce_answer(relation, vector).value == expected


def test_enumerate_table():
    table = enumerate_answer_table(AND, 1)
    assert table == {(S,): ShortAnswer.YES, (C,): ShortAnswer.NO, (U,): ShortAnswer.UNCERTAIN}
    for relation in (AND, OR):
        rows = enumerate_answer_table(relation, 2)
        assert len(rows) == 9
        for rel, items, expected in TABLE_ROWS:
            if rel is relation:
                assert rows[tuple(items)] is expected
    assert len(enumerate_answer_table(OR, 6)) == 3 ** 6
    for bad in (0, 7):
        with pytest.raises(NOutOfRange):
            enumerate_answer_table(AND, bad)


@given(relations, statuses, st.randoms())
def test_permutation_invariant(relation, items, rnd):
    shuffled = items[:]
    rnd.shuffle(shuffled)
    assert deduce_answer(relation, items) is deduce_answer(relation, shuffled)


@given(relations, statuses, st.data())
def test_monotone_in_unknown(relation, items, data):
    unknown_at = [i for i, s in enumerate(items) if s is U]
    if not unknown_at:
        return
    i = data.draw(st.sampled_from(unknown_at))
    before = deduce_answer(relation, items)
    after = deduce_answer(relation, items[:i] + [S] + items[i + 1:])
    assert {before, after} != {ShortAnswer.YES, ShortAnswer.NO}


def test_token_parsing_and_labels():
    assert ListType.parse("Non-Action Info") is ListType.NON_ACTION_INFO
    assert ListType.NON_ACTION_INFO.label == "Non-Action Info"
    assert UserItemStatus.parse(" contradicted ") is C
    assert LogicalRelation.AND.label == "And"
    with pytest.raises(ValueError):
        ShortAnswer.parse("maybe")


def block(n: int) -> ListBlock:
    return ListBlock(tuple(range(2, n + 2)), 1)


def find_seed(predicate, **kwargs):
    for seed in range(10_000):
        a = sample_status_assignment(seed=seed, **kwargs)
        if predicate(a):
            return a
    raise AssertionError("no seed found")


def test_condition_example_row():
    a = find_seed(lambda a: [s for _, s in a.items] == [S, C],
                  block=block(2), list_type=ListType.CONDITION, relation=AND)
    assert a.deduced_answer is ShortAnswer.NO


def test_non_action_is_empty():
    a = sample_status_assignment(block(3), ListType.NON_ACTION_INFO, None, 1)
    assert a.per_item == {} and a.deduced_answer is None


def test_step_avoids_last_and_is_deterministic():
    a = sample_status_assignment(block(3), ListType.STEP, None, 42)
    b = sample_status_assignment(block(3), ListType.STEP, None, 42)
    assert a == b
    assert len(a.per_item) == 1 and set(a.per_item) <= {2, 3}
    single = sample_status_assignment(block(1), ListType.STEP, None, 42)
    assert list(single.per_item) == [2]


@given(st.integers(1, 6), st.integers(0, 2 ** 32), relations)
def test_condition_sampling_invariants(n, seed, relation):
    a = sample_status_assignment(block(n), ListType.CONDITION, relation, seed)
    assert 1 <= len(a.items) <= min(3, n)
    assert set(a.per_item) <= set(block(n).item_line_ids)
    assert a.deduced_answer is deduce_answer(relation, [s for _, s in a.items])
    check_assignment(a, block(n), ListType.CONDITION, relation)
    assert a == sample_status_assignment(block(n), ListType.CONDITION, relation, seed)


@given(st.integers(1, 6), st.integers(0, 2 ** 32))
def test_option_marks_one(n, seed):
    a = sample_status_assignment(block(n), ListType.OPTION, None, seed)
    assert len(a.per_item) == 1 and set(a.per_item) <= set(block(n).item_line_ids)


def test_sampling_preconditions():
    with pytest.raises(MissingRelation):
        sample_status_assignment(block(2), ListType.CONDITION, None, 0)
    with pytest.raises(MissingListType):
        sample_status_assignment(block(2), None, None, 0)


def test_json_round_trip():
    a = sample_status_assignment(block(3), ListType.CONDITION, OR, 5, passage_id="x-p1", block_index=2)
    data = a.to_json()
    assert set(data) >= {"items", "answer", "seed"}
    assert all(set(i) == {"line_id", "status"} for i in data["items"])
    assert StatusAssignment.from_json(data) == a
