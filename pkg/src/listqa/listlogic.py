"""List vocabularies, condition-list deduction and the seeded status sampler."""
from __future__ import annotations

import enum
import itertools
import random
from dataclasses import dataclass, field


class ListLogicError(ValueError):
    pass


class EmptyStatuses(ListLogicError):
    pass


class NOutOfRange(ListLogicError):
    pass


class MissingRelation(ListLogicError):
    pass


class MissingListType(ListLogicError):
    pass


class _Token(str, enum.Enum):
    """Enum whose value is the lowercase wire token."""

    @classmethod
    def parse(cls, text: str):
        key = " ".join(text.strip().lower().replace("-", " ").replace("_", " ").split())
        for member in cls:
            if key in (member.value.replace("-", " "), member.label.lower().replace("-", " ")):
                return member
        raise ValueError(f"unknown {cls.__name__} token: {text!r}")

    @property
    def label(self) -> str:
        return self.value.capitalize()

    def __str__(self) -> str:
        return self.value


class ListType(_Token):
    CONDITION = "condition"
    STEP = "step"
    OPTION = "option"
    NON_ACTION_INFO = "non-action info"

    @property
    def label(self) -> str:
        return "Non-Action Info" if self is ListType.NON_ACTION_INFO else self.value.capitalize()


class LogicalRelation(_Token):
    AND = "and"
    OR = "or"


class UserItemStatus(_Token):
    SUPPORTED = "supported"
    CONTRADICTED = "contradicted"
    UNKNOWN = "unknown"


class ShortAnswer(_Token):
    YES = "yes"
    NO = "no"
    UNCERTAIN = "uncertain"


def deduce_answer(relation: LogicalRelation, statuses) -> ShortAnswer:
    """Conclude yes/no/uncertain from a condition list's relation and item statuses.

    Kleene strong conjunction (And) or disjunction (Or) over
    Supported=true, Contradicted=false, Unknown=unknown.
    """
    statuses = list(statuses)
    if not statuses:
        raise EmptyStatuses("at least one user-to-item status is required")
    if relation is LogicalRelation.AND:
        if UserItemStatus.CONTRADICTED in statuses:
            return ShortAnswer.NO
        if all(s is UserItemStatus.SUPPORTED for s in statuses):
            return ShortAnswer.YES
        return ShortAnswer.UNCERTAIN
    if relation is LogicalRelation.OR:
        if UserItemStatus.SUPPORTED in statuses:
            return ShortAnswer.YES
        if all(s is UserItemStatus.CONTRADICTED for s in statuses):
            return ShortAnswer.NO
        return ShortAnswer.UNCERTAIN
    raise MissingRelation(f"not a logical relation: {relation!r}")


def enumerate_answer_table(relation: LogicalRelation, n: int) -> dict[tuple[UserItemStatus, ...], ShortAnswer]:
    if not 1 <= n <= 6:
        raise NOutOfRange(f"n must be in [1, 6], got {n}")
    return {
        vector: deduce_answer(relation, vector)
        for vector in itertools.product(list(UserItemStatus), repeat=n)
    }


@dataclass(frozen=True)
class StatusAssignment:
    passage_id: str
    block_index: int
    items: tuple[tuple[int, UserItemStatus], ...] = ()
    deduced_answer: ShortAnswer | None = None
    seed: int = 0
    list_type: ListType | None = field(default=None, compare=False)

    @property
    def per_item(self) -> dict[int, UserItemStatus]:
        return dict(self.items)

    def to_json(self) -> dict:
        return {
            "passage_id": self.passage_id,
            "block_index": self.block_index,
            "items": [{"line_id": lid, "status": s.value} for lid, s in self.items],
            "answer": self.deduced_answer.value if self.deduced_answer else None,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> StatusAssignment:
        answer = data.get("answer")
        return cls(
            passage_id=data["passage_id"],
            block_index=int(data["block_index"]),
            items=tuple((int(it["line_id"]), UserItemStatus(it["status"])) for it in data.get("items", [])),
            deduced_answer=ShortAnswer(answer) if answer else None,
            seed=int(data.get("seed", 0)),
        )


MAX_CONDITION_ITEMS = 3


def sample_status_assignment(
    block,
    list_type: ListType | None,
    relation: LogicalRelation | None,
    seed: int,
    *,
    passage_id: str = "",
    block_index: int = 0,
) -> StatusAssignment:
    """Assign user-to-item statuses to a list block, deterministically from ``seed``.

    Condition lists get 1..3 annotated items with uniform statuses and a
    deduced answer. Step lists mark one item that is not the last one (so a
    next step exists), option lists mark any one item, and non-action lists
    get no user background at all.
    """
    if list_type is None:
        raise MissingListType("list type must be classified before sampling")
    items = list(block.item_line_ids)
    if not items:
        raise ListLogicError("list block has no items")
    if list_type is ListType.CONDITION and relation is None:
        raise MissingRelation("condition lists need a logical relation")
    if list_type is not ListType.CONDITION and relation is not None:
        raise ListLogicError(f"logical relation given for a {list_type.value} list")

    rng = random.Random(seed)
    common = dict(passage_id=passage_id, block_index=block_index, seed=seed, list_type=list_type)
    n = len(items)
    if list_type is ListType.CONDITION:
        k = rng.randint(1, min(MAX_CONDITION_ITEMS, n))
        chosen = sorted(rng.sample(range(n), k))
        statuses = [rng.choice(list(UserItemStatus)) for _ in chosen]
        return StatusAssignment(
            items=tuple((items[i], s) for i, s in zip(chosen, statuses)),
            deduced_answer=deduce_answer(relation, statuses),
            **common,
        )
    if list_type is ListType.STEP:
        index = rng.randrange(n - 1) if n >= 2 else 0
        return StatusAssignment(items=((items[index], UserItemStatus.SUPPORTED),), **common)
    if list_type is ListType.OPTION:
        index = rng.randrange(n)
        return StatusAssignment(items=((items[index], UserItemStatus.SUPPORTED),), **common)
    return StatusAssignment(**common)


def check_assignment(assignment: StatusAssignment, block, list_type: ListType, relation: LogicalRelation | None) -> None:
    """Raise ListLogicError if ``assignment`` violates the invariants for its block."""
    keys = [lid for lid, _ in assignment.items]
    if len(set(keys)) != len(keys):
        raise ListLogicError("duplicate line ids in assignment")
    if not set(keys) <= set(block.item_line_ids):
        raise ListLogicError(f"assignment references lines outside the block: {keys}")
    if list_type is ListType.CONDITION:
        if not keys or relation is None:
            raise ListLogicError("condition assignment needs statuses and a relation")
        expected = deduce_answer(relation, [s for _, s in assignment.items])
        if assignment.deduced_answer is not expected:
            raise ListLogicError(f"deduced answer {assignment.deduced_answer} != {expected}")
    elif list_type in (ListType.STEP, ListType.OPTION):
        if len(keys) != 1:
            raise ListLogicError(f"{list_type.value} assignment must mark exactly one item")
    elif keys:
        raise ListLogicError("non-action info assignment must be empty")
