"""Feature-expression DSL: transformation registry, parse trees, and the
reversible post-order string format.

A composed feature is a tree whose internal nodes are fixed-arity numeric
transformations and whose leaves are raw dataset columns.  Because every
transformation has a fixed arity, the post-order token sequence of a tree
can be parsed back without ambiguity, which makes the flat string a
faithful interchange format.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Transformation",
    "TransformationRegistry",
    "Leaf",
    "Apply",
    "ParseTree",
    "Vocabulary",
    "DslError",
    "UnknownToken",
    "StackUnderflow",
    "NonSingularResult",
    "default_registry",
    "order",
    "to_postorder",
    "parse_postorder",
    "canonical_form",
    "canonical_key",
    "enumerate_equivalents",
    "sample_random_tree",
    "sample_distinct_tree",
    "to_infix",
    "sanitize_feature_names",
    "is_stack_evaluable",
]

EPS = 1e-6

PAD, SOS, EOS = "<pad>", "<sos>", "<eos>"


class DslError(ValueError):
    """Base class for malformed feature strings."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at token position {position})")
        self.position = position


class UnknownToken(DslError):
    def __init__(self, token: str, position: int):
        super().__init__(f"unknown token {token!r}", position)
        self.token = token


class StackUnderflow(DslError):
    def __init__(self, token: str, position: int, needed: int, available: int):
        super().__init__(
            f"transformation {token!r} needs {needed} operands, only {available} on the stack",
            position,
        )


class NonSingularResult(DslError):
    def __init__(self, remaining: int, position: int):
        super().__init__(f"{remaining} values remain after parsing (expected 1)", position)


@dataclass(frozen=True)
class Transformation:
    """A named fixed-arity numeric function over feature columns.

    ``fn`` maps ``arity`` equal-length float arrays to one float array and is
    total on finite input (safeguards live in the implementations below).
    """

    name: str
    arity: int
    commutative: bool
    fn: Callable[..., np.ndarray] = field(compare=False)

    def __post_init__(self):
        if self.arity < 1:
            raise ValueError(f"arity must be positive, got {self.arity}")


def _t_log(u):
    return np.log(np.abs(u) + 1.0)


def _t_sqrt(u):
    return np.sqrt(np.abs(u))


def _t_min_max(u):
    lo, hi = u.min(), u.max()
    if hi == lo:
        return np.zeros_like(u)
    return (u - lo) / (hi - lo)


def _t_reciprocal(u):
    out = np.zeros_like(u)
    big = np.abs(u) >= EPS
    out[big] = 1.0 / u[big]
    small = (~big) & (u != 0)
    out[small] = np.sign(u[small]) / EPS
    return out


def _guard_divisor(v):
    guarded = v.copy()
    tiny = np.abs(v) < EPS
    sign = np.sign(v[tiny])
    sign[sign == 0] = 1.0
    guarded[tiny] = EPS * sign
    return guarded


def _t_divide(u, v):
    return u / _guard_divisor(v)


def _t_modulo(u, v):
    return np.fmod(u, _guard_divisor(v))


class TransformationRegistry:
    """Ordered, name-unique collection of transformations.

    Listing order is stable so token ids derived from a registry never move.
    """

    def __init__(self, transformations: Sequence[Transformation]):
        names = [t.name for t in transformations]
        if len(set(names)) != len(names):
            raise ValueError("duplicate transformation names")
        self.transformations = tuple(transformations)
        self._by_name = {t.name: t for t in transformations}

    def __len__(self):
        return len(self.transformations)

    def __iter__(self) -> Iterator[Transformation]:
        return iter(self.transformations)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def get(self, name: str) -> Transformation:
        return self._by_name[name]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.transformations)


def default_registry() -> TransformationRegistry:
    """The standard 9-transformation set: 4 unary, 5 binary."""
    return TransformationRegistry(
        [
            Transformation("log", 1, False, _t_log),
            Transformation("sqrt", 1, False, _t_sqrt),
            Transformation("min_max", 1, False, _t_min_max),
            Transformation("reciprocal", 1, False, _t_reciprocal),
            Transformation("add", 2, True, lambda u, v: u + v),
            Transformation("subtract", 2, False, lambda u, v: u - v),
            Transformation("multiply", 2, True, lambda u, v: u * v),
            Transformation("divide", 2, False, _t_divide),
            Transformation("modulo", 2, False, _t_modulo),
        ]
    )


@dataclass(frozen=True)
class Leaf:
    """A raw dataset column, referenced by 0-based index."""

    index: int


@dataclass(frozen=True)
class Apply:
    """A transformation applied to child subtrees (one per operand)."""

    transformation: Transformation
    children: tuple

    def __post_init__(self):
        if len(self.children) != self.transformation.arity:
            raise ValueError(
                f"{self.transformation.name} takes {self.transformation.arity} "
                f"children, got {len(self.children)}"
            )


ParseTree = Leaf | Apply


def order(tree: ParseTree) -> int:
    """Nesting depth of transformations; raw columns have order 0."""
    if isinstance(tree, Leaf):
        return 0
    return 1 + max(order(c) for c in tree.children)


def to_postorder(tree: ParseTree, feature_names: Sequence[str]) -> list[str]:
    """Serialize a tree to its post-order token list (children first)."""
    out: list[str] = []

    def walk(node: ParseTree):
        if isinstance(node, Leaf):
            out.append(feature_names[node.index])
        else:
            for c in node.children:
                walk(c)
            out.append(node.transformation.name)

    walk(tree)
    return out


def parse_postorder(
    tokens: Sequence[str],
    registry: TransformationRegistry,
    feature_names: Sequence[str],
) -> ParseTree:
    """Rebuild the unique tree whose post-order traversal is ``tokens``.

    Raises UnknownToken, StackUnderflow or NonSingularResult, each carrying
    the offending token position.
    """
    index_of = {name: i for i, name in enumerate(feature_names)}
    stack: list[ParseTree] = []
    pos = -1
    for pos, tok in enumerate(tokens):
        if tok in index_of:
            stack.append(Leaf(index_of[tok]))
        elif tok in registry:
            t = registry.get(tok)
            if len(stack) < t.arity:
                raise StackUnderflow(tok, pos, t.arity, len(stack))
            children = tuple(stack[len(stack) - t.arity :])
            del stack[len(stack) - t.arity :]
            stack.append(Apply(t, children))
        else:
            raise UnknownToken(tok, pos)
    if len(stack) != 1:
        raise NonSingularResult(len(stack), pos)
    return stack[0]


def is_stack_evaluable(
    tokens: Sequence[str],
    registry: TransformationRegistry,
    feature_names: Sequence[str],
) -> bool:
    """True iff the token sequence parses to exactly one tree."""
    try:
        parse_postorder(tokens, registry, feature_names)
    except DslError:
        return False
    return True


def canonical_form(tree: ParseTree, feature_names: Sequence[str]) -> list[str]:
    """Deterministic post-order string: children of commutative nodes are
    sorted by their own canonical strings, so trees equal up to commutative
    permutation serialize identically."""

    def canon(node: ParseTree) -> list[str]:
        if isinstance(node, Leaf):
            return [feature_names[node.index]]
        parts = [canon(c) for c in node.children]
        if node.transformation.commutative:
            parts.sort()
        out = [tok for p in parts for tok in p]
        out.append(node.transformation.name)
        return out

    return canon(tree)


def canonical_key(tree: ParseTree, feature_names: Sequence[str]) -> str:
    """Space-joined canonical form; the deduplication/cache key."""
    return " ".join(canonical_form(tree, feature_names))


def enumerate_equivalents(
    tree: ParseTree, feature_names: Sequence[str], limit: int
) -> list[list[str]]:
    """Up to ``limit`` distinct post-order strings of trees equal to ``tree``
    up to permutations of commutative children.  The tree's own serialization
    comes first; the rest follow in a deterministic permutation order."""
    if limit < 1:
        raise ValueError("limit must be >= 1")

    def variants(node: ParseTree) -> Iterator[list[str]]:
        if isinstance(node, Leaf):
            yield [feature_names[node.index]]
            return
        if node.transformation.commutative:
            child_orders = itertools.permutations(range(len(node.children)))
        else:
            child_orders = iter([tuple(range(len(node.children)))])
        for perm in child_orders:
            for parts in itertools.product(*(variants(node.children[i]) for i in perm)):
                out = [tok for p in parts for tok in p]
                out.append(node.transformation.name)
                yield out

    seen: list[list[str]] = []
    seen_keys: set[tuple[str, ...]] = set()
    for v in variants(tree):
        key = tuple(v)
        if key not in seen_keys:
            seen_keys.add(key)
            seen.append(v)
        if len(seen) >= limit:
            break
    return seen


LEAF_PROBABILITY = 0.3
DUPLICATE_RETRIES = 100


def sample_random_tree(
    raw_feature_count: int,
    max_order: int,
    rng: np.random.Generator,
    registry: Optional[TransformationRegistry] = None,
) -> ParseTree:
    """Draw a random tree with at least one transformation and order <= k.

    Recursive generation: the root always expands; below it, each position
    becomes a leaf with probability 0.3 or expands with a uniformly chosen
    transformation until the depth budget runs out.
    """
    if raw_feature_count < 1 or max_order < 1:
        raise ValueError("need at least one raw feature and max_order >= 1")
    reg = registry if registry is not None else default_registry()
    transformations = reg.transformations

    def gen(budget: int, force_apply: bool) -> ParseTree:
        if budget == 0 or (not force_apply and rng.random() < LEAF_PROBABILITY):
            return Leaf(int(rng.integers(raw_feature_count)))
        t = transformations[int(rng.integers(len(transformations)))]
        return Apply(t, tuple(gen(budget - 1, False) for _ in range(t.arity)))

    return gen(max_order, True)


def sample_distinct_tree(
    raw_feature_count: int,
    max_order: int,
    rng: np.random.Generator,
    feature_names: Sequence[str],
    seen_keys: set[str],
    registry: Optional[TransformationRegistry] = None,
) -> Optional[ParseTree]:
    """Sample a tree whose canonical key is not in ``seen_keys``.

    Retries up to 100 times on duplicates; returns None when the space looks
    exhausted.  Does not mutate ``seen_keys``.
    """
    for _ in range(DUPLICATE_RETRIES):
        tree = sample_random_tree(raw_feature_count, max_order, rng, registry)
        if canonical_key(tree, feature_names) not in seen_keys:
            return tree
    return None


_INFIX_SYMBOL = {"add": "+", "subtract": "-", "multiply": "*", "divide": "/", "modulo": "%"}


def to_infix(tree: ParseTree, feature_names: Sequence[str]) -> str:
    """Human-readable rendering, e.g. ``(weight / square(height))``."""
    if isinstance(tree, Leaf):
        return feature_names[tree.index]
    name = tree.transformation.name
    parts = [to_infix(c, feature_names) for c in tree.children]
    if name in _INFIX_SYMBOL and len(parts) == 2:
        return f"({parts[0]} {_INFIX_SYMBOL[name]} {parts[1]})"
    return f"{name}({', '.join(parts)})"


def sanitize_feature_names(raw_names: Sequence[str], reserved: Sequence[str] = ()) -> list[str]:
    """Turn arbitrary column headers into unique identifier-style tokens.

    Non-alphanumeric characters become underscores; collisions (with each
    other, with ``reserved`` names, or with an empty result) get a numeric
    suffix.
    """
    taken = set(reserved) | {PAD, SOS, EOS}
    out = []
    for name in raw_names:
        base = re.sub(r"[^0-9a-zA-Z]", "_", str(name))
        if not base or base[0].isdigit():
            base = "f_" + base
        candidate = base
        suffix = 1
        while candidate in taken:
            suffix += 1
            candidate = f"{base}_{suffix}"
        taken.add(candidate)
        out.append(candidate)
    return out


@dataclass
class Vocabulary:
    """Dense bidirectional token<->id map over reserved markers, raw-feature
    names and transformation names (in that order)."""

    tokens: list[str] = field(default_factory=list)
    _ids: dict[str, int] = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, feature_names: Sequence[str], registry: TransformationRegistry) -> "Vocabulary":
        tokens = [PAD, SOS, EOS, *feature_names, *registry.names]
        if len(set(tokens)) != len(tokens):
            raise ValueError("token collision between features, transformations and markers")
        return cls(tokens=list(tokens), _ids={t: i for i, t in enumerate(tokens)})

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def sos_id(self) -> int:
        return self._ids[SOS]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]
