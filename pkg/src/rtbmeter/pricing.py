"""Price-class models: XML wire format, inference, training and evaluation.

The price predictor exchanged between server and clients is a forest of
decision trees over the aggregated ad features.  A forest of size one is the
plain decision-tree case.  Prices are labelled into four equal-width classes
over the training price range; when a tree cannot match an event's features
the caller falls back to a rolling average of recent cleartext prices.
"""

from __future__ import annotations

import hashlib
import math
import random
import re
import xml.etree.ElementTree as ET
from collections import Counter, deque
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Mapping, Sequence

from .anonymity import GranularityProfile, aggregate_event
from .features import AdEvent

CATEGORICAL = "categorical"
NUMERIC = "numeric"

_TOKEN_RE = re.compile(r"^[^\s,<>&\"]+$")


class ModelFormatError(ValueError):
    """A model document or model structure violates the wire contract."""


class SchemaMismatchError(ModelFormatError):
    """The document's feature schema does not match the client's."""


class InferenceInputError(ValueError):
    """Feature values of the wrong type for the model schema."""


def _check_token(text: str, what: str) -> str:
    if not _TOKEN_RE.match(text):
        raise ModelFormatError(f"{what} {text!r} contains characters the wire format forbids")
    return text


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    values: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        _check_token(self.name, "feature name")
        if self.kind not in (CATEGORICAL, NUMERIC):
            raise ModelFormatError(f"unknown feature kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if not self.values:
                raise ModelFormatError(f"categorical feature {self.name!r} without values")
            for v in self.values:
                _check_token(v, "categorical value")
            if len(set(self.values)) != len(self.values):
                raise ModelFormatError(f"duplicate values on feature {self.name!r}")
        elif self.values:
            raise ModelFormatError(f"numeric feature {self.name!r} must not list values")


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]

    def __post_init__(self) -> None:
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ModelFormatError("duplicate feature in schema")

    def spec_for(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def canonical_text(self) -> str:
        return "\n".join(
            f"{f.name}|{f.kind}|{','.join(f.values)}" for f in self.features
        )

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SplitNode:
    node_id: int
    feature: str
    kind: str
    left: int
    right: int
    threshold: Decimal | None = None
    values: frozenset[str] = frozenset()


@dataclass(frozen=True)
class LeafNode:
    node_id: int
    price_class: int
    value_usd: Decimal


@dataclass(frozen=True)
class DecisionTreeModel:
    nodes: tuple[SplitNode | LeafNode, ...]

    def root_id(self) -> int:
        ids = {n.node_id for n in self.nodes}
        children = set()
        for n in self.nodes:
            if isinstance(n, SplitNode):
                children.update((n.left, n.right))
        roots = ids - children
        if len(roots) != 1:
            raise ModelFormatError(f"tree must have exactly one root, found {len(roots)}")
        return roots.pop()

    def by_id(self) -> dict[int, SplitNode | LeafNode]:
        return {n.node_id: n for n in self.nodes}


@dataclass(frozen=True)
class ForestModel:
    trees: tuple[DecisionTreeModel, ...]
    schema: FeatureSchema
    version: int = 1
    trained_at: str = "1970-01-01T00:00:00Z"

    def __post_init__(self) -> None:
        if not self.trees:
            raise ModelFormatError("forest must contain at least one tree")
        for tree in self.trees:
            validate_tree(tree, self.schema)


def validate_tree(tree: DecisionTreeModel, schema: FeatureSchema) -> None:
    """Enforce proper-tree structure and schema consistency."""
    index = {}
    for node in tree.nodes:
        if node.node_id in index:
            raise ModelFormatError(f"duplicate node id {node.node_id}")
        index[node.node_id] = node

    referenced: Counter[int] = Counter()
    for node in tree.nodes:
        if isinstance(node, SplitNode):
            for child in (node.left, node.right):
                if child not in index:
                    raise ModelFormatError(f"dangling child reference {child}")
                referenced[child] += 1
            try:
                spec = schema.spec_for(node.feature)
            except KeyError:
                raise ModelFormatError(f"unknown feature id {node.feature!r}") from None
            if node.kind != spec.kind:
                raise ModelFormatError(
                    f"split kind {node.kind!r} does not match feature {node.feature!r}"
                )
            if node.kind == NUMERIC and node.threshold is None:
                raise ModelFormatError(f"numeric split {node.node_id} without threshold")
            if node.kind == CATEGORICAL:
                if not node.values:
                    raise ModelFormatError(f"categorical split {node.node_id} without values")
                unknown = set(node.values) - set(spec.values)
                if unknown:
                    raise ModelFormatError(
                        f"split {node.node_id} tests values outside the schema: {sorted(unknown)}"
                    )
        else:
            if node.price_class < 0:
                raise ModelFormatError("negative price class")
            if node.value_usd < 0:
                raise ModelFormatError("negative leaf value")

    if any(count > 1 for count in referenced.values()):
        raise ModelFormatError("a node is referenced more than once")
    roots = set(index) - set(referenced)
    if len(roots) != 1:
        raise ModelFormatError(f"tree must have exactly one root, found {len(roots)}")

    # reachability: every node visited exactly once from the root
    seen = set()
    stack = [roots.pop()]
    while stack:
        nid = stack.pop()
        if nid in seen:
            raise ModelFormatError("cycle detected")
        seen.add(nid)
        node = index[nid]
        if isinstance(node, SplitNode):
            stack.extend((node.left, node.right))
    if seen != set(index):
        raise ModelFormatError("unreachable nodes present")


# --- canonical XML ------------------------------------------------------------
#
# Root element `forest` (version, schema-hash, trained-at) holding a `schema`
# element with `feature` children, then one `tree` element per tree made of
# `node` and `leaf` elements.  Attribute order is fixed and no insignificant
# whitespace is emitted, so equal models serialize to identical bytes.

_XML_HEADER = '<?xml version="1.0" encoding="UTF-8"?>'


def _escape(value: str) -> str:
    return (
        value.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")
    )


def _dec(value: Decimal) -> str:
    return format(value, "f")


def serialize_model(model: ForestModel) -> str:
    """Canonical XML for a forest; rejects structurally invalid models."""
    for tree in model.trees:
        validate_tree(tree, model.schema)
    out = [
        _XML_HEADER,
        f'<forest version="{model.version}" schema-hash="{model.schema.digest()}"'
        f' trained-at="{_escape(model.trained_at)}">',
        "<schema>",
    ]
    for f in model.schema.features:
        if f.kind == CATEGORICAL:
            out.append(
                f'<feature name="{_escape(f.name)}" kind="categorical"'
                f' values="{_escape(",".join(f.values))}"/>'
            )
        else:
            out.append(f'<feature name="{_escape(f.name)}" kind="numeric"/>')
    out.append("</schema>")
    for tree in model.trees:
        out.append("<tree>")
        for node in sorted(tree.nodes, key=lambda n: n.node_id):
            if isinstance(node, SplitNode):
                if node.kind == NUMERIC:
                    split_attr = f'threshold="{_dec(node.threshold)}"'  # type: ignore[arg-type]
                else:
                    split_attr = f'values="{_escape(",".join(sorted(node.values)))}"'
                out.append(
                    f'<node id="{node.node_id}" feature="{_escape(node.feature)}"'
                    f' kind="{node.kind}" {split_attr}'
                    f' left="{node.left}" right="{node.right}"/>'
                )
            else:
                out.append(
                    f'<leaf id="{node.node_id}" class="{node.price_class}"'
                    f' value-usd="{_dec(node.value_usd)}"/>'
                )
        out.append("</tree>")
    out.append("</forest>")
    return "".join(out)


def deserialize_model(
    document: str, expected_schema: FeatureSchema | None = None
) -> ForestModel:
    """Parse and validate a forest document.

    When the caller supplies its own feature schema, a digest mismatch raises
    SchemaMismatchError: the model is rejected and the fallback estimator
    stays in charge.
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise ModelFormatError(f"malformed XML: {exc}") from None
    if root.tag != "forest":
        raise ModelFormatError(f"expected <forest> root, got <{root.tag}>")
    try:
        version = int(root.attrib["version"])
        declared_hash = root.attrib["schema-hash"]
        trained_at = root.attrib["trained-at"]
    except KeyError as exc:
        raise ModelFormatError(f"forest element missing attribute {exc}") from None

    schema_el = root.find("schema")
    if schema_el is None:
        raise ModelFormatError("missing <schema> element")
    specs = []
    for fe in schema_el:
        if fe.tag != "feature":
            raise ModelFormatError(f"unexpected <{fe.tag}> in schema")
        kind = fe.attrib.get("kind", "")
        values = tuple(fe.attrib["values"].split(",")) if kind == CATEGORICAL else ()
        specs.append(FeatureSpec(name=fe.attrib["name"], kind=kind, values=values))
    schema = FeatureSchema(features=tuple(specs))

    if schema.digest() != declared_hash:
        raise ModelFormatError("schema-hash does not match the declared schema")
    if expected_schema is not None and expected_schema.digest() != declared_hash:
        raise SchemaMismatchError(
            "model was trained against a different feature schema; keeping fallback estimator"
        )

    trees = []
    for te in root:
        if te.tag == "schema":
            continue
        if te.tag != "tree":
            raise ModelFormatError(f"unexpected <{te.tag}> in forest")
        nodes: list[SplitNode | LeafNode] = []
        for ne in te:
            try:
                if ne.tag == "node":
                    kind = ne.attrib["kind"]
                    nodes.append(
                        SplitNode(
                            node_id=int(ne.attrib["id"]),
                            feature=ne.attrib["feature"],
                            kind=kind,
                            threshold=Decimal(ne.attrib["threshold"]) if kind == NUMERIC else None,
                            values=frozenset(ne.attrib["values"].split(","))
                            if kind == CATEGORICAL
                            else frozenset(),
                            left=int(ne.attrib["left"]),
                            right=int(ne.attrib["right"]),
                        )
                    )
                elif ne.tag == "leaf":
                    nodes.append(
                        LeafNode(
                            node_id=int(ne.attrib["id"]),
                            price_class=int(ne.attrib["class"]),
                            value_usd=Decimal(ne.attrib["value-usd"]),
                        )
                    )
                else:
                    raise ModelFormatError(f"unexpected <{ne.tag}> in tree")
            except (KeyError, ValueError) as exc:
                raise ModelFormatError(f"bad <{ne.tag}> element: {exc}") from None
        trees.append(DecisionTreeModel(nodes=tuple(nodes)))

    return ForestModel(
        trees=tuple(trees), schema=schema, version=version, trained_at=trained_at
    )


# --- inference -----------------------------------------------------------------

FALLBACK = None  # infer_price returns None when the model cannot match the event


def _coerce_numeric(value: object, feature: str) -> Decimal:
    if isinstance(value, Decimal):
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise InferenceInputError(f"feature {feature!r} expects a number, got {value!r}")
    try:
        return Decimal(str(value))
    except ArithmeticError:
        raise InferenceInputError(f"feature {feature!r} expects a number, got {value!r}") from None


def infer_tree(
    tree: DecisionTreeModel, schema: FeatureSchema, features: Mapping[str, object]
) -> tuple[int, Decimal] | None:
    """Deterministic traversal of one tree; None signals the fallback path."""
    index = tree.by_id()
    node = index[tree.root_id()]
    while isinstance(node, SplitNode):
        if node.feature not in features or features[node.feature] is None:
            return FALLBACK
        raw = features[node.feature]
        if node.kind == CATEGORICAL:
            value = str(raw)
            if value not in set(schema.spec_for(node.feature).values):
                return FALLBACK
            node = index[node.left] if value in node.values else index[node.right]
        else:
            value_num = _coerce_numeric(raw, node.feature)
            node = index[node.left] if value_num <= node.threshold else index[node.right]
    return node.price_class, node.value_usd


def infer_price(
    model: ForestModel, features: Mapping[str, object]
) -> tuple[int, Decimal] | None:
    """Forest prediction: majority vote over trees, ties to the lower class.

    Returns None (the fallback signal) when any tree cannot match the event's
    features; the caller then substitutes the rolling-average estimate.  The
    returned value is the mean leaf value of the trees that voted for the
    winning class.
    """
    votes: list[tuple[int, Decimal]] = []
    for tree in model.trees:
        result = infer_tree(tree, model.schema, features)
        if result is FALLBACK:
            return FALLBACK
        votes.append(result)
    counts = Counter(cls for cls, _ in votes)
    top = max(counts.values())
    winner = min(cls for cls, count in counts.items() if count == top)
    values = [value for cls, value in votes if cls == winner]
    return winner, sum(values, Decimal(0)) / len(values)


# --- price classes ----------------------------------------------------------------

@dataclass(frozen=True)
class PriceClassScheme:
    """Four equal-width price intervals over the training range.

    The range runs from zero to the 99th percentile of the training cleartext
    prices; the top class is open ended.  Each class is represented by its
    interval midpoint.
    """

    boundaries: tuple[Decimal, Decimal, Decimal]
    representatives: tuple[Decimal, Decimal, Decimal, Decimal]

    def __post_init__(self) -> None:
        if not all(a < b for a, b in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("boundaries must be strictly increasing")
        widths = {self.boundaries[0], self.boundaries[1] - self.boundaries[0],
                  self.boundaries[2] - self.boundaries[1]}
        if len(widths) != 1:
            raise ValueError("intervals must be equal width")

    @classmethod
    def from_prices(cls, prices: Sequence[Decimal]) -> "PriceClassScheme":
        if not prices:
            raise ValueError("cannot build a price scheme from no prices")
        top = nearest_rank(sorted(prices), 99)
        if top <= 0:
            top = Decimal(1)
        q = top / 4
        return cls(
            boundaries=(q, q * 2, q * 3),
            representatives=(q / 2, q * 3 / 2, q * 5 / 2, q * 7 / 2),
        )

    def classify(self, value: Decimal) -> int:
        for i, bound in enumerate(self.boundaries):
            if value < bound:
                return i
        return 3

    def representative(self, price_class: int) -> Decimal:
        return self.representatives[price_class]


def nearest_rank(sorted_values: Sequence[Decimal], percentile: int) -> Decimal:
    """Nearest-rank quantile: the ceil(p/100 * n)-th smallest value."""
    if not sorted_values:
        raise ValueError("empty sample")
    rank = math.ceil(percentile / 100 * len(sorted_values))
    return sorted_values[max(rank, 1) - 1]


# --- rolling average ---------------------------------------------------------------

def model_seed_value(model: "ForestModel") -> Decimal:
    """Global price estimate shipped with a model: the mean over its leaves."""
    leaves = [n.value_usd for tree in model.trees for n in tree.nodes if isinstance(n, LeafNode)]
    return sum(leaves, Decimal(0)) / len(leaves)


@dataclass
class RollingAverage:
    """Mean of the most recent cleartext prices, seeded with the global mean."""

    seed_value: Decimal
    capacity: int = 50
    window: deque = field(default_factory=deque)

    def __post_init__(self) -> None:
        self.window = deque(self.window, maxlen=self.capacity)

    def add(self, value: Decimal) -> None:
        if value < 0:
            raise ValueError("negative price")
        self.window.append(value)

    def estimate(self) -> Decimal:
        if not self.window:
            return self.seed_value
        return sum(self.window, Decimal(0)) / len(self.window)


# --- training ---------------------------------------------------------------------

def schema_from_profile(profile: GranularityProfile) -> FeatureSchema:
    """Model feature schema induced by a granularity profile.

    Every profile feature becomes a categorical feature whose universe is the
    profile's class indices; the price value itself is the training target and
    stays out of the schema.
    """
    specs = []
    for spec in profile.features:
        if spec.feature == "price_value":
            continue
        specs.append(
            FeatureSpec(
                name=spec.feature,
                kind=CATEGORICAL,
                values=tuple(str(i) for i in range(spec.class_count)),
            )
        )
    return FeatureSchema(features=tuple(specs))


def model_features(event: AdEvent, profile: GranularityProfile) -> dict[str, str]:
    """Aggregated event features in the form the model consumes."""
    tpl = aggregate_event(event, profile)
    return {
        spec.feature: str(cls)
        for spec, cls in zip(profile.features, tpl)
        if spec.feature != "price_value"
    }


@dataclass
class _Sample:
    features: list[dict[str, str]]
    labels: list[int]


def train_model(
    events: Sequence[AdEvent],
    profile: GranularityProfile,
    forest_size: int = 10,
    seed: int = 0,
    max_depth: int = 12,
    version: int = 1,
    trained_at: str = "1970-01-01T00:00:00Z",
) -> tuple[ForestModel, PriceClassScheme]:
    """Greedy Gini forest over profile-aggregated events; deterministic per seed.

    Each tree sees a bootstrap sample and a random feature subset.  Labels are
    the four price classes over the training price range.  A single-class
    input yields single-leaf trees, which is a valid degenerate model.
    """
    if not events:
        raise ValueError("cannot train on zero events")
    if forest_size < 1:
        raise ValueError("forest size must be >= 1")

    scheme = PriceClassScheme.from_prices([e.price_value for e in events])
    schema = schema_from_profile(profile)
    sample = _Sample(
        features=[model_features(e, profile) for e in events],
        labels=[scheme.classify(e.price_value) for e in events],
    )
    feature_names = [f.name for f in schema.features]
    subset_size = max(1, round(math.sqrt(len(feature_names))))

    trees = []
    for t in range(forest_size):
        rng = random.Random(f"{seed}/{t}")
        indices = [rng.randrange(len(events)) for _ in range(len(events))]
        subset = sorted(rng.sample(feature_names, subset_size))
        builder = _TreeBuilder(sample, schema, scheme, subset, max_depth)
        trees.append(builder.build(indices))

    return (
        ForestModel(trees=tuple(trees), schema=schema, version=version, trained_at=trained_at),
        scheme,
    )


class _TreeBuilder:
    def __init__(self, sample, schema, scheme, feature_subset, max_depth):
        self.sample = sample
        self.schema = schema
        self.scheme = scheme
        self.subset = feature_subset
        self.max_depth = max_depth
        self.nodes: list[SplitNode | LeafNode] = []

    def build(self, indices: list[int]) -> DecisionTreeModel:
        self.nodes = []
        self._grow(indices, depth=0)
        return DecisionTreeModel(nodes=tuple(self.nodes))

    def _leaf(self, indices: list[int]) -> int:
        counts = Counter(self.sample.labels[i] for i in indices)
        top = max(counts.values())
        cls = min(c for c, n in counts.items() if n == top)
        node_id = len(self.nodes)
        self.nodes.append(
            LeafNode(node_id=node_id, price_class=cls, value_usd=self.scheme.representative(cls))
        )
        return node_id

    def _grow(self, indices: list[int], depth: int) -> int:
        labels = {self.sample.labels[i] for i in indices}
        if len(labels) == 1 or depth >= self.max_depth or len(indices) < 2:
            return self._leaf(indices)

        best = self._best_split(indices)
        if best is None:
            return self._leaf(indices)
        feature, value, left_idx, right_idx = best

        node_id = len(self.nodes)
        self.nodes.append(None)  # type: ignore[arg-type]  # reserve slot for ordering
        left = self._grow(left_idx, depth + 1)
        right = self._grow(right_idx, depth + 1)
        self.nodes[node_id] = SplitNode(
            node_id=node_id,
            feature=feature,
            kind=CATEGORICAL,
            values=frozenset({value}),
            left=left,
            right=right,
        )
        return node_id

    def _best_split(self, indices):
        """One-vs-rest candidate per categorical value, scored from label counts."""
        labels = self.sample.labels
        n = len(indices)
        total = Counter(labels[i] for i in indices)
        parent_gini = _gini_counts(total, n)
        best_gain = 0.0
        best = None
        for feature in self.subset:
            by_value: dict[str, list[int]] = {}
            for i in indices:
                by_value.setdefault(self.sample.features[i][feature], []).append(i)
            if len(by_value) < 2:
                continue
            for value in sorted(by_value):
                left = by_value[value]
                nl = len(left)
                nr = n - nl
                left_counts = Counter(labels[i] for i in left)
                right_counts = Counter(
                    {cls: total[cls] - left_counts.get(cls, 0) for cls in total}
                )
                weighted = (
                    nl / n * _gini_counts(left_counts, nl)
                    + nr / n * _gini_counts(right_counts, nr)
                )
                gain = parent_gini - weighted
                if gain > best_gain + 1e-12:
                    best_gain = gain
                    best = (feature, value, left)
        if best is None:
            return None
        feature, value, left_idx = best
        right_idx = [i for i in indices if self.sample.features[i][feature] != value]
        return feature, value, left_idx, right_idx


def _gini_counts(counts: Mapping[int, int], n: int) -> float:
    if n == 0:
        return 0.0
    return 1.0 - sum((c / n) ** 2 for c in counts.values())


# --- evaluation ---------------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    auc_roc: float
    f1: float
    excluded_classes: tuple[int, ...] = ()
    fallback_events: int = 0


def evaluate_model(
    model: ForestModel,
    events: Sequence[AdEvent],
    profile: GranularityProfile,
    scheme: PriceClassScheme,
) -> EvalResult:
    """Macro one-vs-rest AUC and macro F1 on held-out events.

    Classes absent from the held-out labels are excluded from both macro
    averages and reported back as a diagnostic.
    """
    if not events:
        raise ValueError("empty held-out set")

    y_true: list[int] = []
    class_scores: list[list[float]] = []
    y_pred: list[int] = []
    fallbacks = 0
    for event in events:
        feats = model_features(event, profile)
        votes = []
        for tree in model.trees:
            result = infer_tree(tree, model.schema, feats)
            if result is FALLBACK:
                break
            votes.append(result[0])
        else:
            y_true.append(scheme.classify(event.price_value))
            scores = [0.0] * 4
            for cls in votes:
                scores[cls] += 1 / len(votes)
            class_scores.append(scores)
            counts = Counter(votes)
            top = max(counts.values())
            y_pred.append(min(c for c, n in counts.items() if n == top))
            continue
        fallbacks += 1

    if not y_true:
        raise ValueError("every held-out event hit the fallback path")

    present = sorted(set(y_true))
    excluded = tuple(c for c in range(4) if c not in present)

    aucs = []
    for cls in present:
        flags = [1 if y == cls else 0 for y in y_true]
        if 0 < sum(flags) < len(flags):
            aucs.append(_rank_auc(flags, [s[cls] for s in class_scores]))
    auc = sum(aucs) / len(aucs) if aucs else 0.5

    f1s = []
    for cls in present:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == cls and p == cls)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != cls and p == cls)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == cls and p != cls)
        f1s.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    f1 = sum(f1s) / len(f1s)

    return EvalResult(auc_roc=auc, f1=f1, excluded_classes=excluded, fallback_events=fallbacks)


def _rank_auc(flags: Sequence[int], scores: Sequence[float]) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    ranks = [0.0] * len(scores)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    n_pos = sum(flags)
    n_neg = len(flags) - n_pos
    rank_sum = sum(r for r, f in zip(ranks, flags) if f)
    return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
