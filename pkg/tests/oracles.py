"""Independent reference implementations used to check the real ones.

These deliberately re-derive results from first principles (the serialized
XML text, plain sorting, nested loops) so they share no code with the paths
they verify.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from decimal import Decimal


class OracleForest:
    """Forest inference straight off a serialized XML document."""

    def __init__(self, document: str):
        root = ET.fromstring(document)
        self.universes = {
            fe.attrib["name"]: fe.attrib.get("values", "").split(",")
            for fe in root.find("schema")
            if fe.attrib.get("kind") == "categorical"
        }
        self.trees = []
        for tree in root.iter("tree"):
            nodes = {int(el.attrib["id"]): el for el in tree}
            children = {
                int(el.attrib[side])
                for el in tree
                if el.tag == "node"
                for side in ("left", "right")
            }
            (root_id,) = set(nodes) - children
            self.trees.append((nodes, root_id))

    def infer(self, features: dict):
        votes = []
        for nodes, root_id in self.trees:
            current = nodes[root_id]
            while current.tag == "node":
                name = current.attrib["feature"]
                if name not in features:
                    return None
                if current.attrib["kind"] == "categorical":
                    value = str(features[name])
                    if value not in self.universes[name]:
                        return None
                    branch = "left" if value in current.attrib["values"].split(",") else "right"
                else:
                    branch = (
                        "left"
                        if Decimal(str(features[name])) <= Decimal(current.attrib["threshold"])
                        else "right"
                    )
                current = nodes[int(current.attrib[branch])]
            votes.append((int(current.attrib["class"]), Decimal(current.attrib["value-usd"])))
        counts: dict[int, int] = {}
        for cls, _ in votes:
            counts[cls] = counts.get(cls, 0) + 1
        top = max(counts.values())
        winner = min(cls for cls, count in counts.items() if count == top)
        values = [value for cls, value in votes if cls == winner]
        return winner, sum(values, Decimal(0)) / len(values)


def oracle_quantile(values, percentile: int):
    """Nearest-rank by linear scan: smallest v with rank(v) >= p/100 * n."""
    ordered = sorted(values)
    need = percentile * len(ordered) / 100
    rank = 0
    for v in ordered:
        rank += 1
        if rank >= need:
            return v
    return ordered[-1]


def oracle_joint_surprisal(tpl, tuples):
    """-log2 of the product of counted per-feature relative frequencies."""
    p = 1.0
    for i, cls in enumerate(tpl):
        p *= sum(1 for t in tuples if t[i] == cls) / len(tuples)
    return -math.log2(p)
