"""BitOPs and model-size accounting plus budget enforcement.

A layer's BitOPs are b_w * b_a * (weight count, biases excluded) * w * h / s^2
with w = h = the layer's input feature-map side and s its stride; dense layers
count as 1x1 spatial.  With the engine's same-padding geometry this equals
b_w * b_a * MACs.  All arithmetic is exact integer math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import nn
from .quantize import QuantPolicy, pinned_indices, validate_policy


class UnsatisfiableBudgetError(ValueError):
    def __init__(self, budget: int, min_cost: int):
        self.budget = budget
        self.min_cost = min_cost
        super().__init__(
            f"budget {budget} unsatisfiable: minimum achievable BitOPs is {min_cost}")


@dataclass
class CostReport:
    total_bops: int
    total_size_bits: int
    per_layer: list  # rows of (kind, k, b_w, b_a, bops, size_bits)

    CSV_HEADER = "layer,k,b_w,b_a,bops,size_bits"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for kind, k, b_w, b_a, bops, size in self.per_layer:
            lines.append(f"{kind},{k},{b_w},{b_a},{bops},{size}")
        return "\n".join(lines) + "\n"


def action_to_bitwidth(a: float, b_min: int, b_max: int) -> int:
    """Map a continuous action in [0,1] onto the [b_min, b_max] bit range.

    b = floor(b_min - 0.5 + a*(b_max - b_min + 1) + 0.5), clamped; the a = 1
    endpoint lands half a step above b_max and clamps back down.
    """
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"action {a} outside [0,1]; clip before mapping")
    x = b_min - 0.5 + a * (b_max - b_min + 1)
    b = math.floor(x + 0.5)
    return max(b_min, min(b_max, b))


def layer_bops(spec: nn.LayerSpec, b_w: int, b_a: int):
    """(BitOPs, quantizable) for one layer; non-quantizable layers cost 0."""
    if not spec.quantizable:
        return 0, False
    if spec.kind == "dense":
        return b_w * b_a * spec.weight_count, True
    f = spec.input_feature_size
    return (b_w * b_a * spec.weight_count * f * f) // (spec.stride * spec.stride), True


def policy_cost(net: nn.Network, policy: QuantPolicy) -> CostReport:
    validate_policy(net, policy)
    rows = []
    total_bops = 0
    total_size = 0
    for k, b_w, b_a in policy.entries:
        spec = net.layers[k]
        bops, _ = layer_bops(spec, b_w, b_a)
        size = b_w * spec.weight_count
        rows.append((spec.kind, k, b_w, b_a, bops, size))
        total_bops += bops
        total_size += size
    return CostReport(total_bops, total_size, rows)


def min_cost_policy(net: nn.Network, policy: QuantPolicy) -> QuantPolicy:
    """The policy with every free layer at bit_min (pins stay at 8)."""
    first, last = pinned_indices(net)
    entries = [(k, b_w, b_a) if policy.pin_first_last and k in (first, last)
               else (k, policy.bit_min, policy.bit_min)
               for k, b_w, b_a in policy.entries]
    return QuantPolicy(entries, policy.bit_min, policy.bit_max,
                       policy.pin_first_last)


def enforce_budget(net: nn.Network, policy: QuantPolicy, budget: int) -> QuantPolicy:
    """Reduce bit-widths back-to-front until BitOPs fit the budget.

    Each visit to a layer decrements b_w then b_a by one (never below bit_min,
    never touching the 8-bit pinned first/last layers), re-checking the cost
    after every single decrement; passes wrap until the budget holds.
    """
    validate_policy(net, policy)
    if policy_cost(net, policy).total_bops <= budget:
        return policy
    floor_cost = policy_cost(net, min_cost_policy(net, policy)).total_bops
    if floor_cost > budget:
        raise UnsatisfiableBudgetError(budget, floor_cost)
    first, last = pinned_indices(net)
    order = [k for k in reversed(policy.layer_indices())
             if not (policy.pin_first_last and k in (first, last))]
    cur = policy
    while True:
        for k in order:
            for slot in ("w", "a"):
                b_w, b_a = cur.bits_for(k)
                if slot == "w" and b_w > policy.bit_min:
                    cur = cur.replace_bits(k, b_w - 1, b_a)
                elif slot == "a" and b_a > policy.bit_min:
                    cur = cur.replace_bits(k, b_w, b_a - 1)
                else:
                    continue
                if policy_cost(net, cur).total_bops <= budget:
                    return cur
