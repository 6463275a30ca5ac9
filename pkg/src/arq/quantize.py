"""Linear fake quantization of weights and activations.

Weights are quantized symmetrically to [-c, c], activations to [0, c], both on
the lattice {i * s} with s = c / (2**(b-1) - 1).  Clips are calibrated per
layer by minimizing the KL divergence between the histogram of the quantized
values and the histogram of the originals over a deterministic candidate grid.
Quantization happens at forward time through hooks consumed by ``arq.nn``;
master weights stay float and receive straight-through gradients (identity
inside the clip range, zero outside).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn

_HIST_BINS = 2048
_GRID_SIZE = 128
_KL_SMOOTHING = 1e-10
_CALIB_BATCH = 256
_CALIB_SEED = 0xCA11B


class PolicyError(ValueError):
    """Quantization policy does not match the network's quantizable layers."""


@dataclass
class QuantPolicy:
    """Per-layer (weight bits, activation bits) assignments.

    ``entries`` maps layer index -> (b_w, b_a) as an ordered list of triples
    (k, b_w, b_a).  When ``pin_first_last`` is set (the default, and always
    the case for search-produced policies) the first and last quantizable
    layers carry 8 bits regardless of the [bit_min, bit_max] search range;
    hand-built evaluation policies may opt out.
    """

    entries: list
    bit_min: int
    bit_max: int
    pin_first_last: bool = True

    def __post_init__(self):
        if self.bit_min < 2:
            raise ValueError("bit_min must be >= 2")
        if self.bit_max < self.bit_min:
            raise ValueError("bit_max must be >= bit_min")

    def bits_for(self, k: int):
        for idx, b_w, b_a in self.entries:
            if idx == k:
                return b_w, b_a
        raise KeyError(f"no policy entry for layer {k}")

    def replace_bits(self, k: int, b_w: int, b_a: int) -> "QuantPolicy":
        entries = [(i, b_w, b_a) if i == k else (i, w, a)
                   for i, w, a in self.entries]
        return QuantPolicy(entries, self.bit_min, self.bit_max,
                           self.pin_first_last)

    def layer_indices(self) -> list:
        return [k for k, _, _ in self.entries]

    def to_lines(self) -> list:
        return [f"{k} {b_w} {b_a}" for k, b_w, b_a in self.entries]

    def __str__(self) -> str:
        return ";".join(self.to_lines())


def pinned_indices(net: nn.Network) -> tuple:
    """Indices of the first and last quantizable layer (8-bit pinned)."""
    q = net.quantizable_indices()
    if not q:
        raise PolicyError("network has no quantizable layers")
    return q[0], q[-1]


def uniform_policy(net: nn.Network, bits: int, bit_min: int = 2,
                   bit_max: int = 8, pinned: bool = True) -> QuantPolicy:
    """All layers at ``bits``; with ``pinned`` the first/last stay at 8."""
    first, last = pinned_indices(net)
    entries = []
    for k in net.quantizable_indices():
        b = 8 if pinned and k in (first, last) else bits
        entries.append((k, b, b))
    return QuantPolicy(entries, bit_min, bit_max, pinned)


def validate_policy(net: nn.Network, policy: QuantPolicy) -> None:
    expected = net.quantizable_indices()
    got = policy.layer_indices()
    if got != expected:
        bad = sorted(set(got).symmetric_difference(expected))
        raise PolicyError(
            f"policy layers {got} do not match quantizable layers {expected}; "
            f"offending indices: {bad}")
    first, last = pinned_indices(net)
    for k, b_w, b_a in policy.entries:
        if policy.pin_first_last and k in (first, last):
            if b_w != 8 or b_a != 8:
                raise PolicyError(f"layer {k} is pinned to 8 bits, got ({b_w},{b_a})")
        elif not (policy.bit_min <= b_w <= policy.bit_max
                  and policy.bit_min <= b_a <= policy.bit_max):
            raise PolicyError(
                f"layer {k}: bits ({b_w},{b_a}) outside "
                f"[{policy.bit_min},{policy.bit_max}]")


# ---------------------------------------------------------------------------
# the quantization function


def _scale(bits: int, clip: float) -> float:
    return clip / (2 ** (bits - 1) - 1)


def quantize_tensor(t: np.ndarray, bits: int, clip: float,
                    mode: str = "weight") -> np.ndarray:
    """Fake-quantize to the b-bit lattice; clips to [-c, c] (weights) or
    [0, c] (activations) before snapping to multiples of the scale."""
    if bits < 2:
        raise ValueError("bits must be >= 2")
    if clip <= 0:
        raise ValueError("clip must be positive")
    if mode not in ("weight", "activation"):
        raise ValueError(f"unknown mode {mode!r}")
    s = _scale(bits, clip)
    lo = -clip if mode == "weight" else 0.0
    v = np.clip(np.asarray(t, dtype=nn.REAL), lo, clip)
    return np.rint(v / s) * s


def _quantize_with_mask(t: np.ndarray, bits: int, clip: float, mode: str):
    """Quantized values plus the straight-through gradient gate."""
    s = _scale(bits, clip)
    lo = -clip if mode == "weight" else 0.0
    mask = (t >= lo) & (t <= clip)
    return np.rint(np.clip(t, lo, clip) / s) * s, mask


# ---------------------------------------------------------------------------
# clip calibration


def calibrate_clip(values: np.ndarray, bits: int, mode: str = "weight"):
    """Pick the clip whose quantized histogram best matches the original.

    Entropy calibration over 2048 magnitude bins on [0, max|v|] and 128
    evenly spaced clip candidates in (0, max|v|]: for each candidate the
    histogram mass inside the clip range is merged into the b-bit lattice
    cells and re-expanded uniformly over each cell's occupied bins, and the
    KL divergence against the original histogram (1e-10 additive smoothing)
    is scored; clipped-away tail mass therefore shows up as missing support
    and is penalized.  Deterministic; ties go to the smaller clip.  Returns
    (clip, degenerate); an all-zero tensor yields the declared degenerate
    result (1.0, True).
    """
    v = np.asarray(values, dtype=nn.REAL).ravel()
    if v.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    mag = np.abs(v) if mode == "weight" else np.maximum(v, 0.0)
    vmax = float(mag.max())
    if vmax == 0.0:
        return 1.0, True
    hist, edges = np.histogram(mag, bins=_HIST_BINS, range=(0.0, vmax))
    p = hist.astype(nn.REAL)
    p /= p.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    occupied = p > 0
    p_s = p + _KL_SMOOTHING
    p_s /= p_s.sum()
    levels = 2 ** (bits - 1) - 1
    best_c, best_kl = None, np.inf
    for i in range(1, _GRID_SIZE + 1):
        c = vmax * i / _GRID_SIZE
        s = c / levels
        in_range = centers <= c
        idx = np.rint(centers[in_range] / s).astype(np.int64)
        group_mass = np.bincount(idx, weights=p[in_range], minlength=levels + 1)
        group_occ = np.bincount(idx, weights=occupied[in_range].astype(nn.REAL),
                                minlength=levels + 1)
        q = np.zeros(_HIST_BINS, dtype=nn.REAL)
        sel = in_range & occupied
        idx_sel = np.rint(centers[sel] / s).astype(np.int64)
        q[sel] = group_mass[idx_sel] / group_occ[idx_sel]
        q_s = q + _KL_SMOOTHING
        q_s /= q_s.sum()
        kl = float(np.sum(p_s * np.log(p_s / q_s)))
        if kl < best_kl:
            best_kl, best_c = kl, c
    return best_c, False


# ---------------------------------------------------------------------------
# quantized networks


@dataclass
class LayerQuant:
    clip_w: float
    clip_a: float
    degenerate_w: bool = False
    degenerate_a: bool = False


class _Hooks:
    """Forward-time fake quantization for arq.nn's engine."""

    def __init__(self, qnet: "QuantizedNetwork"):
        self.qnet = qnet
        self.last_layer = qnet.base.layers[-1].index

    def weight(self, index: int, w: np.ndarray):
        b_w, _ = self.qnet.policy.bits_for(index)
        qp = self.qnet.qparams[index]
        return _quantize_with_mask(w, b_w, qp.clip_w, "weight")

    def activation(self, index: int, z: np.ndarray):
        if index == self.last_layer:
            return z, None  # logits feed nothing downstream
        _, b_a = self.qnet.policy.bits_for(index)
        qp = self.qnet.qparams[index]
        return _quantize_with_mask(z, b_a, qp.clip_a, "activation")


class _ActivationRecorder:
    """Hooks object that taps the pre-quantization layer outputs."""

    def __init__(self):
        self.seen = {}

    def weight(self, index, w):
        return w, None

    def activation(self, index, z):
        self.seen[index] = z
        return z, None


@dataclass
class QuantizedNetwork:
    base: nn.Network
    policy: QuantPolicy
    qparams: dict  # layer index -> LayerQuant

    def hooks(self) -> _Hooks:
        return _Hooks(self)

    def clone(self) -> "QuantizedNetwork":
        return QuantizedNetwork(self.base.clone(), self.policy, dict(self.qparams))


def _select_calib(calib_data: np.ndarray) -> np.ndarray:
    calib_data = np.asarray(calib_data, dtype=nn.REAL)
    if len(calib_data) <= _CALIB_BATCH:
        return calib_data
    rng = np.random.default_rng(np.random.SeedSequence(_CALIB_SEED))
    pick = rng.permutation(len(calib_data))[:_CALIB_BATCH]
    return calib_data[pick]


def _calibrate(base: nn.Network, policy: QuantPolicy,
               calib_data: np.ndarray) -> dict:
    recorder = _ActivationRecorder()
    nn.run_forward(base, _select_calib(calib_data), hooks=recorder)
    qparams = {}
    for k, b_w, b_a in policy.entries:
        w = base.params[k]["w"]
        clip_w, deg_w = calibrate_clip(w, b_w, "weight")
        clip_a, deg_a = calibrate_clip(recorder.seen[k], b_a, "activation")
        qparams[k] = LayerQuant(clip_w, clip_a, deg_w, deg_a)
    return qparams


def apply_policy(net: nn.Network, policy: QuantPolicy,
                 calib_data: np.ndarray) -> QuantizedNetwork:
    """Calibrate clips and wrap the network for fake-quantized execution.

    Weight clips come from the weight tensors themselves, activation clips
    from the float network's outputs on the calibration batch.  The input
    network is cloned; its weights are never modified.
    """
    validate_policy(net, policy)
    if len(calib_data) == 0:
        raise ValueError("activation calibration needs a nonempty batch")
    base = net.clone()
    return QuantizedNetwork(base, policy, _calibrate(base, policy, calib_data))


def recalibrate(qnet: QuantizedNetwork, calib_data: np.ndarray) -> QuantizedNetwork:
    """Refresh all clips against the current master weights (post fine-tune)."""
    qnet.qparams = _calibrate(qnet.base, qnet.policy, calib_data)
    return qnet


def quantized_forward(qnet: QuantizedNetwork, x: np.ndarray) -> np.ndarray:
    return nn.forward(qnet.base, x, hooks=qnet.hooks())


def quantized_predict(qnet: QuantizedNetwork, x: np.ndarray):
    return nn.predict(qnet.base, x, hooks=qnet.hooks())


# ---------------------------------------------------------------------------
# policy file format


def policy_to_text(policy: QuantPolicy) -> str:
    header = f"bits {policy.bit_min} {policy.bit_max}"
    if not policy.pin_first_last:
        header += " unpinned"
    lines = [header]
    lines.extend(policy.to_lines())
    return "\n".join(lines) + "\n"


def policy_from_text(text: str) -> QuantPolicy:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("bits "):
        raise ValueError("policy file must start with a 'bits <min> <max>' header")
    head = lines[0].split()
    pinned = not (len(head) == 4 and head[3] == "unpinned")
    entries = []
    for ln in lines[1:]:
        k, b_w, b_a = ln.split()
        entries.append((int(k), int(b_w), int(b_a)))
    return QuantPolicy(entries, int(head[1]), int(head[2]), pinned)


def save_policy(policy: QuantPolicy, path) -> None:
    with open(path, "w") as fh:
        fh.write(policy_to_text(policy))


def load_policy(path) -> QuantPolicy:
    with open(path) as fh:
        return policy_from_text(fh.read())
