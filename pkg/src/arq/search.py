"""The quantization-policy search loop.

One run certifies the original model in full exactly once, then iterates:
the agent proposes two actions per searchable layer (weights, then
activations, front to back), the actions become a bit-width policy, the
budget is enforced by back-to-front reduction, the policy is applied and
fine-tuned from the original weights, the result is certified incrementally
against the cached original certification, and the episode reward is the
change in average certified radius (or a configured variant).  The best
episode by reward is tracked as a running maximum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .agent import AgentConfig, DdpgAgent, build_state, exploration_std
from .certify import (ACRReport, certified_accuracy, certify_dataset,
                      incremental_certify)
from .cost import (CostReport, UnsatisfiableBudgetError, action_to_bitwidth,
                   enforce_budget, min_cost_policy, policy_cost)
from .quantize import (QuantPolicy, QuantizedNetwork, apply_policy,
                       pinned_indices, quantized_predict, recalibrate,
                       uniform_policy, validate_policy)

REWARD_MODES = ("acr", "val", "acc", "acc_at_r", "acr_plus_acc")

HISTORY_CSV_HEADER = "episode,reward,acr_p,bops,size_bits,policy_string"


@dataclass
class SearchConfig:
    sigma: float = 0.25
    n0: int = 4000            # samples per input, original certification
    n: int = 200              # samples per input, in-loop incremental pass
    n1: int = 512             # fine-tuning subset size
    c0: int = 0               # BitOPs budget
    episodes: int = 60
    bit_min: int = 2
    bit_max: int = 8
    alpha: float = 0.001
    alpha_zeta: float = 0.001
    num_cert_inputs: int = 100
    seed: int = 0
    finetune_lr: float = 0.01
    finetune_batch: int = 64
    recalibrate_after_finetune: bool = True
    reward_mode: str = "acr"
    acc_radius: float = 0.5
    threads: int = 1
    irs_fallback: bool = False
    agent: AgentConfig | None = None

    def __post_init__(self):
        if self.n > self.n0:
            raise ValueError("n must not exceed n0")
        for name in ("n0", "n", "episodes", "num_cert_inputs"):
            if getattr(self, name) < 0 or (name in ("n0", "n") and getattr(self, name) < 1):
                raise ValueError(f"{name} must be positive")
        if self.n1 < 0:
            raise ValueError("n1 must be nonnegative")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"unknown reward mode {self.reward_mode!r}; "
                             f"choose one of {REWARD_MODES}")


@dataclass
class EpisodeRecord:
    episode: int
    policy: QuantPolicy
    acr_p: float
    reward: float
    bops: int
    size_bits: int


@dataclass
class SearchResult:
    policy_optimal: QuantPolicy | None
    best_reward: float | None
    acr_orig: float
    history: list
    best_model: QuantizedNetwork | None
    orig_report: ACRReport
    agent: DdpgAgent | None = None


def reward_variant(mode: str, quant_metrics: dict, orig_metrics: dict) -> float:
    """Episode reward: the configured quality metric of the quantized smoothed
    classifier minus the original's.  The default 'acr' mode is the change in
    average certified radius."""
    if mode not in REWARD_MODES:
        raise ValueError(f"unknown reward mode {mode!r}")
    if mode == "acr_plus_acc":
        return (quant_metrics["acr"] + quant_metrics["acc"]) - \
               (orig_metrics["acr"] + orig_metrics["acc"])
    return quant_metrics[mode] - orig_metrics[mode]


def make_classifier(net: nn.Network):
    return lambda xb: nn.predict(net, xb)


def make_quantized_classifier(model: QuantizedNetwork):
    return lambda xb: quantized_predict(model, xb)


def _derived_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _clean_accuracy(preds, labels) -> float:
    return float(np.mean(np.asarray(preds) == np.asarray(labels)))


def _actions_to_policy(net: nn.Network, free: list, actions: list,
                       bit_min: int, bit_max: int) -> QuantPolicy:
    first, last = pinned_indices(net)
    bits = {}
    for j, k in enumerate(free):
        bits[k] = (action_to_bitwidth(actions[2 * j], bit_min, bit_max),
                   action_to_bitwidth(actions[2 * j + 1], bit_min, bit_max))
    entries = []
    for k in net.quantizable_indices():
        if k in (first, last):
            entries.append((k, 8, 8))
        else:
            entries.append((k, *bits[k]))
    return QuantPolicy(entries, bit_min, bit_max)


def _quantize_and_finetune(net, policy, pool_x, pool_y, cfg, ft_seed):
    qnet = apply_policy(net, policy, pool_x)
    model = nn.fine_tune(qnet, pool_x, pool_y, cfg.sigma, cfg.n1,
                         cfg.finetune_lr, ft_seed, batch_size=cfg.finetune_batch)
    if cfg.recalibrate_after_finetune:
        recalibrate(model, pool_x)
    return model


def run_search(cfg: SearchConfig, net: nn.Network, cert_x, cert_y,
               pool_x, pool_y, precomputed=None) -> SearchResult:
    """Full policy search; see the module docstring for the episode anatomy.

    ``cert_x``/``cert_y`` supply the certification inputs (truncated to
    cfg.num_cert_inputs); ``pool_x``/``pool_y`` feed fine-tuning and
    activation calibration.  Raises UnsatisfiableBudgetError before any
    episode if even the all-minimum policy misses the budget.

    ``precomputed`` may carry the (ACRReport, CertCache) pair of a previous
    full certification of the identical (net, inputs, sigma, n0, alpha, seed,
    trace_n = n) setup, e.g. to share the original certification across
    reward-mode ablations.
    """
    X = np.asarray(cert_x)[:cfg.num_cert_inputs]
    Y = np.asarray(cert_y)[:cfg.num_cert_inputs]
    if len(X) == 0:
        raise ValueError("no certification inputs")
    probe = uniform_policy(net, cfg.bit_max, cfg.bit_min, cfg.bit_max)
    floor_cost = policy_cost(net, min_cost_policy(net, probe)).total_bops
    if floor_cost > cfg.c0:
        raise UnsatisfiableBudgetError(cfg.c0, floor_cost)

    first, last = pinned_indices(net)
    free = [k for k in net.quantizable_indices() if k not in (first, last)]
    if cfg.episodes > 0 and not free:
        raise ValueError("no searchable layers: every quantizable layer is pinned")

    if precomputed is not None:
        orig_report, cache = precomputed
        if cache.sigma != cfg.sigma or cache.seed != cfg.seed or cache.trace_n < cfg.n:
            raise ValueError("precomputed certification does not match the config")
    else:
        orig_report, cache = certify_dataset(
            make_classifier(net), X, Y, cfg.sigma, cfg.n0, cfg.alpha, cfg.seed,
            net.num_classes, trace_n=cfg.n, threads=cfg.threads)

    val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A1]))
    X_val = X + cfg.sigma * val_rng.standard_normal(X.shape)
    orig_metrics = {
        "acr": orig_report.acr,
        "acc": orig_report.clean_accuracy,
        "acc_at_r": certified_accuracy(orig_report.records, cfg.acc_radius),
        "val": _clean_accuracy(nn.predict(net, X_val), Y),
    }

    agent_cfg = cfg.agent if cfg.agent is not None else AgentConfig()
    if cfg.agent is None:
        agent_cfg.seed = _derived_seed(cfg.seed, 0xA9E7)
    agent = DdpgAgent(agent_cfg)
    ft_seed = _derived_seed(cfg.seed, 0xF17E)

    history: list[EpisodeRecord] = []
    best: EpisodeRecord | None = None
    best_model = None
    for t in range(cfg.episodes):
        std = exploration_std(agent.cfg, t)
        observations, actions = [], []
        a_prev = 0.0
        for k in free:
            for i_wa in (0, 1):
                obs = build_state(net.layers[k], i_wa, a_prev, net)
                a = agent.act(obs, std)
                observations.append(obs)
                actions.append(a)
                a_prev = a
        terminal = np.zeros(observations[0].shape, dtype=nn.REAL)
        for j, (obs, a) in enumerate(zip(observations, actions)):
            done = j == len(observations) - 1
            agent.buffer.add(obs, a, terminal if done else observations[j + 1], done)

        policy = _actions_to_policy(net, free, actions, cfg.bit_min, cfg.bit_max)
        policy = enforce_budget(net, policy, cfg.c0)
        model = _quantize_and_finetune(net, policy, pool_x, pool_y, cfg, ft_seed)
        report = incremental_certify(
            make_quantized_classifier(model), cache, X, Y, cfg.sigma, cfg.n,
            cfg.alpha_zeta, net.num_classes, threads=cfg.threads,
            fallback=cfg.irs_fallback)
        quant_metrics = {
            "acr": report.acr,
            "acc": report.clean_accuracy,
            "acc_at_r": certified_accuracy(report.records, cfg.acc_radius),
            "val": _clean_accuracy(quantized_predict(model, X_val), Y),
        }
        reward = reward_variant(cfg.reward_mode, quant_metrics, orig_metrics)
        cost = policy_cost(net, policy)
        record = EpisodeRecord(t, policy, report.acr, reward,
                               cost.total_bops, cost.total_size_bits)
        history.append(record)
        agent.finalize_episode(reward)
        if best is None or reward > best.reward:
            best = record
            best_model = model
    return SearchResult(
        policy_optimal=best.policy if best else None,
        best_reward=best.reward if best else None,
        acr_orig=orig_report.acr,
        history=history,
        best_model=best_model,
        orig_report=orig_report,
        agent=agent,
    )


def evaluate_policy(net: nn.Network, policy: QuantPolicy, cert_x, cert_y,
                    pool_x, pool_y, cfg: SearchConfig):
    """Full (non-incremental) evaluation of a policy: quantize from the
    original weights, fine-tune exactly as the search loop does, then certify
    with n0 samples per input.  Returns (ACRReport, CostReport)."""
    validate_policy(net, policy)
    cost = policy_cost(net, policy)
    if cfg.c0 and cost.total_bops > cfg.c0:
        raise ValueError(
            f"policy BitOPs {cost.total_bops} exceed the budget {cfg.c0}")
    X = np.asarray(cert_x)[:cfg.num_cert_inputs]
    Y = np.asarray(cert_y)[:cfg.num_cert_inputs]
    ft_seed = _derived_seed(cfg.seed, 0xF17E)
    model = _quantize_and_finetune(net, policy, pool_x, pool_y, cfg, ft_seed)
    report, _ = certify_dataset(
        make_quantized_classifier(model), X, Y, cfg.sigma, cfg.n0, cfg.alpha,
        cfg.seed, net.num_classes, trace_n=0, threads=cfg.threads)
    return report, cost


def history_to_csv(history: list) -> str:
    lines = [HISTORY_CSV_HEADER]
    for rec in history:
        lines.append(f"{rec.episode},{rec.reward!r},{rec.acr_p!r},"
                     f"{rec.bops},{rec.size_bits},{rec.policy}")
    return "\n".join(lines) + "\n"
