"""ARQ: robustness-aware mixed-precision quantization.

A desk-scale pipeline that trains Gaussian-augmented classifiers, searches
per-layer bit-width policies with a DDPG agent rewarded by the change in
average certified radius, and certifies robustness via randomized smoothing
with an incremental fast path for modified models.
"""

__version__ = "0.1.0"

from .certify import (ACRReport, CertCache, CertificationRecord,
                      certified_accuracy, certify_dataset, certify_input,
                      incremental_certify, sample_counts)
from .cost import (CostReport, UnsatisfiableBudgetError, action_to_bitwidth,
                   enforce_budget, layer_bops, policy_cost)
from .data import gen_blobs, load_dataset, save_dataset, split_dataset
from .nn import (LayerSpec, Network, TrainConfig, compute_gradients, fine_tune,
                 forward, mlp, predict, sgd_step, tiny_convnet, train_gaussian)
from .quantize import (QuantPolicy, QuantizedNetwork, apply_policy,
                       calibrate_clip, quantize_tensor, quantized_forward,
                       uniform_policy)
from .search import (SearchConfig, SearchResult, evaluate_policy,
                     reward_variant, run_search)
from .stats import binom_lower_bound, binom_upper_bound, inv_norm_cdf, norm_cdf

__all__ = [name for name in dir() if not name.startswith("_")]
