"""Model container format, run configuration, and run-directory plumbing.

Models persist in the versioned ARQNET container: magic, format version,
layer-spec table, then per-layer row-major little-endian float64 parameter
arrays.  Save/load round-trips bit-exactly.

Run configuration is flat key-value INI text with one section per concern;
unknown sections or keys are rejected, every key has a default, and the fully
resolved configuration is snapshotted into each run's output directory.  The
environment variable ``ARQ_SEED`` overrides every section's seed.
"""

from __future__ import annotations

import configparser
import os
import struct
from pathlib import Path

import numpy as np

from .agent import AgentConfig
from .nn import LayerSpec, Network, TrainConfig
from .search import SearchConfig

_MODEL_MAGIC = b"ARQNET"
_MODEL_VERSION = 1

_KIND_IDS = {"dense": 0, "conv2d": 1, "relu": 2, "avgpool2d": 3, "flatten": 4}
_KIND_NAMES = {v: k for k, v in _KIND_IDS.items()}

FORMAT_VERSIONS = {
    "ARQNET": _MODEL_VERSION,
    "ARQDATA": 1,
    "ARQCACHE": 1,
    "ARQDDPG": 1,
}


class ModelFormatError(ValueError):
    """Corrupt, truncated, or wrong-version model file."""


class ConfigError(ValueError):
    """Malformed run configuration."""


# ---------------------------------------------------------------------------
# ARQNET model container


def save_model(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<III", _MODEL_VERSION, len(net.layers),
                             net.num_classes))
        fh.write(struct.pack("<I", len(net.input_shape)))
        fh.write(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
        for spec in net.layers:
            fh.write(struct.pack("<IIIIIIIQI", _KIND_IDS[spec.kind], spec.index,
                                 spec.c_in, spec.c_out, spec.kernel_size,
                                 spec.stride, spec.input_feature_size,
                                 spec.n_params, spec.is_depthwise))
        for p in net.params:
            fh.write(struct.pack("<I", len(p)))
            for key in sorted(p):
                arr = np.ascontiguousarray(p[key], dtype="<f8")
                fh.write(struct.pack("<cI", key.encode(), arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())


def load_model(path) -> Network:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != _MODEL_MAGIC:
        raise ModelFormatError("not an ARQNET file (bad magic)")
    try:
        off = 6
        version, n_layers, num_classes = struct.unpack_from("<III", blob, off)
        off += 12
        if version != _MODEL_VERSION:
            raise ModelFormatError(
                f"unsupported ARQNET version {version} (expected {_MODEL_VERSION})")
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        input_shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        layers = []
        for _ in range(n_layers):
            kind_id, index, c_in, c_out, kernel, stride, feat, n_params, depth = \
                struct.unpack_from("<IIIIIIIQI", blob, off)
            off += struct.calcsize("<IIIIIIIQI")
            if kind_id not in _KIND_NAMES:
                raise ModelFormatError(f"unknown layer kind id {kind_id}")
            layers.append(LayerSpec(index, _KIND_NAMES[kind_id], c_in, c_out,
                                    kernel, stride, feat, n_params, depth))
        params = []
        for _ in range(n_layers):
            (count,) = struct.unpack_from("<I", blob, off)
            off += 4
            p = {}
            for _ in range(count):
                key_raw, andim = struct.unpack_from("<cI", blob, off)
                off += struct.calcsize("<cI")
                shape = struct.unpack_from(f"<{andim}I", blob, off)
                off += 4 * andim
                n_vals = int(np.prod(shape)) if shape else 1
                arr = np.frombuffer(blob, dtype="<f8", count=n_vals, offset=off)
                off += 8 * n_vals
                p[key_raw.decode()] = arr.reshape(shape).copy()
            params.append(p)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"truncated or corrupt ARQNET file: {exc}") from None
    return Network(layers, params, num_classes, tuple(input_shape))


# ---------------------------------------------------------------------------
# run configuration

_SCHEMA = {
    "data": {
        "classes": (int, 3),
        "image_size": (int, 8),
        "channels": (int, 1),
        "per_class": (int, 800),
        "margin": (float, 8.0),
        "noise": (float, 0.1),
        "train_fraction": (float, 0.8),
        "cert_fraction": (float, 0.1),
        "seed": (int, 0),
    },
    "train": {
        "arch": (str, "tiny"),
        "conv_channels": (str, "8,16,16"),
        "hidden": (str, "32,32"),
        "learning_rate": (float, 0.05),
        "momentum": (float, 0.9),
        "weight_decay": (float, 1e-4),
        "epochs": (int, 30),
        "batch_size": (int, 64),
        "sigma": (float, 0.25),
        "seed": (int, 0),
    },
    "certify": {
        "sigma": (float, 0.25),
        "n0": (int, 4000),
        "alpha": (float, 0.001),
        "n_sel": (int, 0),
        "trace_n": (int, 200),
        "seed": (int, 0),
    },
    "search": {
        "sigma": (float, 0.25),
        "n0": (int, 4000),
        "n": (int, 200),
        "n1": (int, 512),
        "c0": (int, 0),
        "budget_bits": (int, 4),
        "episodes": (int, 60),
        "bit_min": (int, 2),
        "bit_max": (int, 8),
        "alpha": (float, 0.001),
        "alpha_zeta": (float, 0.001),
        "cert_inputs": (int, 100),
        "finetune_lr": (float, 0.01),
        "finetune_batch": (int, 64),
        "recalibrate": (bool, True),
        "reward_mode": (str, "acr"),
        "acc_radius": (float, 0.5),
        "irs_fallback": (bool, False),
        "seed": (int, 0),
    },
    "agent": {
        "actor_lr": (float, 1e-4),
        "critic_lr": (float, 1e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "explore_std0": (float, 0.5),
        "explore_decay": (float, 0.99),
        "tau": (float, 0.01),
        "gamma": (float, 1.0),
        "batch_size": (int, 64),
        "warmup_episodes": (int, 8),
        "buffer_capacity": (int, 2048),
        "hidden": (str, "64,64"),
    },
}


def _coerce(section: str, key: str, raw: str):
    typ, _ = _SCHEMA[section][key]
    if typ is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: expected {typ.__name__}, got {raw!r}") from None


class RunConfig:
    """Resolved configuration: defaults overlaid with an INI file and the
    ARQ_SEED environment override."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @classmethod
    def load(cls, path=None, seed_override: int | None = None) -> "RunConfig":
        values = {s: {k: d for k, (_, d) in keys.items()}
                  for s, keys in _SCHEMA.items()}
        if path is not None:
            parser = configparser.ConfigParser()
            read = parser.read(path)
            if not read:
                raise ConfigError(f"cannot read config file {path}")
            for section in parser.sections():
                if section not in _SCHEMA:
                    raise ConfigError(f"unknown config section [{section}]")
                for key, raw in parser.items(section):
                    if key not in _SCHEMA[section]:
                        raise ConfigError(f"unknown key {key!r} in [{section}]")
                    values[section][key] = _coerce(section, key, raw)
        env_seed = os.environ.get("ARQ_SEED")
        if env_seed is not None:
            try:
                seed_override = int(env_seed)
            except ValueError:
                raise ConfigError(f"ARQ_SEED must be an integer, got {env_seed!r}")
        if seed_override is not None:
            for section in values:
                if "seed" in values[section]:
                    values[section]["seed"] = seed_override
        return cls(values)

    def dump(self, path) -> None:
        lines = []
        for section in _SCHEMA:
            lines.append(f"[{section}]")
            for key in _SCHEMA[section]:
                lines.append(f"{key} = {self.values[section][key]}")
            lines.append("")
        Path(path).write_text("\n".join(lines))

    # -- typed views --------------------------------------------------------

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(learning_rate=t["learning_rate"], momentum=t["momentum"],
                           weight_decay=t["weight_decay"], epochs=t["epochs"],
                           batch_size=t["batch_size"], noise_sigma=t["sigma"],
                           seed=t["seed"])

    def agent_config(self, seed: int) -> AgentConfig:
        a = self.values["agent"]
        return AgentConfig(actor_lr=a["actor_lr"], critic_lr=a["critic_lr"],
                           adam_beta1=a["beta1"], adam_beta2=a["beta2"],
                           explore_std0=a["explore_std0"],
                           explore_decay=a["explore_decay"], tau=a["tau"],
                           gamma=a["gamma"], batch_size=a["batch_size"],
                           warmup_episodes=a["warmup_episodes"],
                           buffer_capacity=a["buffer_capacity"],
                           hidden=_int_tuple(a["hidden"]), seed=seed)

    def search_config(self, threads: int = 1) -> SearchConfig:
        s = self.values["search"]
        try:
            return SearchConfig(
                sigma=s["sigma"], n0=s["n0"], n=s["n"], n1=s["n1"], c0=s["c0"],
                episodes=s["episodes"], bit_min=s["bit_min"], bit_max=s["bit_max"],
                alpha=s["alpha"], alpha_zeta=s["alpha_zeta"],
                num_cert_inputs=s["cert_inputs"], seed=s["seed"],
                finetune_lr=s["finetune_lr"], finetune_batch=s["finetune_batch"],
                recalibrate_after_finetune=s["recalibrate"],
                reward_mode=s["reward_mode"], acc_radius=s["acc_radius"],
                threads=threads, irs_fallback=s["irs_fallback"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _int_tuple(raw: str) -> tuple:
    try:
        return tuple(int(tok) for tok in raw.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from None


def int_tuple(raw: str) -> tuple:
    return _int_tuple(raw)


def make_run_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out
