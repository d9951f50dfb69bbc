"""Named experiment manifests for the desk and paper profiles.

A manifest is a plain nested dict (the same shape a TOML manifest parses
into). ``desk`` halves model widths, trains with batch 64 and caps epochs at
50 so every experiment fits on one CPU core; ``paper`` uses the full
hyperparameters.
"""

from __future__ import annotations

import copy
import math

from .errors import ConfigError

PROFILES = ("desk", "paper")
PRESETS = ("fig2a", "fig2b", "order-relation", "set", "robustness")

# hyperparameters for the (out of scope) math problem-solving experiments; shipped for completeness
MATH_TRAIN = {"lr": 6e-4, "beta1": 0.9, "beta2": 0.995, "eps": 1e-9}

ADDITIVE_GRID = [0.0, 0.25, 0.5, 0.75, 1.0]
LINEAR_GRID = [f / math.sqrt(12) for f in (0.5, 0.75, 1.0, 1.5, 2.0)]


def _check_profile(profile: str) -> None:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")


def _stack(n_layers, n_heads, width):
    return {"n_layers": n_layers, "n_heads": n_heads, "d_model": width, "d_ff": width}


def sorting_models(profile: str) -> dict:
    """arch_b, a parameter-matched Transformer and the ablation model."""
    w = 64 if profile == "paper" else 32
    abstractor = {"n_layers": 2, "d_r": 2, "d_p": w, "d_s": w, "d_ff": w, "rel_activation": "softmax", "use_self_attention": True}
    return {
        "abstractor": {
            "kind": "arch_b",
            "d_input": 12,
            "encoder": _stack(2, 2, w),
            "decoder": _stack(2, 2, w),
            "abstractor": dict(abstractor),
        },
        "transformer": {"kind": "transformer", "d_input": 12, "encoder": _stack(4, 2, w), "decoder": _stack(4, 2, w)},
        "ablation": {
            "kind": "ablation",
            "d_input": 12,
            "encoder": _stack(2, 2, w),
            "decoder": _stack(2, 2, w),
            "abstractor": dict(abstractor, interface="standard"),
        },
    }


def transfer_models(profile: str) -> dict:
    w = 64 if profile == "paper" else 32
    return {
        "abstractor": {
            "kind": "arch_a",
            "d_input": 12,
            "decoder": _stack(1, 4, w),
            "abstractor": {"n_layers": 1, "d_r": 4, "d_p": w, "d_s": w, "d_ff": w, "rel_activation": "softmax"},
        },
        "transformer": sorting_models(profile)["transformer"],
    }


def order_models(profile: str, d: int = 8) -> dict:
    half = profile == "desk"
    return {
        "abstractor": {
            "kind": "arch_a",
            "d_input": d,
            "head": "binary",
            "max_input_len": 2,
            "abstractor": {
                "n_layers": 1,
                "d_r": 4,
                "d_s": 32 if half else 64,
                "d_p": 8 if half else 16,
                "d_ff": 32 if half else 64,
                "rel_activation": "sigmoid",
                "use_residual": False,
                "use_layer_norm": False,
            },
        },
        "corelnet_sym": {"kind": "corelnet_sym", "d_input": d, "head": "binary", "max_input_len": 2},
        "corelnet_asym": {"kind": "corelnet_asym", "d_input": d, "head": "binary", "max_input_len": 2},
    }


def set_models(profile: str) -> dict:
    half = profile == "desk"
    emb = 32 if half else 64
    corel = {"kind": "corelnet_sym", "d_input": 12, "head": "binary", "max_input_len": 3, "embedder_dim": emb}
    return {
        "abstractor": {
            "kind": "arch_a",
            "d_input": 12,
            "head": "binary",
            "max_input_len": 3,
            "embedder_dim": emb,
            "abstractor": {
                "n_layers": 1,
                "d_r": 4,
                "d_s": emb,
                "d_p": 8 if half else 16,
                "d_ff": 64 if half else 128,
                "rel_activation": "linear",
                "symmetric": True,
                "use_residual": False,
                "use_layer_norm": False,
            },
        },
        "corelnet_softmax": dict(corel, corelnet_softmax=True),
        "corelnet_nosoftmax": dict(corel, corelnet_softmax=False),
        "symbolic_mlp": {"kind": "symbolic_mlp", "d_input": 12, "head": "binary", "max_input_len": 1, "mlp_hidden": 64},
    }


def _sorting_train(profile: str) -> dict:
    if profile == "paper":
        return {"batch_size": 512, "max_epochs": 100}
    return {"batch_size": 64, "max_epochs": 50}


def preset(name: str, profile: str = "desk") -> dict:
    """Manifest dict for a named experiment (without a seed)."""
    _check_profile(profile)
    paper = profile == "paper"
    sorting_task = {"kind": "sorting", "n_train": 3000, "n_val": 500, "n_test": 1000}
    if name == "fig2a":
        return {
            "experiment": "curve",
            "profile": profile,
            "task": sorting_task,
            "train": _sorting_train(profile),
            "models": sorting_models(profile),
            "curve": {"sizes": list(range(100, 3001, 100)), "trials": 10 if paper else 5},
        }
    if name == "fig2b":
        return {
            "experiment": "pretrain-transfer",
            "profile": profile,
            "task": sorting_task,
            "train": _sorting_train(profile),
            "models": transfer_models(profile),
            "curve": {"sizes": list(range(100, 3001, 100)) if paper else [100, 200, 300, 400, 500], "trials": 10 if paper else 5},
            "pretrain": {"n_train": 3000},
        }
    if name == "order-relation":
        return {
            "experiment": "curve",
            "profile": profile,
            "task": {"kind": "order", "order_n": 32, "order_dim": 8},
            "train": {"batch_size": 64, "max_epochs": 100 if paper else 50, "lr": 1e-2},
            "models": order_models(profile),
            "curve": {"sizes": [64, 128, 192, 256, 320, 384, 448, 512], "trials": 10},
        }
    if name == "set":
        return {
            "experiment": "curve",
            "profile": profile,
            "task": {"kind": "set", "n_train": 2500, "n_val": 500, "n_test": 1000},
            "train": {"batch_size": 64, "max_epochs": 200 if paper else 50},
            "models": set_models(profile),
            "curve": {"sizes": [250, 500, 1000, 1500, 2000, 2500], "trials": 10 if paper else 5},
        }
    if name == "robustness":
        return {
            "experiment": "robustness",
            "profile": profile,
            "task": sorting_task,
            "train": _sorting_train(profile),
            "models": {k: v for k, v in sorting_models(profile).items() if k != "ablation"},
            "robustness": {
                "kinds": ["additive", "linear"],
                "additive_grid": list(ADDITIVE_GRID),
                "linear_grid": list(LINEAR_GRID),
                "trials": 5,
            },
        }
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")


def deep_merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins. Tables under ``models`` are replaced whole."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key == "models" or not (isinstance(value, dict) and isinstance(out.get(key), dict)):
            out[key] = copy.deepcopy(value)
        else:
            out[key] = deep_merge(out[key], value)
    return out
