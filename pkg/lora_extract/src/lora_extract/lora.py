"""Low-rank adapters injected into a frozen causal LM.

Adapters wrap the projection layers (both ``nn.Linear`` and GPT-2 style
``Conv1D``) matched by name suffix, in model-traversal order. The flat
gradient/parameter layout is versioned and stable: wrapped layers in
traversal order, matrix A before matrix B, each row-major. Centroids in
gradient space are meaningless if this order ever drifts.
"""

from __future__ import annotations

import hashlib
from typing import Dict, List, Tuple

import torch
from torch import nn

FLATTEN_ORDER_VERSION = 1

DEFAULT_TARGET_SUFFIXES = (
    "c_attn", "c_proj", "c_fc",
    "q_proj", "k_proj", "v_proj", "o_proj",
    "up_proj", "down_proj", "gate_proj",
)


class LoRALinear(nn.Module):
    """y = base(x) + (alpha/r) * x A^T B^T with the base module frozen."""

    def __init__(self, base: nn.Module, in_features: int, out_features: int,
                 rank: int, alpha: float):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, in_features))
        self.lora_B = nn.Parameter(torch.zeros(out_features, rank))
        nn.init.normal_(self.lora_A, std=0.02)

    def forward(self, x):
        return self.base(x) + self.scaling * ((x @ self.lora_A.T) @ self.lora_B.T)


def _wrappable(module: nn.Module) -> Tuple[int, int] | None:
    """(in_features, out_features) for supported projection modules."""
    if isinstance(module, nn.Linear):
        return module.in_features, module.out_features
    # transformers Conv1D stores weight as (in, out)
    if type(module).__name__ == "Conv1D" and hasattr(module, "weight"):
        w = module.weight
        if w.ndim == 2:
            return int(w.shape[0]), int(w.shape[1])
    return None


def inject_adapters(
    model: nn.Module,
    rank: int,
    alpha: float,
    target_suffixes=DEFAULT_TARGET_SUFFIXES,
    seed: int = 0,
) -> List[str]:
    """Freeze the model and wrap matching projections with adapters.

    Returns the wrapped module names in traversal order (the flattening
    order). Adapter initialization is seeded so reruns are identical.
    """
    torch.manual_seed(seed)
    for param in model.parameters():
        param.requires_grad_(False)

    targets = []
    for name, module in model.named_modules():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in target_suffixes:
            shape = _wrappable(module)
            if shape is not None:
                targets.append((name, module, shape))
    if not targets:
        raise ValueError(
            f"no adapter targets matched suffixes {tuple(target_suffixes)}"
        )

    wrapped_names = []
    for name, module, (in_f, out_f) in targets:
        parent_name, _, leaf = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        setattr(parent, leaf, LoRALinear(module, in_f, out_f, rank, alpha))
        wrapped_names.append(name)
    return wrapped_names


def adapter_modules(model: nn.Module, wrapped_names: List[str]) -> List[LoRALinear]:
    return [model.get_submodule(name) for name in wrapped_names]


def adapter_parameters(model: nn.Module, wrapped_names: List[str]) -> List[nn.Parameter]:
    params = []
    for mod in adapter_modules(model, wrapped_names):
        params.extend([mod.lora_A, mod.lora_B])
    return params


def adapter_dim(model: nn.Module, wrapped_names: List[str]) -> int:
    return sum(p.numel() for p in adapter_parameters(model, wrapped_names))


def flatten_adapter_grads(model: nn.Module, wrapped_names: List[str]):
    """Flatten adapter gradients: layer order, A before B, row-major."""
    import numpy as np

    chunks = []
    for mod in adapter_modules(model, wrapped_names):
        for p in (mod.lora_A, mod.lora_B):
            grad = p.grad
            if grad is None:
                grad = torch.zeros_like(p)
            chunks.append(grad.detach().cpu().numpy().ravel())
    return np.concatenate(chunks)


def adapter_state(model: nn.Module, wrapped_names: List[str]) -> Dict[str, torch.Tensor]:
    state = {}
    for name in wrapped_names:
        mod = model.get_submodule(name)
        state[f"{name}.lora_A"] = mod.lora_A.detach().cpu().clone()
        state[f"{name}.lora_B"] = mod.lora_B.detach().cpu().clone()
    return state


def load_adapter_state(model: nn.Module, wrapped_names: List[str], state) -> None:
    for name in wrapped_names:
        mod = model.get_submodule(name)
        with torch.no_grad():
            mod.lora_A.copy_(state[f"{name}.lora_A"])
            mod.lora_B.copy_(state[f"{name}.lora_B"])


def base_weight_hash(model: nn.Module) -> str:
    """SHA-256 over every non-adapter parameter, in name order."""
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        if "lora_A" in name or "lora_B" in name:
            continue
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
