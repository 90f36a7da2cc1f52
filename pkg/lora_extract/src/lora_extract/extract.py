"""Warm-up training and per-example gradient/feature extraction.

The adapter is trained on a seeded warm-up fraction with the base model
frozen; afterwards each example's loss is backpropagated on its own to
collect the full-dimension flattened adapter gradient (no random
projection). Encoder features are the mean-pooled final hidden state at
the same checkpoint, ids aligned with the gradient stream.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional

import numpy as np
import torch

from .gsg import StreamRecord, write_gsg
from .lora import (
    FLATTEN_ORDER_VERSION,
    adapter_dim,
    adapter_parameters,
    adapter_state,
    base_weight_hash,
    flatten_adapter_grads,
    inject_adapters,
    load_adapter_state,
)
from .tokenizer import encode_pair, load_tokenizer


@dataclass(frozen=True)
class ExtractConfig:
    """Extraction knobs, loadable from one JSON document."""

    model: str = ""
    dataset: str = ""
    rank: int = 32
    lora_alpha: float = 32.0
    warmup_fraction: float = 0.05
    warmup_epochs: int = 1
    warmup_lr: float = 1e-3
    max_examples: Optional[int] = None
    seed: int = 0
    adapter_path: str = "adapter.pt"
    gradients_path: str = "gradients.gsg"
    features_path: str = "features.gsg"

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not 0.0 < self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in (0, 1]")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")

    @classmethod
    def load(cls, path: str) -> "ExtractConfig":
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValueError(f"unknown config key {unknown[0]!r}")
        return cls(**obj)


@dataclass
class ExampleBatch:
    ids: List[int]
    instructions: List[str]
    responses: List[str]
    tags: List[str]


def load_dataset(config: ExtractConfig) -> ExampleBatch:
    """JSON-lines instruction/response pairs, ids defaulting to line order."""
    ids, instructions, responses, tags = [], [], [], []
    with open(config.dataset, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            obj = json.loads(line)
            ids.append(int(obj.get("id", len(ids))))
            instructions.append(str(obj["instruction"]))
            responses.append(str(obj["response"]))
            tags.append(str(obj.get("source_tag", "")))
            if config.max_examples is not None and len(ids) >= config.max_examples:
                break
    if not ids:
        raise ValueError(f"no examples in {config.dataset}")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate example ids in dataset")
    return ExampleBatch(ids=ids, instructions=instructions, responses=responses, tags=tags)


def load_model(config: ExtractConfig):
    from transformers import AutoModelForCausalLM

    model = AutoModelForCausalLM.from_pretrained(config.model)
    model.eval()
    return model


def _context_limit(model) -> int:
    cfg = model.config
    for attr in ("n_positions", "max_position_embeddings"):
        value = getattr(cfg, attr, None)
        if value:
            return int(value)
    return 1 << 30


def _example_loss(model, tokenizer, instruction: str, response: str, limit: int):
    """(loss tensor, token count) with the prompt masked out of the loss.

    The shifted cross-entropy is computed here rather than through the
    model's ``labels`` path, which would downcast the loss to float32 and
    defeat double-precision gradient checks. Returns (None, count) when
    the example exceeds the context window.
    """
    ids, prompt_len = encode_pair(tokenizer, instruction, response)
    if len(ids) > limit:
        return None, len(ids)
    if len(ids) < 2 or prompt_len >= len(ids):
        return None, len(ids)
    input_ids = torch.tensor([ids], dtype=torch.long)
    labels = input_ids.clone()
    labels[0, :prompt_len] = -100
    logits = model(input_ids=input_ids).logits
    shift_logits = logits[0, :-1, :]
    shift_labels = labels[0, 1:]
    loss = torch.nn.functional.cross_entropy(
        shift_logits, shift_labels, ignore_index=-100
    )
    return loss, len(ids)


def warmup_adapter(config: ExtractConfig) -> Dict:
    """Train the adapter on the warm-up split; base weights stay frozen.

    Writes a checkpoint holding the adapter tensors, the wrapped-module
    order, the warm-up subset ids, and the base-weight hashes measured
    before and after training (the frozen-base proof).
    """
    data = load_dataset(config)
    model = load_model(config)
    tokenizer = load_tokenizer(config.model)
    wrapped = inject_adapters(model, config.rank, config.lora_alpha, seed=config.seed)
    hash_before = base_weight_hash(model)

    rng = np.random.default_rng(config.seed)
    n = len(data.ids)
    n_warm = max(1, int(round(config.warmup_fraction * n)))
    subset = rng.choice(n, size=n_warm, replace=False)
    subset_ids = [data.ids[i] for i in subset]

    limit = _context_limit(model)
    params = adapter_parameters(model, wrapped)
    optimizer = torch.optim.SGD(params, lr=config.warmup_lr)
    model.train()
    for _ in range(config.warmup_epochs):
        order = rng.permutation(n_warm)
        for j in order:
            i = int(subset[j])
            loss, _ = _example_loss(
                model, tokenizer, data.instructions[i], data.responses[i], limit
            )
            if loss is None:
                continue
            optimizer.zero_grad()
            loss.backward()
            if not torch.isfinite(loss):
                raise ValueError("warm-up diverged; lower warmup_lr")
            optimizer.step()
    model.eval()

    hash_after = base_weight_hash(model)
    if hash_before != hash_after:
        raise RuntimeError("base weights changed during warm-up (frozen-base violation)")

    checkpoint = {
        "adapter": adapter_state(model, wrapped),
        "wrapped_modules": wrapped,
        "rank": config.rank,
        "lora_alpha": config.lora_alpha,
        "flatten_order_version": FLATTEN_ORDER_VERSION,
        "seed": config.seed,
        "warmup_subset_ids": subset_ids,
        "base_hash_before": hash_before,
        "base_hash_after": hash_after,
        "model": config.model,
    }
    torch.save(checkpoint, config.adapter_path)
    return checkpoint


def _restore(config: ExtractConfig, checkpoint: Optional[Dict]):
    if checkpoint is None:
        checkpoint = torch.load(config.adapter_path, weights_only=False)
    model = load_model(config)
    tokenizer = load_tokenizer(config.model)
    wrapped = list(checkpoint["wrapped_modules"])
    inject_adapters(
        model, int(checkpoint["rank"]), float(checkpoint["lora_alpha"]),
        seed=int(checkpoint["seed"]),
    )
    load_adapter_state(model, wrapped, checkpoint["adapter"])
    model.eval()
    return model, tokenizer, wrapped


def extract_gradients(config: ExtractConfig, checkpoint: Optional[Dict] = None) -> int:
    """Write one flattened adapter gradient per example to the stream.

    Examples exceeding the context window are skipped with a logged id.
    Returns the number of records written.
    """
    data = load_dataset(config)
    model, tokenizer, wrapped = _restore(config, checkpoint)
    dim = adapter_dim(model, wrapped)
    limit = _context_limit(model)

    records = []
    for i, rec_id in enumerate(data.ids):
        loss, n_tokens = _example_loss(
            model, tokenizer, data.instructions[i], data.responses[i], limit
        )
        if loss is None:
            print(f"skipping id {rec_id}: {n_tokens} tokens exceeds context {limit}",
                  file=sys.stderr)
            continue
        model.zero_grad(set_to_none=True)
        loss.backward()
        grad = flatten_adapter_grads(model, wrapped)
        assert grad.shape == (dim,)
        records.append(
            StreamRecord(
                id=rec_id,
                vector=grad.astype(np.float32),
                source_tag=data.tags[i],
                text=f"{data.instructions[i]} {data.responses[i]}",
            )
        )
    return write_gsg(records, config.gradients_path)


def extract_features(config: ExtractConfig, checkpoint: Optional[Dict] = None) -> int:
    """Write one mean-pooled final-hidden-state feature per example.

    Ids (and context-window skips) align exactly with the gradient stream.
    """
    data = load_dataset(config)
    model, tokenizer, wrapped = _restore(config, checkpoint)
    limit = _context_limit(model)

    records = []
    with torch.no_grad():
        for i, rec_id in enumerate(data.ids):
            ids, _ = encode_pair(tokenizer, data.instructions[i], data.responses[i])
            if len(ids) > limit or len(ids) < 2:
                print(f"skipping id {rec_id}: {len(ids)} tokens exceeds context {limit}",
                      file=sys.stderr)
                continue
            input_ids = torch.tensor([ids], dtype=torch.long)
            out = model(input_ids=input_ids, output_hidden_states=True)
            pooled = out.hidden_states[-1][0].mean(dim=0)
            records.append(
                StreamRecord(
                    id=rec_id,
                    vector=pooled.cpu().numpy().astype(np.float32),
                    source_tag=data.tags[i],
                    text=f"{data.instructions[i]} {data.responses[i]}",
                )
            )
    return write_gsg(records, config.features_path)
