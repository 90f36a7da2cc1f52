"""Byte-level fallback tokenizer for locally built toy models.

Tiny models created for CPU smoke runs usually ship without tokenizer
files; UTF-8 bytes (ids 0..255) plus BOS/EOS/PAD specials are enough for
deterministic desk-scale extraction.
"""

from __future__ import annotations

from typing import List


class ByteTokenizer:
    BOS = 256
    EOS = 257
    PAD = 258
    vocab_size = 259

    def encode(self, text: str) -> List[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


def load_tokenizer(model_path: str):
    """AutoTokenizer when the checkpoint ships a working one, byte-level otherwise.

    A checkpoint without tokenizer files can yield a degenerate tokenizer
    (empty vocab) instead of an error, so the loaded tokenizer is probed
    before being trusted.
    """
    try:
        from transformers import AutoTokenizer

        tok = AutoTokenizer.from_pretrained(model_path)
        probe = tok.encode("probe text", add_special_tokens=False)
        if not probe:
            return ByteTokenizer()
        return tok
    except Exception:
        return ByteTokenizer()


def encode_pair(tokenizer, instruction: str, response: str):
    """Token ids for prompt+response, and the prompt length for loss masking."""
    if isinstance(tokenizer, ByteTokenizer):
        prompt = tokenizer.encode(instruction + "\n")
        full = [tokenizer.BOS] + prompt + tokenizer.encode(response) + [tokenizer.EOS]
        prompt_len = 1 + len(prompt)
        return full, prompt_len
    prompt_ids = tokenizer.encode(instruction + "\n", add_special_tokens=False)
    response_ids = tokenizer.encode(response, add_special_tokens=False)
    full = prompt_ids + response_ids
    eos = getattr(tokenizer, "eos_token_id", None)
    if eos is not None:
        full = full + [eos]
    return full, len(prompt_ids)
