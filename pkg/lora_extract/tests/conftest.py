import json

import pytest
import torch


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A small pretrained causal LM saved locally (built once per session).

    The sandbox has no model-hub access, so a deterministic randomly
    initialized checkpoint stands in for a downloaded small model; it is
    loaded through the same from_pretrained path as any hub model.
    """
    from transformers import GPT2Config, GPT2LMHeadModel

    torch.manual_seed(0)
    config = GPT2Config(
        vocab_size=259,
        n_positions=96,
        n_embd=32,
        n_layer=2,
        n_head=2,
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
    )
    model = GPT2LMHeadModel(config)
    path = tmp_path_factory.mktemp("model") / "tiny-lm"
    model.save_pretrained(path)
    return str(path)


DOMAINS = {
    "math": [
        ("add {a} and {b}", "the sum is {c}"),
        ("multiply {a} by {b}", "the product is {c}"),
        ("what is {a} minus {b}", "the difference is {c}"),
    ],
    "code": [
        ("write a function to double {a}", "def f(x): return 2 * x"),
        ("write a loop printing {a} items", "for i in range({a}): print(i)"),
        ("return the length of a list", "def f(xs): return len(xs)"),
    ],
    "story": [
        ("tell a story about a fox", "once a fox ran through the quiet forest"),
        ("tell a story about rain", "the rain sang softly on the old roof"),
        ("tell a story about a boat", "a small boat drifted past the sleeping town"),
    ],
}


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """~60 instruction/response pairs across three domains, as JSON-lines."""
    path = tmp_path_factory.mktemp("data") / "toy.jsonl"
    rows = []
    i = 0
    for tag, templates in DOMAINS.items():
        for rep in range(20):
            tmpl = templates[rep % len(templates)]
            a, b = 2 + rep, 3 + rep
            row = {
                "id": i,
                "instruction": tmpl[0].format(a=a, b=b, c=a + b),
                "response": tmpl[1].format(a=a, b=b, c=a + b),
                "source_tag": tag,
            }
            rows.append(row)
            i += 1
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return str(path)
