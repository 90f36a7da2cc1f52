"""lora_extract: adapter-gradient and feature extraction to .gsg streams."""

from .extract import (
    ExtractConfig,
    extract_features,
    extract_gradients,
    load_dataset,
    warmup_adapter,
)
from .gsg import StreamRecord, write_gsg
from .lora import (
    DEFAULT_TARGET_SUFFIXES,
    FLATTEN_ORDER_VERSION,
    LoRALinear,
    adapter_dim,
    base_weight_hash,
    inject_adapters,
)
from .tokenizer import ByteTokenizer, load_tokenizer

__version__ = "0.1.0"
