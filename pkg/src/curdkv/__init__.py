"""Value-centric KV-cache compression with CUR leverage scores.

``curdkv`` scores cached tokens by (sketched) leverage of their key and value
rows, keeps the best ones under a per-group budget (CurDKV) or a layer-wide
pooled budget (AdaCurDKV), and measures what eviction costs in attention
output.
"""

__version__ = "0.1.0"

from .cache import AttentionWeights, KVCache, append_step, attention_output, generate_synthetic, prefill
from .evaluate import EvalReport, cache_bytes, eviction_loss, lemma1_check, qk_loss, run_sweep
from .linalg import SvdResult, frobenius_norm, gaussian_sketch, matmul, softmax_rows, svd_thin
from .policy import (
    CompressionConfig,
    Policy,
    SelectionResult,
    apply_selection,
    select,
    select_adacurdkv,
    select_chunked,
    select_curdkv,
    select_window_sinks,
)
from .scoring import (
    Method,
    ScoreVector,
    attention_sum_scores,
    combine_kv_scores,
    exact_col_leverage,
    exact_row_leverage,
    key_norm_scores,
    sketch_row_scores,
)
