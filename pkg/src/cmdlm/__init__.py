"""Command-line language model toolkit for intrusion detection.

Pipeline: ingest or synthesize command-line logs, parse and frequency-filter
them, learn a byte-level BPE vocabulary, pretrain a small transformer encoder
on a masked-token objective, then score commands four ways: PCA
reconstruction error over embeddings (unsupervised), reconstruction-based
tuning, classification probing of the frozen encoder (single or multi-line
inputs), and similarity to flagged-malicious training neighbors. An
evaluation harness reports ranked precision and thresholded precision at a
chosen in-box recall.
"""

from .corpus import (
    CommandRecord,
    Corpus,
    apply_supervision,
    deduplicate,
    generate_synthetic_corpus,
    load_records,
    save_records,
    simulate_commercial_ids,
)
from .shellparse import (
    AllowList,
    ParseError,
    ParseTree,
    build_allowlist,
    build_frequency_table,
    extract_command_names,
    filter_valid,
    load_allowlist,
    parse_command_line,
    render,
)
from .bpe import Vocab, decode, encode, load_vocab, save_vocab, train_bpe
from .transformer import (
    MaskedBatch,
    ModelParams,
    PretrainOptions,
    TransformerConfig,
    embed_cls,
    embed_corpus_cls,
    embed_corpus_mean,
    embed_mean,
    forward,
    init_params,
    mlm_loss,
    predict_masked,
    pretrain,
)
from .pca import PCAProjector, fit_pca, rank_by_error, reconstruction_error, reconstruction_errors
from .tuning import (
    ClassifierHead,
    TuneConfig,
    build_multiline_examples,
    recon_ranking_loss,
    score_classification,
    tune_classification,
    tune_reconstruction,
)
from .retrieval import (
    EmbeddingIndex,
    build_index,
    index_from_embeddings,
    load_index,
    save_index,
    score_knn_majority,
    score_knn_malicious,
)
from .evaluation import (
    EvalReport,
    ScoredPrediction,
    estimate_commercial_recall,
    evaluate,
    f1,
    precision_at_top,
    precision_at_threshold,
    threshold_for_flagged_recall,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
