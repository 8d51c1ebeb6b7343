"""Few-shot refinement for text-to-image retrieval over precomputed
embedding corpora.

The package has no encoders: images and query texts arrive as unit-norm
embedding records, retrieval is cosine top-k, and user feedback refines a
query either by prompt tuning (a learned context added to the text anchor)
or by fusing the text with marked reference images.
"""

from .benchmark import (
    BenchmarkManifest,
    FewShotReferenceSet,
    QueryEntry,
    load_manifest,
    report_stats,
    save_manifest,
    smart_split,
)
from .embeddings import (
    EmbeddingCorpus,
    EmbeddingRecord,
    cosine,
    normalize,
    read_embeddings,
    write_embeddings,
)
from .errors import FsretError
from .fusion import (
    ComposedQuery,
    CtrModel,
    CtrTrainConfig,
    TripletBatch,
    TripletDataset,
    compose,
    encode_query_ctr,
    load_ctr_model,
    save_ctr_model,
    train_ctr,
)
from .indexing import (
    ClusteredCosineIndex,
    ExactCosineIndex,
    build_clustered,
    build_exact,
    load_index,
    save_index,
    search,
)
from .metrics import (
    MetricReport,
    RankedRun,
    average_precision_at_k,
    evaluate_run,
    read_run,
    recall_at_k,
    write_run,
)
from .mining import CaptionedItem, MinedTriplet, load_triplets, mine_triplets
from .pipeline import (
    run_ctr_refined,
    run_prompt_refined,
    run_zero_shot,
    select_references_for_benchmark,
    train_benchmark_ctr,
)
from .prompt_tuning import (
    FewShotBatch,
    FewShotItem,
    TrainConfig,
    TrainedPrompt,
    load_prompt,
    save_prompt,
    train_prompt,
)
from .selection import (
    SelectionResult,
    save_selection_reports,
    score_individual,
    select_combination,
)
from .service import create_app
from .synthetic import SyntheticBenchmark, generate_benchmark, save_benchmark

__version__ = "0.1.0"

__all__ = [
    "BenchmarkManifest",
    "CaptionedItem",
    "ClusteredCosineIndex",
    "ComposedQuery",
    "CtrModel",
    "CtrTrainConfig",
    "EmbeddingCorpus",
    "EmbeddingRecord",
    "ExactCosineIndex",
    "FewShotBatch",
    "FewShotItem",
    "FewShotReferenceSet",
    "FsretError",
    "MetricReport",
    "MinedTriplet",
    "QueryEntry",
    "RankedRun",
    "SelectionResult",
    "SyntheticBenchmark",
    "TrainConfig",
    "TrainedPrompt",
    "TripletBatch",
    "TripletDataset",
    "average_precision_at_k",
    "build_clustered",
    "build_exact",
    "cosine",
    "create_app",
    "compose",
    "encode_query_ctr",
    "evaluate_run",
    "generate_benchmark",
    "load_ctr_model",
    "load_index",
    "load_manifest",
    "load_prompt",
    "load_triplets",
    "mine_triplets",
    "normalize",
    "read_embeddings",
    "read_run",
    "recall_at_k",
    "report_stats",
    "run_ctr_refined",
    "run_prompt_refined",
    "run_zero_shot",
    "save_benchmark",
    "save_ctr_model",
    "save_index",
    "save_manifest",
    "save_prompt",
    "score_individual",
    "search",
    "select_combination",
    "select_references_for_benchmark",
    "smart_split",
    "save_selection_reports",
    "train_benchmark_ctr",
    "train_ctr",
    "train_prompt",
    "write_embeddings",
    "write_run",
]
