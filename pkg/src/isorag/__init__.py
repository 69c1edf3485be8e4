"""Isolate-then-aggregate defense for retrieval-augmented generation, with
certified worst-case response-quality lower bounds under bounded retrieval
corruption."""

from .core import (
    ABSTAIN_PHRASE,
    AttackSpec,
    DefenseConfig,
    Passage,
    QualityScore,
    Query,
    ReferenceAnswer,
    Response,
    RetrievalSet,
    abstained_response,
    concat,
)
from .backends import (
    CachedBackend,
    HTTPBackend,
    MockBackend,
    MockModelTable,
    MockRule,
    ModelRequest,
    TokenDistribution,
    Vocab,
    load_table,
)
from .isolation import (
    GroupCase,
    Grouping,
    PassageGroup,
    benign_group_cases,
    benign_group_cases_injection,
    benign_group_cases_modification,
    iso_group,
)
from .aggregation import (
    abstain_filter,
    get_unique_keywords,
    rrag_decoding,
    rrag_keyword,
    rrag_vote,
    run_inference,
    vanilla_inference,
)
from .certification import (
    CertificationResult,
    certify,
    certify_decoding,
    certify_keyword,
    certify_vote,
)
from .attacks import (
    AttackOutcome,
    OneHotSequence,
    OracleResult,
    build_pia,
    build_poison,
    inject,
    oracle_attack,
)
from .evaluation import (
    DatasetRecord,
    ReportRow,
    aggregate_report,
    load_dataset,
    metric_substring,
)
from .instructions import TemplateStore, default_templates

__version__ = "0.1.0"
