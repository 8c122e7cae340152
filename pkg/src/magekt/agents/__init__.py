"""Multi-agent KC relation extraction."""

from .backends import (AgentBackend, BackendError, ChatCompletionBackend, HeuristicBackend, HeuristicRules,
                       standardize_name)
from .evaluation import evaluate_relations, load_gold
from .evidence import EvidenceIndex, PairEvidence, compute_pair_evidence
from .pipeline import (ExtractionConfig, ExtractionResult, RelationDecision, RelationProposal, SchemaFailure,
                       ScoreVector, arbitrate, complete_concept, cross_correct, extract_relations,
                       propose_relation, run_extraction, score_relation)

__all__ = [
    "AgentBackend", "BackendError", "ChatCompletionBackend", "EvidenceIndex", "ExtractionConfig",
    "ExtractionResult", "HeuristicBackend", "HeuristicRules", "PairEvidence", "RelationDecision",
    "RelationProposal", "SchemaFailure", "ScoreVector", "arbitrate", "complete_concept",
    "compute_pair_evidence", "cross_correct", "evaluate_relations", "extract_relations", "load_gold",
    "propose_relation", "run_extraction", "score_relation", "standardize_name",
]
