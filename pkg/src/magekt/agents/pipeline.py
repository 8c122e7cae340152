"""Five-step multi-agent KC relation extraction.

1. concept completion (semantic agent)
2. preliminary relation judgment (semantic agent)
3. type-specific scoring (scoring agent)
4. arbitration against type axioms and graph topology (arbitration agent)
5. two-round persona cross-correction of doubtful cases
"""

from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import jsonschema

from ..core import ConceptProfile, InteractionLog, KcGraph, RelationType
from ..graphs import build_kc_graph, creates_cycle
from .backends import CRITERIA, PERSONAS, RESPONSE_SCHEMAS, AgentBackend
from .evidence import EvidenceIndex, PairEvidence

log = logging.getLogger(__name__)


class SchemaFailure(RuntimeError):
    """Backend kept returning responses that violate the task schema."""


@dataclass(frozen=True)
class ExtractionConfig:
    candidate_min_cooccurrence: int = 3
    candidate_min_overlap: float = 0.3
    doubt_threshold: float = 3.0
    max_retries: int = 3
    max_in_flight: int = 4
    enable_completion: bool = True
    enable_correction: bool = True


@dataclass(frozen=True)
class RelationProposal:
    pair: tuple[str, str]
    proposed_type: RelationType
    justification: str = ""
    evidence_excerpts: tuple[str, ...] = ()
    doubtful: bool = False


@dataclass(frozen=True)
class ScoreVector:
    scores: Mapping[str, int]
    explanations: Mapping[str, str] = field(default_factory=dict)
    doubtful: bool = False

    @property
    def mean(self) -> float:
        return sum(self.scores.values()) / len(self.scores) if self.scores else 0.0


@dataclass(frozen=True)
class RelationDecision:
    pair: tuple[str, str]
    final_type: RelationType
    confidence: float
    provenance: str = "arbitration"
    doubtful: bool = False
    audit: Mapping = field(default_factory=dict)

    @property
    def evidence(self) -> str:
        return json.dumps(self.audit, sort_keys=True, default=str)


def _ask(backend: AgentBackend, role: str, task: str, payload: dict, max_retries: int) -> dict:
    """Call the backend and validate against the task schema, with repair retries."""
    schema = RESPONSE_SCHEMAS[task]
    error = None
    for _ in range(max_retries + 1):
        body = payload if error is None else {**payload, "_repair": error}
        try:
            resp = backend.respond(role, task, body)
            jsonschema.validate(resp, schema)
            return resp
        except (jsonschema.ValidationError, ValueError, KeyError) as exc:
            error = getattr(exc, "message", None) or str(exc)
            log.debug("%s/%s rejected: %s", role, task, error)
    raise SchemaFailure(f"{role}/{task}: no valid response after {max_retries + 1} attempts ({error})")


def _profile_payload(p: ConceptProfile) -> dict:
    return {"kc_id": p.kc_id, "name": p.name, "definition": p.definition, "category": p.category}


def _oriented(ev: PairEvidence, pair: tuple[str, str]) -> PairEvidence:
    return ev if (ev.a, ev.b) == pair else ev.swapped()


def _orient(a: str, b: str, direction: str) -> tuple[str, str]:
    return (b, a) if direction == "b->a" else (a, b)


def complete_concept(kc: ConceptProfile | str, backend: AgentBackend, max_retries: int = 3) -> ConceptProfile:
    """Step 1: standard name, definition and category for one KC."""
    if isinstance(kc, str):
        kc = ConceptProfile(kc, kc)
    if not kc.name.strip():
        raise ValueError(f"KC {kc.kc_id!r} has an empty name")
    if kc.complete:
        return kc
    try:
        resp = _ask(backend, "semantic", "complete_concept", {"kc_id": kc.kc_id, "name": kc.name}, max_retries)
    except SchemaFailure as exc:
        log.warning("completion degraded for %s: %s", kc.kc_id, exc)
        return ConceptProfile(kc.kc_id, kc.name, kc.name, kc.category or "unknown", degraded=True)
    return ConceptProfile(kc.kc_id, resp["name"], resp["definition"], resp["category"])


def raw_profile(kc_id: str, name: str) -> ConceptProfile:
    """Profile used when completion is disabled: the label stands in for everything."""
    return ConceptProfile(kc_id, name, name, "", degraded=True)


def propose_relation(pa: ConceptProfile, pb: ConceptProfile, ev: PairEvidence, backend: AgentBackend,
                     max_retries: int = 3) -> RelationProposal:
    """Step 2. The returned pair is oriented along the proposed direction."""
    ev = _oriented(ev, (pa.kc_id, pb.kc_id))
    payload = {"a": _profile_payload(pa), "b": _profile_payload(pb), "evidence": ev.to_dict()}
    try:
        resp = _ask(backend, "semantic", "propose_relation", payload, max_retries)
    except SchemaFailure as exc:
        log.warning("proposal failed for (%s, %s): %s", pa.kc_id, pb.kc_id, exc)
        return RelationProposal((pa.kc_id, pb.kc_id), RelationType.NONE, str(exc), (), doubtful=True)
    rtype = RelationType.parse(resp["type"])
    pair = _orient(pa.kc_id, pb.kc_id, resp["direction"]) if rtype.directed else (pa.kc_id, pb.kc_id)
    return RelationProposal(pair, rtype, resp["justification"], tuple(resp.get("evidence_excerpts", ())))


def _pair_payload(pair, profiles, ev) -> dict:
    a, b = pair
    return {"a": _profile_payload(profiles[a]), "b": _profile_payload(profiles[b]),
            "evidence": _oriented(ev, pair).to_dict()}


def score_relation(proposal: RelationProposal, ev: PairEvidence, backend: AgentBackend,
                   profiles: Mapping[str, ConceptProfile] | None = None, max_retries: int = 3) -> ScoreVector:
    """Step 3: integer 0-5 scores for every criterion of the proposed type."""
    if proposal.proposed_type is RelationType.NONE:
        raise ValueError("cannot score a None proposal")
    criteria = CRITERIA[proposal.proposed_type.value]
    a, b = proposal.pair
    profiles = profiles or {a: ConceptProfile(a, a), b: ConceptProfile(b, b)}
    payload = {**_pair_payload(proposal.pair, profiles, ev), "type": proposal.proposed_type.value,
               "direction": "a->b" if proposal.proposed_type.directed else "none",
               "criteria": list(criteria)}
    try:
        resp = _ask(backend, "scoring", "score_relation", payload, max_retries)
        missing = [c for c in criteria if c not in resp["scores"]]
        if missing:
            raise SchemaFailure(f"missing criteria {missing}")
    except SchemaFailure as exc:
        log.warning("scoring failed for %s: %s", proposal.pair, exc)
        return ScoreVector({c: 0 for c in criteria}, {c: "scoring failed" for c in criteria}, doubtful=True)
    return ScoreVector({c: int(resp["scores"][c]) for c in criteria},
                       {c: str(resp["explanations"].get(c, "")) for c in criteria})


def _closes_cycle(pair, rtype: RelationType, accepted: Iterable[RelationDecision]) -> bool:
    if not rtype.directed:
        return False
    same = [d.pair for d in accepted if d.final_type is rtype]
    return creates_cycle(same, pair)


def _pair_taken(pair, accepted: Iterable[RelationDecision]) -> bool:
    key = frozenset(pair)
    return any(frozenset(d.pair) == key and d.final_type is not RelationType.NONE for d in accepted)


def arbitrate(proposal: RelationProposal, scores: ScoreVector, ev: PairEvidence, backend: AgentBackend,
              profiles: Mapping[str, ConceptProfile] | None = None,
              accepted: Sequence[RelationDecision] = (), doubt_threshold: float = 3.0,
              max_retries: int = 3) -> RelationDecision:
    """Step 4: final type, confidence = mean score / 5, and a doubt flag."""
    a, b = proposal.pair
    profiles = profiles or {a: ConceptProfile(a, a), b: ConceptProfile(b, b)}
    payload = {**_pair_payload(proposal.pair, profiles, ev),
               "proposal": {"type": proposal.proposed_type.value,
                            "direction": "a->b" if proposal.proposed_type.directed else "none",
                            "justification": proposal.justification},
               "scores": dict(scores.scores)}
    audit = {"proposal": {"pair": list(proposal.pair), "type": proposal.proposed_type.value,
                          "justification": proposal.justification,
                          "evidence_excerpts": list(proposal.evidence_excerpts)},
             "scores": dict(scores.scores), "score_explanations": dict(scores.explanations)}
    reasons = []
    try:
        resp = _ask(backend, "arbiter", "arbitrate", payload, max_retries)
        rtype = RelationType.parse(resp["type"])
        pair = _orient(a, b, resp["direction"]) if rtype.directed else proposal.pair
        audit["arbitration"] = resp
        if not resp.get("consistent", True):
            reasons.append("type axioms contradicted")
    except SchemaFailure as exc:
        rtype, pair = proposal.proposed_type, proposal.pair
        audit["arbitration"] = {"error": str(exc)}
        reasons.append("arbiter failed")
    if scores.mean < doubt_threshold:
        reasons.append(f"mean score {scores.mean:.2f} < {doubt_threshold}")
    if proposal.doubtful or scores.doubtful:
        reasons.append("upstream step degraded")
    if _closes_cycle(pair, rtype, accepted):
        reasons.append(f"would close a {rtype.value} cycle")
    if _pair_taken(pair, accepted):
        reasons.append("pair already related")
    audit["doubt_reasons"] = reasons
    return RelationDecision(pair, rtype, scores.mean / 5.0, "arbitration", bool(reasons), audit)


def _vote_key(vote: dict, a: str, b: str) -> tuple[RelationType, tuple[str, str]]:
    rtype = RelationType.parse(vote["type"])
    pair = _orient(a, b, vote["direction"]) if rtype.directed else tuple(sorted((a, b)))
    return rtype, pair


def cross_correct(doubtful: Sequence[RelationDecision], backend: AgentBackend,
                  evidence: Mapping[frozenset, PairEvidence] | None = None,
                  profiles: Mapping[str, ConceptProfile] | None = None,
                  accepted: Sequence[RelationDecision] = (), max_retries: int = 3) -> list[RelationDecision]:
    """Step 5: blind persona review, then reassessment with peer summaries.

    The strict-majority verdict of round 2 wins with confidence equal to its
    vote share; no majority (or no valid votes) gives None. Results are
    re-checked against the topology axioms in order, violators become None.
    """
    out: list[RelationDecision] = []
    accepted = list(accepted)
    for dec in doubtful:
        a, b = dec.pair
        prof = profiles or {}
        pa = prof.get(a, ConceptProfile(a, a))
        pb = prof.get(b, ConceptProfile(b, b))
        ev = (evidence or {}).get(frozenset(dec.pair)) or PairEvidence(a, b)
        base = {"a": _profile_payload(pa), "b": _profile_payload(pb), "evidence": _oriented(ev, (a, b)).to_dict(),
                "proposal": dec.audit.get("proposal", {}), "scores": dec.audit.get("scores", {}),
                "decision": {"type": dec.final_type.value, "pair": list(dec.pair)}}
        round1: dict[str, dict] = {}
        for persona in PERSONAS:
            try:
                round1[persona] = _ask(backend, f"persona:{persona}", "review", base, max_retries)
            except (SchemaFailure, RuntimeError) as exc:
                log.warning("persona %s abstains on %s: %s", persona, dec.pair, exc)
        round2: dict[str, dict] = {}
        for persona, own in round1.items():
            peers = [{"persona": p, **v} for p, v in round1.items() if p != persona]
            try:
                round2[persona] = _ask(backend, f"persona:{persona}", "reassess",
                                       {**base, "own": own, "peers": peers}, max_retries)
            except (SchemaFailure, RuntimeError) as exc:
                log.warning("persona %s abstains in round 2 on %s: %s", persona, dec.pair, exc)

        tally: dict[tuple, int] = {}
        for vote in round2.values():
            key = _vote_key(vote, a, b)
            tally[key] = tally.get(key, 0) + 1
        audit = {**dec.audit, "votes": {"round1": round1, "round2": round2}}
        n_votes = len(round2)
        winner = [k for k, c in tally.items() if c * 2 > n_votes]
        if not winner:
            out.append(RelationDecision(dec.pair, RelationType.NONE, 0.0, "cross-correction", False, audit))
            continue
        (rtype, pair), share = winner[0], tally[winner[0]] / n_votes
        if rtype is not RelationType.NONE and (_closes_cycle(pair, rtype, accepted) or _pair_taken(pair, accepted)):
            audit["doubt_reasons"] = list(audit.get("doubt_reasons", [])) + ["post-vote topology violation"]
            out.append(RelationDecision(pair, RelationType.NONE, share, "cross-correction", False, audit))
            continue
        decision = RelationDecision(pair, rtype, share, "cross-correction", False, audit)
        out.append(decision)
        if rtype is not RelationType.NONE:
            accepted.append(decision)
    return out


@dataclass(frozen=True)
class ExtractionResult:
    graph: KcGraph
    decisions: tuple[RelationDecision, ...]
    profiles: Mapping[str, ConceptProfile]
    candidates: int


def _candidate_pairs(kcs: Sequence[str], index: EvidenceIndex, profiles, cfg: ExtractionConfig):
    for a, b in itertools.combinations(kcs, 2):
        ev = index.pair(a, b, profiles)
        if ev.cooccurrence >= cfg.candidate_min_cooccurrence or ev.name_overlap >= cfg.candidate_min_overlap:
            yield ev


def run_extraction(kcs: Mapping[str, str] | Iterable[str], log_: InteractionLog, backend: AgentBackend,
                   cfg: ExtractionConfig = ExtractionConfig()) -> ExtractionResult:
    names = dict(kcs) if isinstance(kcs, Mapping) else {k: k for k in kcs}
    if not names:
        raise ValueError("extract_relations needs at least one KC")
    ids = sorted(names)

    if cfg.enable_completion:
        profiles = {k: complete_concept(ConceptProfile(k, names[k]), backend, cfg.max_retries) for k in ids}
    else:
        profiles = {k: raw_profile(k, names[k]) for k in ids}

    index = EvidenceIndex(log_)
    candidates = list(_candidate_pairs(ids, index, profiles, cfg))
    evidence = {frozenset((ev.a, ev.b)): ev for ev in candidates}

    def steps_2_3(ev: PairEvidence):
        prop = propose_relation(profiles[ev.a], profiles[ev.b], ev, backend, cfg.max_retries)
        if prop.proposed_type is RelationType.NONE:
            return prop, None
        return prop, score_relation(prop, ev, backend, profiles, cfg.max_retries)

    if cfg.max_in_flight > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            staged = list(pool.map(steps_2_3, candidates))
    else:
        staged = [steps_2_3(ev) for ev in candidates]

    failures = sum(1 for prop, _ in staged if prop.doubtful)
    if candidates and failures == len(candidates):
        raise SchemaFailure("every candidate pair failed at the proposal step")

    scored = [(prop, sv, ev) for (prop, sv), ev in zip(staged, candidates) if sv is not None]
    # Stronger candidates are arbitrated first so they win topology conflicts.
    scored.sort(key=lambda t: (-t[1].mean, t[0].pair))
    accepted: list[RelationDecision] = []
    doubtful: list[RelationDecision] = []
    for prop, sv, ev in scored:
        dec = arbitrate(prop, sv, ev, backend, profiles, accepted, cfg.doubt_threshold, cfg.max_retries)
        (doubtful if dec.doubtful else accepted).append(dec)

    if cfg.enable_correction:
        final = accepted + cross_correct(doubtful, backend, evidence, profiles, accepted, cfg.max_retries)
    else:
        # Without re-examination, doubtful cases keep the arbitrated type unless
        # they break topology; build_kc_graph resolves anything left.
        final = list(accepted)
        for dec in doubtful:
            if _closes_cycle(dec.pair, dec.final_type, final) or _pair_taken(dec.pair, final):
                continue
            final.append(dec)

    graph = build_kc_graph([d for d in final if d.final_type is not RelationType.NONE], profiles)
    return ExtractionResult(graph, tuple(final), profiles, len(candidates))


def extract_relations(kcs, log_: InteractionLog, backend: AgentBackend,
                      cfg: ExtractionConfig = ExtractionConfig()) -> KcGraph:
    return run_extraction(kcs, log_, backend, cfg).graph


def dump_decisions(decisions: Iterable[RelationDecision], fp: IO[str], meta: dict | None = None) -> None:
    if meta is not None:
        fp.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
    for d in decisions:
        fp.write(json.dumps({"pair": list(d.pair), "type": d.final_type.value, "confidence": d.confidence,
                             "provenance": d.provenance, "doubtful": d.doubtful, "audit": d.audit},
                            sort_keys=True, default=str) + "\n")


def load_decisions(lines: Iterable[str]) -> list[RelationDecision]:
    out = []
    for line in lines:
        if not line.strip():
            continue
        d = json.loads(line)
        if "_meta" in d:
            continue
        out.append(RelationDecision(tuple(d["pair"]), RelationType.parse(d["type"]), float(d["confidence"]),
                                    d.get("provenance", "arbitration"), d.get("doubtful", False), d.get("audit", {})))
    return out

