"""Agent backends: a deterministic rule-based stand-in and a chat-completion client.

Every backend implements ``respond(role, task_kind, payload) -> dict``. The
pipeline validates each response against ``RESPONSE_SCHEMAS[task_kind]`` and
retries with a repair hint on failure.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass
from importlib import resources
from typing import Protocol

import httpx

from .evidence import tokens

log = logging.getLogger(__name__)

ROLES = ("semantic", "scoring", "arbiter", "persona:teaching", "persona:structure", "persona:behavior")
PERSONAS = ("teaching", "structure", "behavior")

_TYPE_ENUM = ["Association", "Containment", "Equivalence", "Sibling", "PredecessorSuccessor", "None"]
_DIRECTION_ENUM = ["a->b", "b->a", "none"]

CRITERIA = {
    "PredecessorSuccessor": ("PredecessorDependency", "CorrectnessDependency", "AnswerOrderSequence"),
    "Equivalence": ("NameIdentity", "CategoryAgreement", "OrderSymmetry"),
    "Containment": ("TokenInclusion", "CategoryAgreement", "CoOccurrence"),
    "Sibling": ("SharedParent", "NameDistinctness", "NoDirectDependency"),
    "Association": ("CoOccurrenceFrequency", "OrderSymmetry", "DependenceSymmetry"),
}

_VERDICT = {
    "type": "object",
    "required": ["type", "direction", "justification"],
    "properties": {
        "type": {"enum": _TYPE_ENUM},
        "direction": {"enum": _DIRECTION_ENUM},
        "justification": {"type": "string"},
        "certainty": {"type": "number", "minimum": 0, "maximum": 1},
    },
}

RESPONSE_SCHEMAS = {
    "complete_concept": {
        "type": "object",
        "required": ["name", "definition", "category"],
        "properties": {
            "name": {"type": "string", "minLength": 1},
            "definition": {"type": "string", "minLength": 1},
            "category": {"type": "string", "minLength": 1},
        },
    },
    "propose_relation": {
        **_VERDICT,
        "properties": {**_VERDICT["properties"],
                       "evidence_excerpts": {"type": "array", "items": {"type": "string"}}},
    },
    "score_relation": {
        "type": "object",
        "required": ["scores", "explanations"],
        "properties": {
            "scores": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0, "maximum": 5}},
            "explanations": {"type": "object", "additionalProperties": {"type": "string"}},
        },
    },
    "arbitrate": {
        **_VERDICT,
        "properties": {**_VERDICT["properties"], "consistent": {"type": "boolean"}},
    },
    "review": _VERDICT,
    "reassess": _VERDICT,
}


class AgentBackend(Protocol):
    def respond(self, role: str, task_kind: str, payload: dict) -> dict: ...


class BackendError(RuntimeError):
    """Transport-level failure talking to a live backend."""


# -- deterministic heuristic backend -------------------------------------

ABBREVIATIONS = {
    "lcm": "least common multiple",
    "gcd": "greatest common divisor",
    "gcf": "greatest common divisor",
    "hcf": "greatest common divisor",
    "greatest common factor": "greatest common divisor",
    "pemdas": "order of operations",
    "bodmas": "order of operations",
    "sd": "standard deviation",
    "lhs": "left hand side",
    "rhs": "right hand side",
}
SYNONYMS = {"pythagoras": "pythagorean", "pythagoras'": "pythagorean", "nos": "number", "eqn": "equation",
            "eq": "equation", "prob": "probability", "stats": "statistics", "geom": "geometry"}
_KEEP_S = ("ss", "us", "is", "ics")
CATEGORY_KEYWORDS = {
    "fraction": "fractions", "decimal": "decimals", "percent": "percentages", "ratio": "ratios",
    "equation": "algebra", "inequality": "algebra", "polynomial": "algebra", "variable": "algebra",
    "angle": "geometry", "triangle": "geometry", "circle": "geometry", "polygon": "geometry",
    "probability": "probability", "median": "statistics", "mean": "statistics", "mode": "statistics",
    "exponent": "exponents", "integer": "integers",
}


def _singular(tok: str) -> str:
    if len(tok) > 4 and tok.endswith("ies"):
        return tok[:-3] + "y"
    if len(tok) > 3 and tok.endswith("s") and not tok.endswith(_KEEP_S):
        return tok[:-1]
    return tok


def standardize_name(name: str) -> str:
    text = re.sub(r"[^a-z0-9' ]+", " ", name.lower()).strip()
    text = re.sub(r"\s+", " ", text)
    text = ABBREVIATIONS.get(text, text)
    words = [SYNONYMS.get(w, w) for w in text.split()]
    words = [_singular(w.strip("'")) for w in words if w.strip("'")]
    text = " ".join(words)
    return ABBREVIATIONS.get(text, text)


def categorize(std_name: str) -> str:
    words = std_name.split()
    for w in words:
        if w in CATEGORY_KEYWORDS:
            return CATEGORY_KEYWORDS[w]
    return words[0] if words else "general"


@dataclass(frozen=True)
class HeuristicRules:
    equivalence_overlap: float = 0.8
    containment_overlap: float = 0.5
    pred_precedence: float = 0.7
    pred_dependence: float = 0.15
    sibling_overlap_low: float = 0.3
    association_min_cooccurrence: int = 3
    association_share: float = 0.35
    # |dep(a->b) - dep(b->a)| above this reads as a directed dependence.
    directional_asymmetry: float = 0.3
    # A directed dependence needs enough students taking that order to be measured.
    directed_min_precedence: float = 0.3
    # Order and dependence statistics are ignored below this many co-attempting students.
    directed_min_cooccurrence: int = 15


def _bucket(x: float) -> int:
    """Map [0, 1] linearly onto the integer 0-5 scale."""
    return int(math.floor(5.0 * min(1.0, max(0.0, x)) + 0.5))


class HeuristicBackend:
    """Rule-based stand-in for the three agents and the three personas.

    Pure and reentrant: the same payload always yields the same response.
    """

    def __init__(self, rules: HeuristicRules = HeuristicRules()):
        self.rules = rules

    def respond(self, role: str, task_kind: str, payload: dict) -> dict:
        handler = getattr(self, f"_{task_kind}", None)
        if handler is None:
            raise ValueError(f"heuristic backend has no handler for task {task_kind!r}")
        return handler(role, payload)

    # Step 1
    def _complete_concept(self, role, payload):
        std = standardize_name(payload["name"]) or payload["name"].strip().lower()
        category = categorize(std)
        return {"name": std, "definition": f"The concept of {std}.", "category": category}

    # helpers over the serialized profiles/evidence
    @staticmethod
    def _toks(profile: dict) -> frozenset:
        return tokens(f"{profile['name']} {profile.get('definition', '')}")

    def _containment(self, pa: dict, pb: dict, ev: dict) -> str | None:
        ta, tb = self._toks(pa), self._toks(pb)
        if ev["name_overlap"] < self.rules.containment_overlap:
            return None
        if ta < tb:
            return "a->b"
        if tb < ta:
            return "b->a"
        return None

    @staticmethod
    def _shared_category(pa: dict, pb: dict) -> bool:
        ca, cb = pa.get("category", ""), pb.get("category", "")
        return bool(ca) and ca == cb

    def _measurable(self, ev: dict) -> bool:
        r = self.rules
        return (ev["cooccurrence"] >= r.directed_min_cooccurrence
                and ev.get("co_attempt_share", 0.0) >= r.association_share)

    def _pred_direction(self, ev: dict) -> str | None:
        r = self.rules
        if not self._measurable(ev):
            return None
        if ev["precedence_prob"] >= r.pred_precedence and ev["dependence"] >= r.pred_dependence:
            return "a->b"
        if ev["reverse_precedence_prob"] >= r.pred_precedence and ev["reverse_dependence"] >= r.pred_dependence:
            return "b->a"
        return None

    def _directed_dependence(self, ev: dict) -> str | None:
        """Direction with a markedly one-sided performance dependence, if any."""
        if not self._measurable(ev):
            return None
        floor = self.rules.directed_min_precedence
        # A direction students rarely take has no measurable dependence.
        fwd = ev["dependence"] if ev["precedence_prob"] >= floor else 0.0
        rev = ev["reverse_dependence"] if ev["reverse_precedence_prob"] >= floor else 0.0
        asym = fwd - rev
        if asym >= self.rules.directional_asymmetry and ev["precedence_prob"] >= floor:
            return "a->b"
        if -asym >= self.rules.directional_asymmetry and ev["reverse_precedence_prob"] >= floor:
            return "b->a"
        return None

    def _associated(self, ev: dict) -> bool:
        r = self.rules
        share = ev.get("co_attempt_share", 0.0)
        return ev["cooccurrence"] >= r.association_min_cooccurrence and share >= r.association_share

    # Step 2
    def _propose_relation(self, role, payload):
        pa, pb, ev = payload["a"], payload["b"], payload["evidence"]
        r = self.rules
        ov = ev["name_overlap"]
        excerpts = [f"name_overlap={ov:.3f}", f"cooccurrence={ev['cooccurrence']}",
                    f"precedence a->b={ev['precedence_prob']:.3f} b->a={ev['reverse_precedence_prob']:.3f}",
                    f"dependence a->b={ev['dependence']:.3f} b->a={ev['reverse_dependence']:.3f}"]

        def out(rtype, direction, why):
            return {"type": rtype, "direction": direction, "justification": why, "evidence_excerpts": excerpts}

        if ov >= r.equivalence_overlap:
            return out("Equivalence", "none", "names and definitions describe the same concept")
        if (d := self._containment(pa, pb, ev)) is not None:
            return out("Containment", d, "one concept's terms strictly include the other's")
        if (d := self._pred_direction(ev)) is not None:
            return out("PredecessorSuccessor", d, "consistent answer order with correctness dependence")
        no_order = max(ev["precedence_prob"], ev["reverse_precedence_prob"]) < r.pred_precedence
        if self._shared_category(pa, pb) and r.sibling_overlap_low <= ov < r.equivalence_overlap and no_order:
            return out("Sibling", "none", "parallel subtopics under a shared category")
        if self._associated(ev):
            return out("Association", "none", "frequently co-attempted without a fixed order")
        return out("None", "none", "no structural or behavioral evidence")

    # Step 3
    def _score_relation(self, role, payload):
        rtype, direction = payload["type"], payload.get("direction", "none")
        pa, pb, ev = payload["a"], payload["b"], payload["evidence"]
        if direction == "b->a":
            pa, pb = pb, pa
            ev = {**ev, "precedence_prob": ev["reverse_precedence_prob"],
                  "reverse_precedence_prob": ev["precedence_prob"],
                  "dependence": ev["reverse_dependence"], "reverse_dependence": ev["dependence"],
                  "support_a": ev["support_b"], "support_b": ev["support_a"]}
        order_gap = abs(ev["precedence_prob"] - ev["reverse_precedence_prob"])
        dep_gap = abs(ev["dependence"] - ev["reverse_dependence"])
        same_cat = self._shared_category(pa, pb)
        share = ev.get("co_attempt_share", 0.0)
        ta, tb = self._toks(pa), self._toks(pb)
        small = min(ta, tb, key=len)
        if rtype == "PredecessorSuccessor":
            reach = ev["cooccurrence"] / ev["support_b"] if ev["support_b"] else 0.0
            raw = {"PredecessorDependency": reach, "CorrectnessDependency": ev["dependence"] / 0.5,
                   "AnswerOrderSequence": ev["precedence_prob"]}
        elif rtype == "Equivalence":
            raw = {"NameIdentity": ev["name_overlap"], "CategoryAgreement": 1.0 if same_cat else 0.2,
                   "OrderSymmetry": 1.0 - order_gap}
        elif rtype == "Containment":
            incl = len(ta & tb) / len(small) if small else 0.0
            raw = {"TokenInclusion": incl, "CategoryAgreement": 1.0 if same_cat else 0.2,
                   "CoOccurrence": share / 0.5}
        elif rtype == "Sibling":
            raw = {"SharedParent": 1.0 if same_cat else 0.0,
                   "NameDistinctness": (self.rules.equivalence_overlap - ev["name_overlap"]) / 0.5,
                   "NoDirectDependency": 1.0 - order_gap}
        elif rtype == "Association":
            raw = {"CoOccurrenceFrequency": share / 0.7, "OrderSymmetry": 1.0 - order_gap,
                   "DependenceSymmetry": 1.0 - dep_gap / 0.5}
        else:
            raise ValueError(f"cannot score relation type {rtype!r}")
        scores = {k: _bucket(v) for k, v in raw.items()}
        return {"scores": scores, "explanations": {k: f"raw={v:.3f}" for k, v in raw.items()}}

    def type_axiom_holds(self, rtype: str, direction: str, pa: dict, pb: dict, ev: dict) -> bool:
        r = self.rules
        if rtype == "Equivalence":
            return ev["name_overlap"] >= r.equivalence_overlap
        if rtype == "Containment":
            return self._containment(pa, pb, ev) == direction
        if rtype == "PredecessorSuccessor":
            fwd = direction == "a->b"
            prec = ev["precedence_prob"] if fwd else ev["reverse_precedence_prob"]
            dep, rdep = (ev["dependence"], ev["reverse_dependence"]) if fwd else (ev["reverse_dependence"], ev["dependence"])
            return prec >= 0.5 and dep >= rdep
        if rtype == "Sibling":
            return self._shared_category(pa, pb) and self._containment(pa, pb, ev) is None
        if rtype == "Association":
            return self._directed_dependence(ev) is None
        return True

    # Step 4
    def _arbitrate(self, role, payload):
        prop = payload["proposal"]
        rtype, direction = prop["type"], prop["direction"]
        ok = self.type_axiom_holds(rtype, direction, payload["a"], payload["b"], payload["evidence"])
        why = "type-level axioms hold" if ok else f"{rtype} axioms contradicted by the evidence"
        return {"type": rtype, "direction": direction, "justification": why, "consistent": ok}

    # Step 5
    def _persona_vote(self, persona: str, pa: dict, pb: dict, ev: dict) -> dict:
        r = self.rules
        ov = ev["name_overlap"]

        def vote(rtype, direction, why, certainty):
            return {"type": rtype, "direction": direction, "justification": why, "certainty": certainty}

        fallback = (vote("Association", "none", "co-attempted, no further signal in my view", 0.3)
                    if self._associated(ev) else vote("None", "none", "no signal in my view", 0.3))
        if persona == "teaching":
            if (d := self._containment(pa, pb, ev)) is not None:
                return vote("Containment", d, "curricular hierarchy", 0.9)
            if (d := self._directed_dependence(ev)) is not None or (d := self._pred_direction(ev)) is not None:
                return vote("PredecessorSuccessor", d, "taught in order and mastery transfers", 0.9)
            return fallback
        if persona == "structure":
            if ov >= r.equivalence_overlap:
                return vote("Equivalence", "none", "same concept under two names", 0.9)
            if (d := self._containment(pa, pb, ev)) is not None:
                return vote("Containment", d, "part-whole by terminology", 0.9)
            if self._shared_category(pa, pb) and ov >= r.sibling_overlap_low:
                return vote("Sibling", "none", "shared parent category", 0.8)
            return fallback
        if persona == "behavior":
            if (d := self._directed_dependence(ev)) is not None:
                return vote("PredecessorSuccessor", d, "one-sided performance dependence", 0.8)
            if self._associated(ev):
                return vote("Association", "none", "high co-attempt share", 0.7)
            return vote("None", "none", "weak behavioral signal", 0.6)
        raise ValueError(f"unknown persona {persona!r}")

    def _review(self, role, payload):
        persona = role.split(":", 1)[1]
        return self._persona_vote(persona, payload["a"], payload["b"], payload["evidence"])

    def _reassess(self, role, payload):
        own = payload["own"]
        peers = payload["peers"]
        keys = {(p["type"], p["direction"]) for p in peers}
        if own.get("certainty", 1.0) < 0.5 and len(peers) >= 2 and len(keys) == 1:
            peer = peers[0]
            return {"type": peer["type"], "direction": peer["direction"],
                    "justification": f"revised toward peer consensus: {peer['justification']}",
                    "certainty": 0.6}
        return {k: own[k] for k in ("type", "direction", "justification", "certainty") if k in own}


# -- live chat-completion backend ----------------------------------------

PROMPT_VERSION = "v1"

ROLE_SYSTEM = {
    "semantic": "You are the Semantic Agent. You standardize knowledge concepts and judge relation types.",
    "scoring": "You are the Scoring Agent. You score candidate relations on 0-5 integer criteria.",
    "arbiter": "You are the Arbitration Agent. You make the final call on a candidate relation.",
    "persona:teaching": "You are a teaching expert: you check prerequisite order and hierarchy against curricula.",
    "persona:structure": "You are a structure and semantics expert: you test entailment, equivalence and "
                         "sibling relations through definitions, terminology and parent-child links.",
    "persona:behavior": "You are a behavior and cognition expert: you assess co-occurrence, temporal order "
                        "and performance dependence in the interaction data.",
}


def load_prompt(task_kind: str, version: str = PROMPT_VERSION) -> str:
    return resources.files("magekt.agents").joinpath("prompts", f"{task_kind}.{version}.txt").read_text()


class _Fields(dict):
    def __missing__(self, key):
        return "{" + key + "}"


def render_prompt(task_kind: str, payload: dict, version: str = PROMPT_VERSION) -> str:
    fields = _Fields()
    for key, value in payload.items():
        fields[key] = value if isinstance(value, str) else json.dumps(value, sort_keys=True)
    body = load_prompt(task_kind, version).format_map(fields)
    schema = json.dumps(RESPONSE_SCHEMAS[task_kind], sort_keys=True)
    return f"{body}\n\nRespond with one JSON object only, matching this JSON schema:\n{schema}"


def extract_json(content: str) -> dict:
    text = content.strip()
    fence = re.search(r"```(?:json)?\s*(.*?)```", text, re.S)
    if fence:
        text = fence.group(1).strip()
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end < start:
        raise ValueError("no JSON object in response")
    obj = json.loads(text[start:end + 1])
    if not isinstance(obj, dict):
        raise ValueError("response is not a JSON object")
    return obj


class ChatCompletionBackend:
    """Talks to any endpoint speaking the chat-completion wire format.

    The auth token comes from the environment variable named by
    ``api_key_env``. Transport errors are retried with exponential backoff;
    malformed content surfaces as ``ValueError`` so the pipeline can issue a
    repair request.
    """

    def __init__(self, endpoint: str, model: str, api_key_env: str = "MAGEKT_API_KEY",
                 timeout: float = 60.0, max_transport_retries: int = 4, backoff: float = 1.0,
                 client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.max_transport_retries = max_transport_retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)

    def build_request(self, role: str, task_kind: str, payload: dict) -> dict:
        payload = dict(payload)
        repair = payload.pop("_repair", None)
        messages = [{"role": "system", "content": ROLE_SYSTEM.get(role, ROLE_SYSTEM["semantic"])},
                    {"role": "user", "content": render_prompt(task_kind, payload)}]
        if repair:
            messages.append({"role": "user", "content": "Your previous answer was rejected: "
                             f"{repair}. Reply again with a single JSON object that matches the schema."})
        return {"model": self.model, "messages": messages, "temperature": 0}

    def respond(self, role: str, task_kind: str, payload: dict) -> dict:
        body = self.build_request(role, task_kind, payload)
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        delay = self.backoff
        for attempt in range(self.max_transport_retries + 1):
            try:
                resp = self._client.post(self.endpoint, json=body, headers=headers)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise BackendError(f"HTTP {resp.status_code}")
                resp.raise_for_status()
                content = resp.json()["choices"][0]["message"]["content"]
                return extract_json(content)
            except (httpx.TransportError, BackendError) as exc:
                if attempt == self.max_transport_retries:
                    raise BackendError(f"{task_kind}: giving up after {attempt + 1} attempts: {exc}") from exc
                log.warning("%s request failed (%s); retrying in %.1fs", task_kind, exc, delay)
                time.sleep(delay)
                delay *= 2
        raise AssertionError("unreachable")


__all__ = [
    "AgentBackend", "BackendError", "ChatCompletionBackend", "CRITERIA", "HeuristicBackend",
    "HeuristicRules", "PERSONAS", "RESPONSE_SCHEMAS", "categorize", "extract_json",
    "render_prompt", "standardize_name",
]
