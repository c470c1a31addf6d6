"""In-process simulation of the single-round clustered federated protocol.

Roles are one lead coordinator and N client actors. Each actor owns an
inbox and only talks to the lead. A round has three phases:

1. training: every client fits a local model and uploads it;
2. communication: the lead relabels the uploaded models with fresh random
   tokens and broadcasts all of them to every client; each client returns
   the worst-case loss of every token on its own ambiguity ball;
3. coalition: the lead maps tokens back to owners, forms coalitions,
   averages parameters per coalition and delivers them.

Timestamps come from a logical clock, and messages within a phase are
recorded in sender order, so a fixed config always yields the same
transcript.
"""

from __future__ import annotations

import enum
import json
import queue
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coalition import CoalitionStructure, aggregate, build_transfer_matrix, solve
from .data import FederationConfig, ModelParams
from .dro import robust_loss
from .errors import ProtocolError
from .models import TrainSettings, train_erm

LEAD = "lead"


class MessageKind(str, enum.Enum):
    LOCAL_PARAMS_UPLOAD = "LocalParamsUpload"
    ANONYMIZED_BROADCAST = "AnonymizedBroadcast"
    ROBUST_LOSS_REPORT = "RobustLossReport"
    COALITION_ASSIGNMENT = "CoalitionAssignment"
    AGGREGATE_PARAMS_DELIVERY = "AggregateParamsDelivery"


_PHASE_OF = {
    MessageKind.LOCAL_PARAMS_UPLOAD: 0,
    MessageKind.ANONYMIZED_BROADCAST: 1,
    MessageKind.ROBUST_LOSS_REPORT: 2,
    MessageKind.COALITION_ASSIGNMENT: 3,
    MessageKind.AGGREGATE_PARAMS_DELIVERY: 4,
}


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    sender: str
    recipient: str
    payload: dict

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "sender": self.sender,
            "recipient": self.recipient,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, d) -> "ProtocolMessage":
        return cls(MessageKind(d["kind"]), d["sender"], d["recipient"], d["payload"])


@dataclass
class ProtocolTranscript:
    entries: list = field(default_factory=list)
    structure: CoalitionStructure | None = None
    coalition_models: dict = field(default_factory=dict)
    client_ids: tuple = ()

    @property
    def messages(self) -> list:
        return [m for _, m in self.entries]

    def of_kind(self, kind) -> list:
        kind = MessageKind(kind)
        return [m for m in self.messages if m.kind is kind]

    def client_models(self) -> list:
        """Final aggregated model of each client, in client order."""
        return [self.coalition_models[int(k)] for k in self.structure.assignment]

    def phases_ordered(self) -> bool:
        phases = [_PHASE_OF[m.kind] for m in self.messages]
        return phases == sorted(phases)

    def to_jsonl(self, path):
        """One JSON object per line: ``{"t": ..., "kind": ..., "sender": ..., "recipient": ..., "payload": ...}``."""
        with Path(path).open("w", encoding="utf-8") as fh:
            for t, msg in self.entries:
                fh.write(json.dumps({"t": t, **msg.to_dict()}, sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path) -> list:
        out = []
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    out.append((d.pop("t"), ProtocolMessage.from_dict(d)))
        return out


# -- actors -------------------------------------------------------------------


class ClientActor:
    """A data holder. Sees its own data, the anonymized broadcast and its own deliveries."""

    def __init__(self, dataset, spec, family, settings):
        self.client_id = dataset.client_id
        self.inbox = queue.Queue()
        self._dataset = dataset
        self._spec = spec
        self._family = family
        self._settings = settings
        self.local_model = None
        self.coalition = None
        self.model = None

    def train(self) -> ProtocolMessage:
        self.local_model = train_erm(self._dataset, self._family, self._settings)
        return ProtocolMessage(
            MessageKind.LOCAL_PARAMS_UPLOAD, self.client_id, LEAD,
            {"weights": self.local_model.weights.tolist()},
        )

    def step(self):
        """Handle one inbox message; returns the reply, if any."""
        msg = self.inbox.get_nowait()
        if msg.kind is MessageKind.ANONYMIZED_BROADCAST:
            losses = {
                token: robust_loss(ModelParams(np.array(w), self._family), self._dataset, self._spec).value
                for token, w in msg.payload["models"].items()
            }
            return ProtocolMessage(
                MessageKind.ROBUST_LOSS_REPORT, self.client_id, LEAD, {"losses": losses}
            )
        if msg.kind is MessageKind.COALITION_ASSIGNMENT:
            self.coalition = msg.payload["coalition"]
        elif msg.kind is MessageKind.AGGREGATE_PARAMS_DELIVERY:
            self.model = ModelParams(np.array(msg.payload["weights"]), self._family)
        return None


class LeadCoordinator:
    def __init__(self, config: FederationConfig):
        self.config = config
        self.inbox = queue.Queue()
        self._rng = np.random.default_rng(config.rng_seed)
        self._uploads = {}
        self._owner_of = {}
        self._reports = {}

    def collect(self):
        while not self.inbox.empty():
            msg = self.inbox.get_nowait()
            if msg.kind is MessageKind.LOCAL_PARAMS_UPLOAD:
                self._uploads[msg.sender] = msg.payload["weights"]
            elif msg.kind is MessageKind.ROBUST_LOSS_REPORT:
                self._reports[msg.sender] = msg.payload["losses"]

    def broadcast(self, client_ids) -> list:
        n = len(client_ids)
        tokens = set()
        while len(tokens) < n:
            tokens.add(self._rng.bytes(8).hex())
        tokens = sorted(tokens)
        order = self._rng.permutation(n)
        self._owner_of = {tokens[r]: client_ids[int(c)] for r, c in enumerate(order)}
        models = {tok: self._uploads[owner] for tok, owner in self._owner_of.items()}
        return [
            ProtocolMessage(MessageKind.ANONYMIZED_BROADCAST, LEAD, cid, {"models": models})
            for cid in client_ids
        ]

    def form_coalitions(self, client_ids):
        cfg = self.config
        index = {cid: i for i, cid in enumerate(client_ids)}
        L = np.empty((len(client_ids), len(client_ids)))
        for evaluator, losses in self._reports.items():
            for token, value in losses.items():
                L[index[evaluator], index[self._owner_of[token]]] = value
        structure = solve(L, cfg.n_coalitions, cfg.exact_limit, cfg.restarts, cfg.rng_seed)
        local = [ModelParams(np.array(self._uploads[cid]), cfg.family) for cid in client_ids]
        coalition_models = aggregate(local, structure)
        out = []
        for cid, k in zip(client_ids, structure.assignment.tolist()):
            out.append(ProtocolMessage(MessageKind.COALITION_ASSIGNMENT, LEAD, cid, {"coalition": k}))
        for cid, k in zip(client_ids, structure.assignment.tolist()):
            out.append(
                ProtocolMessage(
                    MessageKind.AGGREGATE_PARAMS_DELIVERY, LEAD, cid,
                    {"coalition": k, "weights": coalition_models[k].weights.tolist()},
                )
            )
        return structure, coalition_models, out


# -- driver -------------------------------------------------------------------


class _Network:
    def __init__(self, lead, clients):
        self.lead = lead
        self.clients = {c.client_id: c for c in clients}
        self.clock = 0
        self.transcript = ProtocolTranscript(client_ids=tuple(self.clients))

    def deliver(self, messages):
        # determinize within-phase order
        for msg in sorted(messages, key=lambda m: (m.sender, m.recipient)):
            self.clock += 1
            self.transcript.entries.append((self.clock, msg))
            target = self.lead if msg.recipient == LEAD else self.clients[msg.recipient]
            target.inbox.put(msg)


def _run_phase(name, fn, items, threads):
    try:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]
    except ProtocolError:
        raise
    except Exception as exc:
        raise ProtocolError(f"{type(exc).__name__}: {exc}", phase=name) from exc


def run_protocol(config: FederationConfig) -> ProtocolTranscript:
    settings = config.train_settings or TrainSettings()
    clients = [
        ClientActor(d, s, config.family, settings)
        for d, s in zip(config.datasets, config.specs)
    ]
    ids = [c.client_id for c in clients]
    lead = LeadCoordinator(config)
    net = _Network(lead, clients)

    net.deliver(_run_phase("training", ClientActor.train, clients, config.threads))
    lead.collect()
    if sorted(lead._uploads) != sorted(ids):
        raise ProtocolError("missing local parameter uploads", phase="training")

    net.deliver(_run_phase("communication", lambda _: lead.broadcast(ids), [None], 1)[0])
    net.deliver(_run_phase("communication", ClientActor.step, clients, config.threads))
    lead.collect()
    if sorted(lead._reports) != sorted(ids):
        raise ProtocolError("missing robust loss reports", phase="communication")

    structure, coalition_models, out = _run_phase(
        "coalition", lambda _: lead.form_coalitions(ids), [None], 1
    )[0]
    assignments = [m for m in out if m.kind is MessageKind.COALITION_ASSIGNMENT]
    deliveries = [m for m in out if m.kind is MessageKind.AGGREGATE_PARAMS_DELIVERY]
    net.deliver(assignments)
    net.deliver(deliveries)
    for client in clients:
        while not client.inbox.empty():
            client.step()
    net.transcript.structure = structure
    net.transcript.coalition_models = coalition_models
    return net.transcript


def run_direct(config: FederationConfig):
    """Same computation without message passing; returns ``(structure, local_models)``."""
    settings = config.train_settings or TrainSettings()
    models = [train_erm(d, config.family, settings) for d in config.datasets]
    L = build_transfer_matrix(models, config.datasets, config.specs, config.family, config.threads)
    structure = solve(L, config.n_coalitions, config.exact_limit, config.restarts, config.rng_seed)
    return structure, models


# -- audit ----------------------------------------------------------------------


def _walk(obj):
    """Yield every dict and list/tuple nested in ``obj``, plus every scalar leaf."""
    yield obj
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield k
            yield from _walk(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _walk(v)


def verify_anonymity(transcript: ProtocolTranscript) -> bool:
    """True iff no broadcast names a client and no message pairs a token with its owner."""
    messages = transcript.messages
    ids = set(transcript.client_ids)
    for m in messages:
        ids.update(x for x in (m.sender, m.recipient) if x != LEAD)
    tokens = set()
    for m in messages:
        if m.kind is MessageKind.ANONYMIZED_BROADCAST:
            models = m.payload.get("models", {})
            if isinstance(models, dict):
                tokens.update(str(k) for k in models)

    for m in messages:
        if m.kind is MessageKind.ANONYMIZED_BROADCAST:
            if any(isinstance(x, str) and x in ids for x in _walk(m.payload)):
                return False
        for node in _walk(m.payload):
            if isinstance(node, dict):
                for k, v in node.items():
                    if _links(k, v, tokens, ids):
                        return False
            elif isinstance(node, (list, tuple)) and len(node) == 2:
                if _links(node[0], node[1], tokens, ids):
                    return False
    return True


def _links(a, b, tokens, ids) -> bool:
    if not (isinstance(a, str) and isinstance(b, str)):
        return False
    return (a in tokens and b in ids) or (a in ids and b in tokens)
