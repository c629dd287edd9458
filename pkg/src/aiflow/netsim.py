"""Deterministic discrete-event simulation of a device-edge-cloud deployment.

Compute is priced by fixed per-op costs on each node, links by latency +
payload/bandwidth + seeded uniform jitter. Every message carries a 16-byte
frame; token indices cost 4 bytes each. Scenario runs first execute the pure
protocol (token streams never depend on timing), then lay the rounds out on
the simulated clock, so identical inputs always produce byte-identical
traces.

Verdict messages carry one 4-byte accept count plus 4 bytes per token the
receiver has not seen: the verifier's correction, and in three-tier runs the
middle tier's correction when the top tier accepted it into the stream.

Event sequencing: events are logged in causal order, numbered in that order,
and the final trace is sorted by (time, sequence). Trace serialization is
JSON lines with exactly the keys t, seq, kind, src, dst, bytes; the
in-memory events also carry a free-form note that is not serialized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidInputError,
    InvalidScenarioError,
    InvariantViolationError,
)
from .numerics import Rng
from .specdec import (
    ProtocolConfig,
    run_pipelined,
    run_sequential,
)
from .tofc import (
    TofcConfig,
    fit_laplacian,
    make_blob_features,
    tofc_pipeline,
)
from .toylm import LmDecoder, ToyLmConfig, build

FRAME_BYTES = 16
TOKEN_BYTES = 4
_TIERS = ("device", "edge", "cloud")
_TIER_RANK = {t: i for i, t in enumerate(_TIERS)}


@dataclass(frozen=True)
class NodeSpec:
    id: str
    tier: str
    compute_cost: dict

    def __post_init__(self):
        if self.tier not in _TIERS:
            raise InvalidInputError(f"unknown tier {self.tier!r}")
        for op, cost in self.compute_cost.items():
            if not float(cost) >= 0.0:
                raise InvalidInputError(f"compute cost {op!r} must be >= 0")


@dataclass(frozen=True)
class LinkSpec:
    src: str
    dst: str
    latency_s: float
    bandwidth_bytes_per_s: float
    jitter_s: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.latency_s > 0.0 or not self.bandwidth_bytes_per_s > 0.0:
            raise InvalidInputError("latency and bandwidth must be > 0")
        if self.jitter_s < 0.0:
            raise InvalidInputError("jitter must be >= 0")


@dataclass(frozen=True)
class Topology:
    nodes: tuple
    links: tuple

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("node ids must be unique")
        known = set(ids)
        seen = set()
        for link in self.links:
            if link.src not in known or link.dst not in known:
                raise InvalidInputError(f"link {link.src}->{link.dst} names unknown nodes")
            if (link.src, link.dst) in seen:
                raise InvalidInputError(f"duplicate link {link.src}->{link.dst}")
            seen.add((link.src, link.dst))

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise InvalidScenarioError(f"scenario references unknown node {node_id!r}")

    def link(self, src: str, dst: str) -> LinkSpec:
        for l in self.links:
            if l.src == src and l.dst == dst:
                return l
        raise InvalidScenarioError(f"scenario needs a link {src}->{dst}")

    def cost(self, node_id: str, op: str) -> float:
        costs = self.node(node_id).compute_cost
        if op in costs:
            return float(costs[op])
        if op == "verify" and "token" in costs:
            # Verification is one forward pass, priced like one token.
            return float(costs["token"])
        raise InvalidScenarioError(f"node {node_id!r} has no cost for op {op!r}")


@dataclass(frozen=True)
class Event:
    time: float
    seq: int
    kind: str
    src: str | None
    dst: str | None
    bytes: int
    note: str = ""


@dataclass(frozen=True)
class MetricsRecord:
    tokens_emitted: int
    simulated_wall_s: float
    device_compute_s: float
    transmit_s: float
    server_compute_s: float
    bytes_up: int
    bytes_down: int
    acceptance_rate: float

    def as_dict(self) -> dict:
        return {
            "tokens_emitted": self.tokens_emitted,
            "simulated_wall_s": self.simulated_wall_s,
            "device_compute_s": self.device_compute_s,
            "transmit_s": self.transmit_s,
            "server_compute_s": self.server_compute_s,
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "acceptance_rate": self.acceptance_rate,
        }


def zero_metrics() -> MetricsRecord:
    return MetricsRecord(0, 0.0, 0.0, 0.0, 0.0, 0, 0, 0.0)


def transmit_time(num_bytes: int, link: LinkSpec, rng: Rng) -> float:
    """Seconds on the wire: latency + jitter + serialization, floored at 0."""
    if num_bytes < 0:
        raise InvalidInputError("byte count must be >= 0")
    jitter = (2.0 * rng.uniform() - 1.0) * link.jitter_s if link.jitter_s > 0.0 else 0.0
    t = link.latency_s + jitter + num_bytes / link.bandwidth_bytes_per_s
    return max(t, 0.0)


class _EventLog:
    def __init__(self):
        self._rows = []

    def add(self, time, kind, src, dst, num_bytes, note=""):
        self._rows.append((float(time), kind, src, dst, int(num_bytes), note))

    def finalize(self) -> list[Event]:
        events = [
            Event(time=t, seq=i, kind=kind, src=src, dst=dst, bytes=b, note=note)
            for i, (t, kind, src, dst, b, note) in enumerate(self._rows)
        ]
        return sorted(events, key=lambda e: (e.time, e.seq))


def serialize_trace(trace) -> bytes:
    """JSON-lines trace, one {t, seq, kind, src, dst, bytes} per event."""
    lines = []
    for e in trace:
        obj = {
            "t": e.time,
            "seq": e.seq,
            "kind": e.kind,
            "src": e.src,
            "dst": e.dst,
            "bytes": e.bytes,
        }
        lines.append(json.dumps(obj, separators=(",", ":")))
    return ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")


class _Net:
    """Per-run link state: jitter streams, FIFO ordering, byte totals."""

    def __init__(self, topology: Topology, seed: int):
        self.topology = topology
        base = Rng(seed)
        self._rngs = {(l.src, l.dst): base.spawn(l.seed) for l in topology.links}
        self._last_arrival = {}
        self.transmit_s = 0.0
        self.bytes_up = 0
        self.bytes_down = 0
        self.sent = 0
        self.delivered = 0

    def _account(self, src: str, dst: str, num_bytes: int):
        src_rank = _TIER_RANK[self.topology.node(src).tier]
        dst_rank = _TIER_RANK[self.topology.node(dst).tier]
        if dst_rank >= src_rank:
            self.bytes_up += num_bytes
        else:
            self.bytes_down += num_bytes

    def duration(self, src: str, dst: str, payload_bytes: int) -> float:
        """Price one message and account its bytes; caller owns the clock."""
        link = self.topology.link(src, dst)
        num_bytes = FRAME_BYTES + payload_bytes
        t = transmit_time(num_bytes, link, self._rngs[(src, dst)])
        self.transmit_s += t
        self._account(src, dst, num_bytes)
        return t

    def send(self, now: float, src: str, dst: str, payload_bytes: int, log, note=""):
        """Deliver a message, keeping per-link FIFO order; returns arrival."""
        num_bytes = FRAME_BYTES + payload_bytes
        t = self.duration(src, dst, payload_bytes)
        arrival = max(now + t, self._last_arrival.get((src, dst), 0.0))
        self._last_arrival[(src, dst)] = arrival
        self.sent += 1
        self.delivered += 1
        log.add(arrival, "message-delivered", src, dst, num_bytes, note)
        return arrival


def _verdict_payloads(records):
    """Bytes of each return-hop verdict for one round's boundary records.

    Top-down hop order. Each verdict carries a 4-byte accept count plus the
    correction tokens the receiving side has not seen yet.
    """
    final = records[-1]
    final_corr = 1 if final.accepted < final.drafted else 0
    if len(records) == 1:
        return [TOKEN_BYTES * (1 + final_corr)]
    mid = records[0]
    mid_corr = 1 if mid.accepted < mid.drafted else 0
    mid_corr_survived = 1 if (mid_corr and final.accepted > mid.accepted) else 0
    return [
        TOKEN_BYTES * (1 + final_corr),
        TOKEN_BYTES * (1 + final_corr + mid_corr_survived),
    ]


def _acceptance_rate(records, boundary_count):
    """Accepted fraction of scanned positions at the emission boundary."""
    accepted = 0
    scanned = 0
    for rec in records[boundary_count - 1 :: boundary_count]:
        accepted += rec.accepted
        scanned += rec.accepted + (1 if rec.accepted < rec.drafted else 0)
    return accepted / scanned if scanned else 1.0


def run_specdec_scenario(
    topology: Topology, cfg: ProtocolConfig, models: dict, prompt, num_tokens: int,
    seed: int,
):
    """Draft-verify decoding laid out on the simulated network.

    cfg.tiers name topology nodes, drafter first. Sequential mode replays
    each round as draft compute, uplink, verify compute, downlink; pipelined
    mode takes its timeline from the protocol's own clock arithmetic.
    Returns (trace, MetricsRecord).
    """
    for role in cfg.tiers:
        topology.node(role)
    net = _Net(topology, seed)
    log = _EventLog()
    if cfg.mode == "pipelined":
        return _run_specdec_pipelined(topology, cfg, models, prompt, num_tokens, seed, net, log)
    transcript = run_sequential(cfg, models, prompt, num_tokens, Rng(seed))
    boundaries = len(cfg.tiers) - 1
    device = cfg.tiers[0]
    now = 0.0
    device_compute = 0.0
    server_compute = 0.0
    draft_cost = cfg.draft_len * cfg.per_token_compute_cost[device]
    for start in range(0, len(transcript.per_round), boundaries):
        records = transcript.per_round[start : start + boundaries]
        now += draft_cost
        device_compute += draft_cost
        log.add(now, "compute-done", device, device, 0, "draft-batch")
        for b, rec in enumerate(records):
            lower, upper = cfg.tiers[b], cfg.tiers[b + 1]
            now = net.send(now, lower, upper, TOKEN_BYTES * rec.drafted, log, "tokens")
            verify_cost = cfg.per_token_compute_cost[upper]
            now += verify_cost
            server_compute += verify_cost
            log.add(now, "compute-done", upper, upper, 0, "verify")
        payloads = _verdict_payloads(records)
        for hop, payload in enumerate(payloads):
            upper = cfg.tiers[len(cfg.tiers) - 1 - hop]
            lower = cfg.tiers[len(cfg.tiers) - 2 - hop]
            now = net.send(now, upper, lower, payload, log, "verdict")
    metrics = MetricsRecord(
        tokens_emitted=len(transcript.emitted_tokens),
        simulated_wall_s=now,
        device_compute_s=device_compute,
        transmit_s=net.transmit_s,
        server_compute_s=server_compute,
        bytes_up=net.bytes_up,
        bytes_down=net.bytes_down,
        acceptance_rate=_acceptance_rate(transcript.per_round, boundaries),
    )
    return log.finalize(), metrics


class _LinkClock:
    """Prices pipelined protocol messages with the simulated links."""

    def __init__(self, net: _Net, device: str, verifier: str):
        self.net = net
        self.device = device
        self.verifier = verifier

    def uplink_seconds(self, token_count: int) -> float:
        return self.net.duration(self.device, self.verifier, TOKEN_BYTES * token_count)

    def downlink_seconds(self, token_count: int) -> float:
        return self.net.duration(self.verifier, self.device, TOKEN_BYTES * token_count)


def _run_specdec_pipelined(topology, cfg, models, prompt, num_tokens, seed, net, log):
    device, verifier = cfg.tiers
    clock = _LinkClock(net, device, verifier)
    transcript, timing = run_pipelined(cfg, models, prompt, num_tokens, Rng(seed), clock)
    for rec, times in zip(transcript.per_round, timing.round_times):
        draft_done, arrive, verify_done, verdict = times
        corr = 1 if rec.accepted < rec.drafted else 0
        log.add(draft_done, "compute-done", device, device, 0, "draft-batch")
        log.add(
            arrive, "message-delivered", device, verifier,
            FRAME_BYTES + TOKEN_BYTES * rec.drafted, "tokens",
        )
        log.add(verify_done, "compute-done", verifier, verifier, 0, "verify")
        log.add(
            verdict, "message-delivered", verifier, device,
            FRAME_BYTES + TOKEN_BYTES * (1 + corr), "verdict",
        )
    metrics = MetricsRecord(
        tokens_emitted=len(transcript.emitted_tokens),
        simulated_wall_s=timing.wall_s,
        device_compute_s=timing.device_compute_s,
        transmit_s=timing.uplink_s + timing.downlink_s,
        server_compute_s=timing.verifier_compute_s,
        bytes_up=net.bytes_up,
        bytes_down=net.bytes_down,
        acceptance_rate=_acceptance_rate(transcript.per_round, 1),
    )
    return log.finalize(), metrics


def run_single_tier_scenario(topology: Topology, node_id: str, num_tokens: int):
    """Autoregressive baseline on one node: no network, one forward per token."""
    if num_tokens < 0:
        raise InvalidInputError("num_tokens must be >= 0")
    node = topology.node(node_id)
    cost = topology.cost(node_id, "token")
    log = _EventLog()
    now = 0.0
    for _ in range(num_tokens):
        now += cost
        log.add(now, "compute-done", node_id, node_id, 0, "token")
    on_device = node.tier == "device"
    metrics = MetricsRecord(
        tokens_emitted=num_tokens,
        simulated_wall_s=now,
        device_compute_s=now if on_device else 0.0,
        transmit_s=0.0,
        server_compute_s=0.0 if on_device else now,
        bytes_up=0,
        bytes_down=0,
        acceptance_rate=1.0,
    )
    return log.finalize(), metrics


def run_tofc_scenario(
    topology: Topology, cfg: TofcConfig, features, device: str = "device",
    server: str = "edge", seed: int = 0,
):
    """Compress on the device, uplink the container, decode on the server."""
    net = _Net(topology, seed)
    log = _EventLog()
    encode_cost = topology.cost(device, "feature") * features.count
    decode_cost = topology.cost(server, "decode")
    bs, stats = tofc_pipeline(features, cfg)
    blob = bs.to_bytes()
    now = encode_cost
    log.add(now, "compute-done", device, device, 0, "tofc-encode")
    now = net.send(now, device, server, len(blob), log, "bitstream")
    server_cost = decode_cost * stats["M"]
    now += server_cost
    log.add(now, "compute-done", server, server, 0, "tofc-decode")
    metrics = MetricsRecord(
        tokens_emitted=0,
        simulated_wall_s=now,
        device_compute_s=encode_cost,
        transmit_s=net.transmit_s,
        server_compute_s=server_cost,
        bytes_up=net.bytes_up,
        bytes_down=net.bytes_down,
        acceptance_rate=1.0,
    )
    return log.finalize(), metrics, stats


def run_device_server_collab(
    topology: Topology, num_devices: int, seed: int, server: str = "edge",
    request_bytes: int = 256, response_bytes: int = 1024,
    broadcast_bytes: int = 1024, revision_bytes: int = 512,
):
    """Four-step choreography: request, parallel responses, aggregate, revise.

    The aggregation step fires exactly at the latest response arrival; the
    broadcast goes out after the server's aggregation compute, and the run
    ends when every revision has arrived back.
    """
    if num_devices < 1:
        raise InvalidInputError("need at least one device")
    devices = [n.id for n in topology.nodes if n.tier == "device"][:num_devices]
    if len(devices) < num_devices:
        raise InvalidScenarioError(
            f"topology has {len(devices)} device nodes, scenario needs {num_devices}"
        )
    topology.node(server)
    net = _Net(topology, seed)
    log = _EventLog()
    response_arrivals = []
    for dev in devices:
        t_req = net.send(0.0, server, dev, request_bytes, log, "request")
        response_arrivals.append(net.send(t_req, dev, server, response_bytes, log, "response"))
    agg_at = max(response_arrivals)
    log.add(agg_at, "scenario-step", server, server, 0, "aggregate")
    agg_cost = float(topology.node(server).compute_cost.get("aggregate", 0.0))
    broadcast_at = agg_at + agg_cost
    revision_arrivals = []
    for dev in devices:
        t_b = net.send(broadcast_at, server, dev, broadcast_bytes, log, "broadcast")
        revision_arrivals.append(net.send(t_b, dev, server, revision_bytes, log, "revision"))
    wall = max(revision_arrivals)
    if net.sent != net.delivered:
        raise InvariantViolationError("message conservation violated")
    metrics = MetricsRecord(
        tokens_emitted=0,
        simulated_wall_s=wall,
        device_compute_s=0.0,
        transmit_s=net.transmit_s,
        server_compute_s=agg_cost,
        bytes_up=net.bytes_up,
        bytes_down=net.bytes_down,
        acceptance_rate=1.0,
    )
    return log.finalize(), metrics


def default_topology() -> Topology:
    """Documented default: 10/30/50 ms per token, millisecond-scale links."""
    return Topology(
        nodes=(
            NodeSpec(
                id="device", tier="device",
                compute_cost={"token": 0.010, "feature": 2e-4, "aggregate": 0.0},
            ),
            NodeSpec(
                id="edge", tier="edge",
                compute_cost={"token": 0.030, "decode": 1e-4, "aggregate": 0.0},
            ),
            NodeSpec(
                id="cloud", tier="cloud",
                compute_cost={"token": 0.050, "decode": 1e-4, "aggregate": 0.0},
            ),
        ),
        links=(
            LinkSpec("device", "edge", 1e-3, 1e7, 0.0, 1),
            LinkSpec("edge", "device", 1e-3, 1e7, 0.0, 2),
            LinkSpec("edge", "cloud", 2e-3, 1e8, 0.0, 3),
            LinkSpec("cloud", "edge", 2e-3, 1e8, 0.0, 4),
        ),
    )


def collab_topology(num_devices: int, latencies=None, server: str = "edge") -> Topology:
    """A star of device nodes around one server node."""
    if num_devices < 1:
        raise InvalidInputError("need at least one device")
    if latencies is None:
        latencies = [1e-3] * num_devices
    if len(latencies) != num_devices:
        raise InvalidInputError("need one latency per device")
    nodes = [NodeSpec(id=server, tier="edge", compute_cost={"token": 0.030, "aggregate": 0.0})]
    links = []
    for i, lat in enumerate(latencies):
        dev = f"device_{i}"
        nodes.append(NodeSpec(id=dev, tier="device", compute_cost={"token": 0.010}))
        links.append(LinkSpec(server, dev, lat, 1e7, 0.0, 2 * i + 1))
        links.append(LinkSpec(dev, server, lat, 1e7, 0.0, 2 * i + 2))
    return Topology(nodes=tuple(nodes), links=tuple(links))


def topology_from_dict(doc: dict) -> Topology:
    try:
        nodes = tuple(
            NodeSpec(
                id=str(n["id"]), tier=str(n["tier"]),
                compute_cost={str(k): float(v) for k, v in n["compute_cost"].items()},
            )
            for n in doc["nodes"]
        )
        links = tuple(
            LinkSpec(
                src=str(l["from"]), dst=str(l["to"]),
                latency_s=float(l["latency_s"]),
                bandwidth_bytes_per_s=float(l["bandwidth_bytes_per_s"]),
                jitter_s=float(l.get("jitter_s", 0.0)),
                seed=int(l.get("seed", 0)),
            )
            for l in doc["links"]
        )
        return Topology(nodes=nodes, links=links)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidScenarioError(f"malformed topology: {exc}") from exc
    except InvalidInputError as exc:
        raise InvalidScenarioError(str(exc)) from exc


def _build_tier_models(params, tiers):
    model_specs = params.get("models")
    if not isinstance(model_specs, dict) or set(model_specs) != set(tiers):
        raise InvalidScenarioError("specdec scenario needs one model spec per tier")
    vocab = int(params.get("vocab_size", 32))
    embed = int(params.get("embed_dim", 16))
    window = int(params.get("context_window", 8))
    models = {}
    for tier in tiers:
        spec = model_specs[tier]
        try:
            cfg = ToyLmConfig(
                vocab_size=vocab, embed_dim=embed,
                num_layers=int(spec["layers"]), context_window=window,
                seed=int(spec["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidScenarioError(f"bad model spec for {tier!r}: {exc}") from exc
        models[tier] = LmDecoder(build(cfg))
    return models


_SCENARIO_KEYS = {
    "specdec": {
        "tiers", "gamma", "num_tokens", "mode", "vocab_size", "embed_dim",
        "context_window", "models", "prompt",
    },
    "single": {"node", "num_tokens"},
    "tofc": {
        "device", "server", "num_points", "dim", "num_groups", "num_centers",
        "k_neighbors", "num_models", "feature_seed",
    },
    "collab": {
        "server", "num_devices", "request_bytes", "response_bytes",
        "broadcast_bytes", "revision_bytes",
    },
}


def run_scenario(topology: Topology, scenario: dict, seed: int):
    """Dispatch a scenario description; returns (trace, MetricsRecord).

    An empty description (or kind "empty") produces an empty trace and
    zeroed metrics.
    """
    if not scenario or scenario.get("kind") == "empty":
        return [], zero_metrics()
    kind = scenario.get("kind")
    if kind not in _SCENARIO_KEYS:
        raise InvalidScenarioError(f"unknown scenario kind {kind!r}")
    params = {k: v for k, v in scenario.items() if k != "kind"}
    unknown = set(params) - _SCENARIO_KEYS[kind]
    if unknown:
        raise InvalidScenarioError(f"unknown {kind} parameters: {sorted(unknown)}")
    if kind == "single":
        try:
            node = str(params["node"])
            num_tokens = int(params["num_tokens"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidScenarioError(f"bad single scenario: {exc}") from exc
        return run_single_tier_scenario(topology, node, num_tokens)
    if kind == "specdec":
        try:
            tiers = tuple(str(t) for t in params["tiers"])
            gamma = int(params["gamma"])
            num_tokens = int(params["num_tokens"])
            mode = str(params.get("mode", "sequential"))
            prompt = [int(t) for t in params.get("prompt", [0])]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidScenarioError(f"bad specdec scenario: {exc}") from exc
        costs = {t: topology.cost(t, "token") for t in tiers}
        try:
            cfg = ProtocolConfig(
                draft_len=gamma, tiers=tiers, per_token_compute_cost=costs, mode=mode
            )
        except InvalidInputError as exc:
            raise InvalidScenarioError(str(exc)) from exc
        models = _build_tier_models(params, tiers)
        return run_specdec_scenario(topology, cfg, models, prompt, num_tokens, seed)
    if kind == "tofc":
        try:
            device = str(params.get("device", "device"))
            server = str(params.get("server", "edge"))
            num_points = int(params["num_points"])
            dim = int(params["dim"])
            num_groups = int(params.get("num_groups", 4))
            num_centers = int(params["num_centers"])
            k_neighbors = int(params["k_neighbors"])
            num_models = int(params.get("num_models", 2))
            feature_seed = int(params.get("feature_seed", seed))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidScenarioError(f"bad tofc scenario: {exc}") from exc
        features = make_blob_features(num_points, dim, num_groups, Rng(feature_seed))
        if num_models < 1 or num_models > num_points // 2:
            raise InvalidScenarioError("num_models must be in [1, num_points/2]")
        rows = np.arange(features.count)
        models = tuple(
            fit_laplacian(features.features[rows % num_models == e], e)
            for e in range(num_models)
        )
        try:
            cfg = TofcConfig(num_centers=num_centers, k_neighbors=k_neighbors, models=models)
        except InvalidInputError as exc:
            raise InvalidScenarioError(str(exc)) from exc
        trace, metrics, _ = run_tofc_scenario(
            topology, cfg, features, device=device, server=server, seed=seed
        )
        return trace, metrics
    # collab
    try:
        num_devices = int(params["num_devices"])
        server = str(params.get("server", "edge"))
        sizes = {
            key: int(params.get(key, default))
            for key, default in (
                ("request_bytes", 256), ("response_bytes", 1024),
                ("broadcast_bytes", 1024), ("revision_bytes", 512),
            )
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidScenarioError(f"bad collab scenario: {exc}") from exc
    return run_device_server_collab(
        topology, num_devices, seed, server=server,
        request_bytes=sizes["request_bytes"], response_bytes=sizes["response_bytes"],
        broadcast_bytes=sizes["broadcast_bytes"], revision_bytes=sizes["revision_bytes"],
    )
