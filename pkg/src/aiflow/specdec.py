"""Draft-and-verify decoding across two or three model tiers.

A drafter samples gamma tokens autoregressively; a verifier walks those
positions in order, accepting token x at position i when u <= min(1,
p_t(x)/p_d(x)) with u ~ U[0,1), and on the first rejection resamples a
correction from the normalized positive residual max(0, p_t - p_d), which is
exactly what makes the emitted marginal equal the verifier's distribution.
Three tiers chain the rule: the edge-verified stream (each token paired with
the edge's full distribution at that position) is the draft stream the cloud
verifies, so the final output law is the cloud's.

Models are anything with `next_dist(context) -> TokenDistribution`.

RNG discipline: callers hand one generator to a run; it is split into one
child stream per tier (spawn key = tier index, in tier order) before any
draw. The drafter burns one uniform per drafted token; a verifier burns one
uniform per scanned position plus one per resample. Because the streams are
per-role, sequential and pipelined execution consume them in the same
per-role order, which is what makes the two modes emit identical tokens when
nothing is ever rejected.

run_pipelined's clock only prices messages; give it any object with
`uplink_seconds(token_count)` and `downlink_seconds(token_count)`. The
network simulator provides one wired to a link model; ZeroClock prices
everything at zero for pure protocol runs. A speculative batch that gets
aborted by a correction still consumed its full gamma draws: draw counts must
never depend on timing arithmetic, or platform-level float drift would change
token streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidInputError,
    InvariantViolationError,
    ProtocolViolationError,
)
from .numerics import Rng
from .toylm import TokenDistribution, sample


@dataclass(frozen=True)
class DraftBatch:
    """Tokens drafted from a base context, with the drafter's distribution each."""

    tokens: list[int]
    draft_dists: list[TokenDistribution]
    base_context: list[int]

    def __post_init__(self):
        if not self.tokens or len(self.tokens) != len(self.draft_dists):
            raise InvalidInputError("tokens and draft_dists must be equal-length, non-empty")


@dataclass(frozen=True)
class VerifyResult:
    accepted_count: int
    correction_token: int | None
    rng_draws_used: int


@dataclass(frozen=True)
class ProtocolConfig:
    """Decoding protocol parameters.

    tiers names the chain from drafter to final verifier (2 or 3 roles);
    per_token_compute_cost prices one decoded token at the drafter and one
    verification forward at each verifier, in simulated seconds.
    """

    draft_len: int
    tiers: tuple[str, ...]
    per_token_compute_cost: dict[str, float]
    mode: str = "sequential"

    def __post_init__(self):
        if self.draft_len < 1:
            raise InvalidInputError("draft_len must be >= 1")
        if not 2 <= len(self.tiers) <= 3:
            raise InvalidInputError("tiers must list 2 or 3 roles")
        if len(set(self.tiers)) != len(self.tiers):
            raise InvalidInputError("tier roles must be distinct")
        for role in self.tiers:
            cost = self.per_token_compute_cost.get(role)
            if cost is None or not cost > 0.0:
                raise InvalidInputError(f"per_token_compute_cost[{role!r}] must be > 0")
        if self.mode not in ("sequential", "pipelined"):
            raise InvalidInputError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class RoundRecord:
    """One verification outcome at one tier boundary."""

    stage: str
    drafted: int
    accepted: int


@dataclass(frozen=True)
class TranscriptTotals:
    accepted: int
    corrections: int
    rejected: int
    rounds: int


@dataclass(frozen=True)
class DecodeTranscript:
    emitted_tokens: list[int]
    per_round: list[RoundRecord]
    totals: TranscriptTotals

    def __post_init__(self):
        if self.totals.accepted + self.totals.corrections != len(self.emitted_tokens):
            raise InvariantViolationError(
                "transcript totals do not account for the emitted tokens"
            )


@dataclass(frozen=True)
class PipelineTiming:
    """Simulated-clock accounting for a pipelined run.

    round_times holds one (draft_done, batch_arrival, verify_done,
    verdict_arrival) tuple per round so callers can reconstruct the event
    timeline.
    """

    wall_s: float
    device_compute_s: float
    verifier_compute_s: float
    uplink_s: float
    downlink_s: float
    discarded_batches: int
    round_times: tuple = ()


class ZeroClock:
    """Clock for pure protocol runs: transmission costs nothing."""

    def uplink_seconds(self, token_count: int) -> float:
        return 0.0

    def downlink_seconds(self, token_count: int) -> float:
        return 0.0


def draft(device_model, context, gamma: int, rng: Rng) -> DraftBatch:
    """Autoregressively sample gamma tokens from the drafting model."""
    if not isinstance(gamma, int) or gamma < 1:
        raise InvalidInputError("gamma must be >= 1")
    prefix = [int(t) for t in context]
    base = list(prefix)
    tokens: list[int] = []
    dists: list[TokenDistribution] = []
    for _ in range(gamma):
        dist = device_model.next_dist(prefix)
        token = sample(dist, rng)
        tokens.append(token)
        dists.append(dist)
        prefix.append(token)
    return DraftBatch(tokens=tokens, draft_dists=dists, base_context=base)


def verify(target_dists, batch: DraftBatch, rng: Rng) -> VerifyResult:
    """Accept a prefix of the batch under the target model, correcting the rest.

    Walks positions in order. At position i, the drafted token x is accepted
    when u <= min(1, p_t(x)/p_d(x)); the first rejection draws the correction
    from the normalized residual max(0, p_t - p_d) and stops the scan.
    """
    if len(target_dists) != len(batch.tokens):
        raise InvalidInputError(
            f"got {len(target_dists)} target distributions for {len(batch.tokens)} tokens"
        )
    draws = 0
    for i, (token, p_d) in enumerate(zip(batch.tokens, batch.draft_dists)):
        p_t = target_dists[i]
        pd = float(p_d.probs[token])
        if pd == 0.0:
            raise ProtocolViolationError(
                f"drafted token {token} at position {i} has zero draft probability"
            )
        pt = float(p_t.probs[token])
        u = rng.uniform()
        draws += 1
        if u <= min(1.0, pt / pd):
            continue
        residual = np.maximum(p_t.probs - p_d.probs, 0.0)
        mass = float(residual.sum())
        if mass <= 0.0:
            raise InvariantViolationError(
                "rejection occurred but the residual distribution is empty"
            )
        cum = np.cumsum(residual / mass)
        u2 = rng.uniform()
        draws += 1
        correction = min(int(np.searchsorted(cum, u2, side="right")), residual.size - 1)
        return VerifyResult(accepted_count=i, correction_token=correction, rng_draws_used=draws)
    return VerifyResult(
        accepted_count=len(batch.tokens), correction_token=None, rng_draws_used=draws
    )


def expected_acceptance(p_d: TokenDistribution, p_t: TokenDistribution) -> float:
    """Probability a token drafted from p_d survives verification against p_t."""
    if p_d.probs.size != p_t.probs.size:
        raise InvalidInputError("distributions must share a vocabulary")
    return float(np.minimum(p_d.probs, p_t.probs).sum())


def _verified_stream(verify_result: VerifyResult, batch: DraftBatch):
    """Tokens a verifier emits for a batch: accepted prefix plus any correction."""
    stream = list(batch.tokens[: verify_result.accepted_count])
    if verify_result.correction_token is not None:
        stream.append(verify_result.correction_token)
    return stream


@dataclass
class _RoundOutcome:
    emitted: list[int]
    records: list[RoundRecord]
    final_drafted: int
    final_accepted: int
    had_correction: bool


def _stage_name(lower: str, upper: str) -> str:
    return f"{lower}->{upper}"


def run_round(cfg: ProtocolConfig, models: dict, prefix, rngs: dict) -> _RoundOutcome:
    """One draft-verify round from a prefix; the workhorse for both run modes.

    rngs maps each tier role to its stream. For three tiers the middle
    verifier's emitted stream, paired with its own per-position
    distributions, becomes the draft batch the last tier verifies.
    """
    drafter = cfg.tiers[0]
    batch = draft(models[drafter], prefix, cfg.draft_len, rngs[drafter])
    records: list[RoundRecord] = []
    current = batch
    emitted: list[int] = []
    final_drafted = cfg.draft_len
    final_accepted = 0
    had_correction = False
    for upper_idx in range(1, len(cfg.tiers)):
        lower = cfg.tiers[upper_idx - 1]
        upper = cfg.tiers[upper_idx]
        verifier = models[upper]
        target_dists = []
        running = list(current.base_context)
        for token in current.tokens:
            target_dists.append(verifier.next_dist(running))
            running.append(token)
        result = verify(target_dists, current, rngs[upper])
        records.append(
            RoundRecord(
                stage=_stage_name(lower, upper),
                drafted=len(current.tokens),
                accepted=result.accepted_count,
            )
        )
        stream = _verified_stream(result, current)
        final_drafted = len(current.tokens)
        final_accepted = result.accepted_count
        had_correction = result.correction_token is not None
        if upper_idx == len(cfg.tiers) - 1:
            emitted = stream
        else:
            if not stream:
                raise InvariantViolationError("verifier emitted an empty stream")
            # The emitted stream's law at each position is the verifier's own
            # distribution there, so those distributions are the claimed draft
            # law for the next tier up.
            current = DraftBatch(
                tokens=stream,
                draft_dists=target_dists[: len(stream)],
                base_context=list(current.base_context),
            )
    return _RoundOutcome(
        emitted=emitted,
        records=records,
        final_drafted=final_drafted,
        final_accepted=final_accepted,
        had_correction=had_correction,
    )


def _spawn_streams(cfg: ProtocolConfig, rng: Rng) -> dict:
    return {role: rng.spawn(idx) for idx, role in enumerate(cfg.tiers)}


def _assemble_transcript(
    emitted: list[int], records: list[RoundRecord], rounds: int, rejected: int,
    accepted_used: int, corrections_used: int,
) -> DecodeTranscript:
    return DecodeTranscript(
        emitted_tokens=emitted,
        per_round=records,
        totals=TranscriptTotals(
            accepted=accepted_used,
            corrections=corrections_used,
            rejected=rejected,
            rounds=rounds,
        ),
    )


def run_sequential(
    cfg: ProtocolConfig, models: dict, prompt, num_tokens: int, rng: Rng
) -> DecodeTranscript:
    """Strictly alternating draft and verify rounds until num_tokens are emitted.

    per_round keeps verification outcomes exactly as they happened; totals
    account for the emitted stream after truncation to num_tokens, so
    totals.accepted + totals.corrections always equals the token count.
    """
    if num_tokens < 0:
        raise InvalidInputError("num_tokens must be >= 0")
    missing = [role for role in cfg.tiers if role not in models]
    if missing:
        raise InvalidInputError(f"models missing for tiers {missing}")
    streams = _spawn_streams(cfg, rng)
    emitted: list[int] = []
    records: list[RoundRecord] = []
    rounds = 0
    rejected = 0
    accepted_used = 0
    corrections_used = 0
    prompt = [int(t) for t in prompt]
    while len(emitted) < num_tokens:
        outcome = run_round(cfg, models, prompt + emitted, streams)
        rounds += 1
        records.extend(outcome.records)
        if outcome.had_correction:
            rejected += 1
        room = num_tokens - len(emitted)
        used = outcome.emitted[:room]
        used_accepted = min(len(used), outcome.final_accepted)
        accepted_used += used_accepted
        corrections_used += len(used) - used_accepted
        emitted.extend(used)
    return _assemble_transcript(
        emitted, records, rounds, rejected, accepted_used, corrections_used
    )


def pipeline_schedule(cfg: ProtocolConfig) -> int:
    """Draft length that balances drafting against one verify forward.

    gamma* = max(1, round(verify_forward_cost / draft_token_cost)), rounding
    half away from zero.
    """
    device_cost = cfg.per_token_compute_cost[cfg.tiers[0]]
    verify_cost = cfg.per_token_compute_cost[cfg.tiers[1]]
    return max(1, int(math.floor(verify_cost / device_cost + 0.5)))


def run_pipelined(
    cfg: ProtocolConfig, models: dict, prompt, num_tokens: int, rng: Rng, clock=None
) -> tuple[DecodeTranscript, PipelineTiming]:
    """Two-tier decoding with the device drafting one batch ahead.

    While the verifier works on batch i, the device drafts batch i+1 from the
    optimistic prefix (batch i fully accepted). A correction discards the
    speculative batch (its draws included) and restarts drafting from the
    corrected prefix once the verdict message arrives. Emitted tokens appear
    at verify completion; the wall clock ends when the final verdict reaches
    the device.
    """
    if cfg.mode != "pipelined":
        raise InvalidInputError("run_pipelined requires cfg.mode == 'pipelined'")
    if len(cfg.tiers) != 2:
        raise InvalidInputError("pipelined mode supports exactly two tiers")
    if num_tokens < 0:
        raise InvalidInputError("num_tokens must be >= 0")
    missing = [role for role in cfg.tiers if role not in models]
    if missing:
        raise InvalidInputError(f"models missing for tiers {missing}")
    clock = clock if clock is not None else ZeroClock()
    device_role, verifier_role = cfg.tiers
    device_cost = cfg.per_token_compute_cost[device_role]
    verify_cost = cfg.per_token_compute_cost[verifier_role]
    streams = _spawn_streams(cfg, rng)
    prompt = [int(t) for t in prompt]

    emitted: list[int] = []
    records: list[RoundRecord] = []
    rounds = 0
    rejected = 0
    accepted_used = 0
    corrections_used = 0
    discarded = 0
    device_compute = 0.0
    verifier_compute = 0.0
    uplink_total = 0.0
    downlink_total = 0.0
    round_times = []

    # Times: when the device finished drafting the batch now under
    # verification, when the verifier frees up, and when the device heard the
    # last verdict.
    verifier_free = 0.0
    wall = 0.0
    draft_start = 0.0

    confirmed_prefix = list(prompt)
    speculative: DraftBatch | None = None
    speculative_done = 0.0

    while len(emitted) < num_tokens:
        prev_verdict = wall
        if speculative is None:
            batch = draft(models[device_role], confirmed_prefix, cfg.draft_len, streams[device_role])
            draft_done = draft_start + cfg.draft_len * device_cost
        else:
            batch = speculative
            draft_done = speculative_done
            speculative = None
        device_compute += cfg.draft_len * device_cost

        up = clock.uplink_seconds(cfg.draft_len)
        uplink_total += up
        arrive = draft_done + up
        verify_start = max(arrive, verifier_free)

        # One batch of lookahead: the next speculative batch starts once the
        # current one is out the door AND no older batch is still unverified,
        # so the device is never more than one batch ahead.
        speculative = draft(
            models[device_role],
            confirmed_prefix + batch.tokens,
            cfg.draft_len,
            streams[device_role],
        )
        speculative_started = max(draft_done, prev_verdict)
        speculative_done = speculative_started + cfg.draft_len * device_cost

        target_dists = []
        running = list(batch.base_context)
        for token in batch.tokens:
            target_dists.append(models[verifier_role].next_dist(running))
            running.append(token)
        result = verify(target_dists, batch, streams[verifier_role])
        verify_done = verify_start + verify_cost
        verifier_compute += verify_cost
        verifier_free = verify_done
        rounds += 1
        records.append(
            RoundRecord(
                stage=_stage_name(device_role, verifier_role),
                drafted=cfg.draft_len,
                accepted=result.accepted_count,
            )
        )

        stream = _verified_stream(result, batch)
        down = clock.downlink_seconds(1 + (1 if result.correction_token is not None else 0))
        downlink_total += down
        verdict_arrive = verify_done + down
        wall = verdict_arrive
        round_times.append((draft_done, arrive, verify_done, verdict_arrive))

        room = num_tokens - len(emitted)
        used = stream[:room]
        used_accepted = min(len(used), result.accepted_count)
        accepted_used += used_accepted
        corrections_used += len(used) - used_accepted
        emitted.extend(used)

        if result.correction_token is not None:
            rejected += 1
            # The speculative batch assumed full acceptance; its prefix is
            # now wrong. Count its compute and drop it.
            discarded += 1
            device_compute += cfg.draft_len * device_cost
            speculative = None
            confirmed_prefix = confirmed_prefix + stream
            draft_start = verdict_arrive
        else:
            confirmed_prefix = confirmed_prefix + stream
            draft_start = speculative_done

    if speculative is not None:
        # Lookahead drafted past the end of the run: work done, never shipped.
        discarded += 1
        device_compute += cfg.draft_len * device_cost

    transcript = _assemble_transcript(
        emitted, records, rounds, rejected, accepted_used, corrections_used
    )
    timing = PipelineTiming(
        wall_s=wall,
        device_compute_s=device_compute,
        verifier_compute_s=verifier_compute,
        uplink_s=uplink_total,
        downlink_s=downlink_total,
        discarded_batches=discarded,
        round_times=tuple(round_times),
    )
    return transcript, timing


def transcript_to_json(transcript: DecodeTranscript) -> dict:
    """JSON-ready dict: {tokens, rounds, totals}."""
    return {
        "tokens": list(transcript.emitted_tokens),
        "rounds": [
            {"stage": r.stage, "drafted": r.drafted, "accepted": r.accepted}
            for r in transcript.per_round
        ],
        "totals": {
            "accepted": transcript.totals.accepted,
            "corrections": transcript.totals.corrections,
            "rejected": transcript.totals.rejected,
            "rounds": transcript.totals.rounds,
            "emitted": len(transcript.emitted_tokens),
        },
    }
