"""Acceptance gate: ten checks, one printed verdict line each.

Each test records CRITERION n PASS or CRITERION n FAIL; the conftest
terminal-summary hook prints the collected lines after the run so they
survive pytest's output capture, and -s shows them inline as well. The
assertions themselves carry the tolerances.
"""

import sys
import time
from contextlib import contextmanager

import numpy as np

from conftest import FixedModel, TableModel, conditional_marginals, enumerate_round
from test_tofc import oracle_dpc, laplace_sample

from aiflow.cli import main as cli_main
from aiflow.familial import (
    decompose_layer,
    hpcd_build,
    hpcd_truncate,
    truncation_loss,
    whiten,
)
from aiflow.netsim import default_topology, run_single_tier_scenario, run_specdec_scenario
from aiflow.numerics import Rng, svd_reduced
from aiflow.specdec import ProtocolConfig, draft, verify
from aiflow.tofc import (
    FeatureSet,
    LaplacianModel,
    TofcConfig,
    decode,
    dpc_knn_cluster,
    encode,
    estimate_rate,
    fit_laplacian,
    make_blob_features,
    tofc_pipeline,
)
from aiflow.toylm import ToyLmConfig, build, forward_exit, forward_full, resume_from


VERDICTS = []


def _verdict(line):
    VERDICTS.append(line)
    print(line, file=sys.__stdout__, flush=True)


@contextmanager
def criterion(num, label):
    try:
        yield
    except BaseException:
        _verdict(f"CRITERION {num} FAIL: {label}")
        raise
    _verdict(f"CRITERION {num} PASS: {label}")


def rand_int(rng, lo, hi):
    """Uniform integer in [lo, hi]."""
    return lo + int(rng.uniform() * (hi - lo + 1))


def test_criterion_01_truncation_loss_identity():
    with criterion(1, "whitened truncation loss identity, 100 layers, every h"):
        start = time.monotonic()
        rng = Rng(101)
        for _ in range(100):
            m = rand_int(rng, 2, 32)
            n = rand_int(rng, 2, 32)
            w = rng.normal_matrix(m, n)
            x = rng.normal_matrix(n, n + 8)
            ctx = whiten(x, ridge=0.0)
            sigma = svd_reduced(w @ ctx.s).sigma
            for h in range(1, min(m, n) + 1):
                layer = decompose_layer(w, ctx, h)
                predicted = truncation_loss(sigma, h)
                diff = w @ x - layer.apply(x)
                measured = float(np.sum(diff * diff))
                scale = max(predicted, measured, 1e-12)
                assert abs(predicted - measured) / scale < 1e-8
        assert time.monotonic() - start < 10.0


def test_criterion_02_verify_procedure_exactness():
    with criterion(2, "draft-verify marginal: enumeration, 1e6-token MC, 3-sigma"):
        start = time.monotonic()
        device = TableModel(8, 3001)
        edge = TableModel(8, 3002)
        cfg = ProtocolConfig(
            draft_len=2, tiers=("device", "edge"),
            per_token_compute_cost={"device": 0.01, "edge": 0.03},
        )
        prefix = (2,)
        paths = enumerate_round(cfg, {"device": device, "edge": edge}, prefix)
        total = sum(w for _, w in paths)
        assert abs(total - 1.0) < 1e-12
        conditionals, _ = conditional_marginals(paths)
        for (sub, token), mass in conditionals.items():
            expected = edge.next_dist(list(prefix) + list(sub)).probs[token]
            assert abs(mass - expected) < 1e-12

        p_d = np.array([0.30, 0.25, 0.15, 0.10, 0.08, 0.06, 0.04, 0.02])
        p_t = np.array([0.20, 0.20, 0.20, 0.12, 0.10, 0.08, 0.06, 0.04])
        dev = FixedModel(p_d)
        target_dist = FixedModel(p_t).next_dist([])
        rng = Rng(5)
        counts = np.zeros(8, dtype=np.int64)
        emitted = accepted = scanned = 0
        while emitted < 1_000_000:
            batch = draft(dev, [0], 4, rng)
            result = verify([target_dist] * 4, batch, rng)
            tokens = batch.tokens[: result.accepted_count]
            accepted += result.accepted_count
            scanned += result.accepted_count
            if result.correction_token is not None:
                tokens = tokens + [result.correction_token]
                scanned += 1
            for t in tokens:
                counts[t] += 1
            emitted += len(tokens)
        empirical = counts / counts.sum()
        tv = 0.5 * float(np.abs(empirical - p_t).sum())
        assert tv <= 0.01
        alpha = float(np.minimum(p_d, p_t).sum())
        sigma = (alpha * (1.0 - alpha) / scanned) ** 0.5
        assert abs(accepted / scanned - alpha) <= 3.0 * sigma
        assert time.monotonic() - start < 60.0


def test_criterion_03_three_tier_equivalence():
    with criterion(3, "three-tier emitted marginal equals top verifier's law"):
        models = {
            "device": TableModel(4, 41),
            "edge": TableModel(4, 42),
            "cloud": TableModel(4, 43),
        }
        cfg = ProtocolConfig(
            draft_len=2, tiers=("device", "edge", "cloud"),
            per_token_compute_cost={"device": 0.01, "edge": 0.03, "cloud": 0.05},
        )
        prefix = (1,)
        paths = enumerate_round(cfg, models, prefix)
        assert abs(sum(w for _, w in paths) - 1.0) < 1e-12
        conditionals, _ = conditional_marginals(paths)
        for (sub, token), mass in conditionals.items():
            expected = models["cloud"].next_dist(list(prefix) + list(sub)).probs[token]
            assert abs(mass - expected) < 1e-12


def test_criterion_04_throughput_trend():
    with criterion(4, "device-edge 1.2x edge-only at acceptance 0.8; pipelined wall"):
        topo = default_topology()
        _, edge_m = run_single_tier_scenario(topo, "edge", 200)
        edge_tput = edge_m.tokens_emitted / edge_m.simulated_wall_s
        models = {
            "device": FixedModel([0.5, 0.3, 0.2, 0.0]),
            "edge": FixedModel([0.35, 0.3, 0.25, 0.1]),
        }
        costs = {"device": 0.010, "edge": 0.030}
        seq_cfg = ProtocolConfig(draft_len=4, tiers=("device", "edge"),
                                 per_token_compute_cost=costs)
        pip_cfg = ProtocolConfig(draft_len=4, tiers=("device", "edge"),
                                 per_token_compute_cost=costs, mode="pipelined")
        _, m_seq = run_specdec_scenario(topo, seq_cfg, models, [0], 200, seed=7)
        _, m_pip = run_specdec_scenario(topo, pip_cfg, models, [0], 200, seed=7)
        assert m_seq.acceptance_rate >= 0.8
        seq_tput = m_seq.tokens_emitted / m_seq.simulated_wall_s
        assert seq_tput >= 1.2 * edge_tput
        assert m_pip.simulated_wall_s <= m_seq.simulated_wall_s


def test_criterion_05_exit_resume_alignment():
    with criterion(5, "resume_from(forward_exit) equals forward_full, 100 contexts"):
        lm = build(ToyLmConfig(vocab_size=20, embed_dim=12, num_layers=6,
                               context_window=4, seed=3))
        rng = Rng(1009)
        for case in range(100):
            length = case % 10
            context = [rand_int(rng, 0, 19) for _ in range(length)]
            full = forward_full(lm, context)
            for exit_index in range(1, lm.config.num_layers + 1):
                _, act = forward_exit(lm, context, exit_index)
                resumed = resume_from(lm, act)
                assert np.max(np.abs(resumed.probs - full.probs)) <= 1e-12


def test_criterion_06_dpc_knn_oracle():
    with criterion(6, "DPC-KNN equals brute-force oracle on 200 feature sets"):
        rng = Rng(2024)
        for trial in range(200):
            n = rand_int(rng, 2, 64)
            dim = rand_int(rng, 2, 6)
            feats = rng.normal_matrix(n, dim)
            if trial % 5 == 0 and n >= 3:
                feats[n // 2] = feats[0]
            k = rand_int(rng, 1, min(8, n - 1))
            m = rand_int(rng, 1, min(10, n))
            result = dpc_knn_cluster(FeatureSet(features=feats.copy()), k, m)
            oc_centers, oc_assign, oc_merged, _, _ = oracle_dpc(feats, k, m)
            assert list(result.center_indices) == list(oc_centers)
            assert np.array_equal(result.assignment, oc_assign)
            assert np.array_equal(result.merged, oc_merged)


def test_criterion_07_codec_soundness():
    with criterion(7, "lossless roundtrip, payload window, 1% at 1e5 symbols"):
        start = time.monotonic()
        rng = Rng(71)
        for case in range(1000):
            mu = (rng.uniform() - 0.5) * 10.0
            b = 0.2 + rng.uniform() * 2.8
            model = LaplacianModel(mu=np.array([mu]), b=np.array([b]), id=0,
                                   q_range=64)
            length = rand_int(rng, 10, 60)
            symbols = np.array(
                [[int(np.rint(laplace_sample(mu, b, rng)))] for _ in range(length)],
                dtype=np.int64,
            )
            est = estimate_rate(symbols.reshape(-1), model)
            bs = encode(symbols, (model,), [0] * length)
            assert np.array_equal(decode(bs, (model,)), symbols)
            bits = 8 * len(bs.payload)
            assert est <= bits <= est + 64

        mu, b = 0.3, 1.0
        model = LaplacianModel(mu=np.array([mu, mu]), b=np.array([b, b]), id=0,
                               q_range=255)
        big = np.array(
            [int(np.rint(laplace_sample(mu, b, rng))) for _ in range(100_000)],
            dtype=np.int64,
        ).reshape(50_000, 2)
        est = estimate_rate(big.reshape(-1), model)
        bs = encode(big, (model,), [0] * big.shape[0])
        assert np.array_equal(decode(bs, (model,)), big)
        bits = 8 * len(bs.payload)
        assert abs(bits - est) <= 0.01 * est
        assert time.monotonic() - start < 30.0


def test_criterion_08_hpcd_monotone_and_recovery():
    with criterion(8, "residual norm non-increasing; full-rank stack recovers"):
        rng = Rng(88)
        for _ in range(20):
            m = rand_int(rng, 3, 12)
            n = rand_int(rng, 3, 12)
            w = rng.normal_matrix(m, n)
            x = rng.normal_matrix(n, n + 4)
            ctx = whiten(x, ridge=0.0)
            full = min(m, n)
            stack = hpcd_build(w, ctx, 1, full)
            norms = [float(np.linalg.norm(w @ ctx.s))]
            for k in range(1, full + 1):
                residual = (w - hpcd_truncate(stack, k)) @ ctx.s
                norms.append(float(np.linalg.norm(residual)))
            assert all(a >= b - 1e-9 for a, b in zip(norms, norms[1:]))
            recovered = hpcd_truncate(stack, full)
            scale = max(1.0, float(np.linalg.norm(w)))
            assert float(np.linalg.norm(w - recovered)) <= 1e-7 * scale


def test_criterion_09_simulator_determinism(tmp_path):
    with criterion(9, "byte-identical traces and CSVs across consecutive runs"):
        sim_cfg = tmp_path / "sim.json"
        sim_cfg.write_text(
            """
            {"scenario": {"kind": "specdec", "tiers": ["device", "edge"],
                          "gamma": 4, "num_tokens": 24, "mode": "sequential",
                          "vocab_size": 16, "embed_dim": 10,
                          "context_window": 5,
                          "models": {"device": {"layers": 1, "seed": 4},
                                     "edge": {"layers": 3, "seed": 4}},
                          "prompt": [1]},
             "seed": 6}
            """
        )
        spec_cfg = tmp_path / "spec.json"
        spec_cfg.write_text(
            """
            {"vocab_size": 16, "embed_dim": 10, "context_window": 5,
             "prompt": [1], "num_tokens": 120, "seed": 12,
             "configs": [{"mode": "sequential", "tiers": ["device", "edge"],
                          "gamma": 4,
                          "models": {"device": {"layers": 1, "seed": 4},
                                     "edge": {"layers": 3, "seed": 4}}}]}
            """
        )
        pairs = []
        for label in ("first", "second"):
            sim_out = tmp_path / f"sim_{label}"
            spec_out = tmp_path / f"spec_{label}"
            assert cli_main(["simulate", "--config", str(sim_cfg),
                             "--out", str(sim_out)]) == 0
            assert cli_main(["specdec", "--config", str(spec_cfg),
                             "--out", str(spec_out)]) == 0
            pairs.append(
                (
                    (sim_out / "trace.jsonl").read_bytes(),
                    (sim_out / "metrics.csv").read_bytes(),
                    (spec_out / "specdec.csv").read_bytes(),
                    (spec_out / "summary.json").read_bytes(),
                )
            )
        assert pairs[0] == pairs[1]


def test_criterion_10_tofc_payload_monotone():
    with criterion(10, "payload bytes non-increasing as M shrinks N..N/8"):
        n = 64
        fs = make_blob_features(n, 6, 4, Rng(17))
        rows = np.arange(n)
        models = tuple(
            fit_laplacian(fs.features[rows % 2 == e], e) for e in range(2)
        )
        payloads = []
        for m_centers in (n, n // 2, n // 4, n // 8):
            cfg = TofcConfig(num_centers=m_centers, k_neighbors=4, models=models)
            _, stats = tofc_pipeline(fs, cfg)
            assert stats["M"] == m_centers
            payloads.append(stats["bytes"])
        assert payloads == sorted(payloads, reverse=True)
