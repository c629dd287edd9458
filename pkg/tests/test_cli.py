import csv
import json

import numpy as np
import pytest

from aiflow.cli import main
from aiflow.familial import allocate_ranks, whiten
from aiflow.numerics import Rng, svd_reduced
from aiflow.tofc import make_blob_features, save_features


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def decompose_config(tmp_path, **overrides):
    doc = {
        "layers": [{"m": 10, "n": 8}, {"m": 6, "n": 12}],
        "num_calib": 32,
        "h_values": [1, 2, 4, 6],
        "seed": 3,
    }
    doc.update(overrides)
    return write_config(tmp_path / "dec.json", doc)


def specdec_config(tmp_path, configs, num_tokens=240, **overrides):
    doc = {
        "vocab_size": 16,
        "embed_dim": 10,
        "context_window": 5,
        "prompt": [1],
        "num_tokens": num_tokens,
        "seed": 12,
        "configs": configs,
    }
    doc.update(overrides)
    return write_config(tmp_path / "spec.json", doc)


def feature_file(tmp_path, num_points=64, dim=6):
    fs = make_blob_features(num_points, dim, 4, Rng(17))
    path = tmp_path / "feats.feat"
    save_features(path, fs)
    return str(path)


def tofc_config(tmp_path, **overrides):
    doc = {
        "features": feature_file(tmp_path),
        "num_centers_sweep": [64, 32, 16, 8],
        "k_neighbors": 4,
        "num_models": 2,
        "seed": 2,
    }
    doc.update(overrides)
    return write_config(tmp_path / "tofc.json", doc)


class TestDecompose:
    def test_sweep_losses_agree_and_decrease(self, tmp_path):
        cfg = decompose_config(tmp_path)
        out = tmp_path / "run"
        assert main(["decompose", "--config", cfg, "--out", str(out)]) == 0
        header, rows = read_csv(out / "decompose.csv")
        assert header == ["layer", "h", "predicted_loss", "measured_loss",
                          "param_ratio"]
        by_layer = {}
        for layer, h, pred, meas, ratio in rows:
            pred, meas = float(pred), float(meas)
            scale = max(abs(pred), abs(meas), 1e-30)
            assert abs(pred - meas) / scale < 1e-8 or pred < 1e-16
            by_layer.setdefault(layer, []).append((int(h), meas))
        for series in by_layer.values():
            ordered = [m for _, m in sorted(series)]
            assert all(a >= b - 1e-9 for a, b in zip(ordered, ordered[1:]))

    def test_budget_matches_direct_allocation(self, tmp_path):
        cfg = decompose_config(tmp_path, budget=50)
        del_cfg = json.loads((tmp_path / "dec.json").read_text())
        del del_cfg["h_values"]
        cfg = write_config(tmp_path / "dec.json", del_cfg)
        out = tmp_path / "run"
        assert main(["decompose", "--config", cfg, "--out", str(out)]) == 0
        header, rows = read_csv(out / "decompose.csv")
        sigmas = []
        dims = []
        for i, (m, n) in enumerate([(10, 8), (6, 12)]):
            rng = Rng(3).spawn(i)
            w = rng.normal_matrix(m, n)
            x = rng.normal_matrix(n, 32)
            sigmas.append(svd_reduced(w @ whiten(x, ridge=0.0).s).sigma)
            dims.append((m, n))
        allocation = allocate_ranks(sigmas, dims, 50)
        assert [int(r[1]) for r in rows] == allocation.per_layer_rank

    def test_missing_field_names_it(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "dec.json", {"num_calib": 8})
        assert main(["decompose", "--config", cfg, "--out", str(tmp_path / "r")]) == 2
        assert "'layers'" in capsys.readouterr().err

    def test_both_sweep_and_budget_rejected(self, tmp_path):
        cfg = decompose_config(tmp_path, budget=50)
        assert main(["decompose", "--config", cfg, "--out", str(tmp_path / "r")]) == 2

    def test_thin_calibration_rejected(self, tmp_path):
        cfg = decompose_config(tmp_path, num_calib=4)
        assert main(["decompose", "--config", cfg, "--out", str(tmp_path / "r")]) == 2

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = decompose_config(tmp_path)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert main(["decompose", "--config", cfg, "--out", str(out_a)]) == 0
        assert main(["decompose", "--config", cfg, "--seed", "9",
                     "--out", str(out_b)]) == 0
        assert (out_a / "decompose.csv").read_bytes() != (
            out_b / "decompose.csv"
        ).read_bytes()
        manifest = json.loads((out_b / "manifest.json").read_text())
        assert manifest["seed"] == 9


class TestSpecdec:
    def identical_pair(self):
        return {
            "mode": "sequential", "tiers": ["device", "edge"], "gamma": 4,
            "models": {"device": {"layers": 2, "seed": 4},
                       "edge": {"layers": 2, "seed": 4}},
        }

    def mixed_pair(self, gamma, mode="sequential"):
        return {
            "mode": mode, "tiers": ["device", "edge"], "gamma": gamma,
            "models": {"device": {"layers": 1, "seed": 4},
                       "edge": {"layers": 3, "seed": 4}},
        }

    def test_identical_tiers_accept_everything(self, tmp_path):
        cfg = specdec_config(tmp_path, [self.identical_pair()])
        out = tmp_path / "run"
        assert main(["specdec", "--config", cfg, "--out", str(out)]) == 0
        header, rows = read_csv(out / "specdec.csv")
        assert header == ["mode", "tiers", "gamma", "acceptance_rate",
                          "sim_tokens_per_s", "tv_distance_to_target"]
        assert float(rows[0][3]) == 1.0
        assert float(rows[0][5]) == 0.0

    def test_gamma_sweep_has_stable_acceptance(self, tmp_path):
        cfg = specdec_config(tmp_path, [self.mixed_pair(g) for g in range(1, 9)])
        out = tmp_path / "run"
        assert main(["specdec", "--config", cfg, "--out", str(out)]) == 0
        _, rows = read_csv(out / "specdec.csv")
        acceptance = [float(r[3]) for r in rows]
        throughput = [float(r[4]) for r in rows]
        mean = sum(acceptance) / len(acceptance)
        assert all(abs(a - mean) < 0.2 for a in acceptance)
        assert len(set(throughput)) > 1
        summary = json.loads((out / "summary.json").read_text())
        assert [s["gamma"] for s in summary] == list(range(1, 9))

    def test_pipelined_and_three_tier_rows(self, tmp_path):
        three = {
            "mode": "sequential", "tiers": ["device", "edge", "cloud"],
            "gamma": 3,
            "models": {"device": {"layers": 1, "seed": 4},
                       "edge": {"layers": 2, "seed": 4},
                       "cloud": {"layers": 3, "seed": 4}},
        }
        cfg = specdec_config(
            tmp_path, [self.mixed_pair(3, mode="pipelined"), three]
        )
        out = tmp_path / "run"
        assert main(["specdec", "--config", cfg, "--out", str(out)]) == 0
        _, rows = read_csv(out / "specdec.csv")
        assert rows[0][0] == "pipelined"
        assert rows[1][1] == "device+edge+cloud"
        assert all(0.0 <= float(r[5]) <= 1.0 for r in rows)

    def test_missing_model_spec_rejected(self, tmp_path, capsys):
        entry = self.identical_pair()
        del entry["models"]["edge"]
        cfg = specdec_config(tmp_path, [entry])
        assert main(["specdec", "--config", cfg, "--out", str(tmp_path / "r")]) == 2
        assert "models.edge" in capsys.readouterr().err


class TestTofc:
    def test_payload_monotone_in_m(self, tmp_path):
        cfg = tofc_config(tmp_path)
        out = tmp_path / "run"
        assert main(["tofc", "--config", cfg, "--out", str(out)]) == 0
        header, rows = read_csv(out / "tofc.csv")
        assert header == ["M", "est_bits", "payload_bytes", "balance",
                          "device_s", "transmit_s", "server_s", "wall_s"]
        payloads = [int(r[2]) for r in rows]
        assert payloads == sorted(payloads, reverse=True)

    def test_more_bandwidth_less_transmit(self, tmp_path):
        def topology(bandwidth):
            return {
                "nodes": [
                    {"id": "device", "tier": "device",
                     "compute_cost": {"token": 0.01, "feature": 2e-4}},
                    {"id": "edge", "tier": "edge",
                     "compute_cost": {"token": 0.03, "decode": 1e-4}},
                ],
                "links": [
                    {"from": "device", "to": "edge", "latency_s": 1e-3,
                     "bandwidth_bytes_per_s": bandwidth, "seed": 1},
                    {"from": "edge", "to": "device", "latency_s": 1e-3,
                     "bandwidth_bytes_per_s": bandwidth, "seed": 2},
                ],
            }

        transmit = []
        for label, bw in (("slow", 1e5), ("fast", 1e8)):
            cfg = tofc_config(tmp_path, topology=topology(bw),
                              num_centers_sweep=[16])
            out = tmp_path / label
            assert main(["tofc", "--config", cfg, "--out", str(out)]) == 0
            _, rows = read_csv(out / "tofc.csv")
            transmit.append(float(rows[0][5]))
        assert transmit[1] < transmit[0]

    def test_missing_feature_file_is_io_error(self, tmp_path, capsys):
        cfg = tofc_config(tmp_path, features=str(tmp_path / "ghost.feat"))
        assert main(["tofc", "--config", cfg, "--out", str(tmp_path / "r")]) == 3
        assert "ghost.feat" in capsys.readouterr().err

    def test_corrupt_feature_magic_is_io_error(self, tmp_path):
        path = tmp_path / "bad.feat"
        good = feature_file(tmp_path)
        data = bytearray(open(good, "rb").read())
        data[0] ^= 0xFF
        path.write_bytes(bytes(data))
        cfg = tofc_config(tmp_path, features=str(path))
        assert main(["tofc", "--config", cfg, "--out", str(tmp_path / "r")]) == 3


class TestSimulate:
    def sim_config(self, tmp_path, scenario):
        doc = {
            "topology": {
                "nodes": [
                    {"id": "device", "tier": "device",
                     "compute_cost": {"token": 0.01}},
                    {"id": "edge", "tier": "edge",
                     "compute_cost": {"token": 0.03}},
                ],
                "links": [
                    {"from": "device", "to": "edge", "latency_s": 1e-3,
                     "bandwidth_bytes_per_s": 1e7, "jitter_s": 5e-4, "seed": 1},
                    {"from": "edge", "to": "device", "latency_s": 1e-3,
                     "bandwidth_bytes_per_s": 1e7, "jitter_s": 5e-4, "seed": 2},
                ],
            },
            "scenario": scenario,
            "seed": 6,
        }
        return write_config(tmp_path / "sim.json", doc)

    def specdec_scenario(self):
        return {
            "kind": "specdec", "tiers": ["device", "edge"], "gamma": 4,
            "num_tokens": 16, "mode": "sequential", "vocab_size": 16,
            "embed_dim": 10, "context_window": 5,
            "models": {"device": {"layers": 1, "seed": 4},
                       "edge": {"layers": 3, "seed": 4}},
            "prompt": [1],
        }

    def test_two_runs_byte_identical(self, tmp_path):
        cfg = self.sim_config(tmp_path, self.specdec_scenario())
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", cfg, "--out", str(out_a)]) == 0
        assert main(["simulate", "--config", cfg, "--out", str(out_b)]) == 0
        for name in ("trace.jsonl", "metrics.csv"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_empty_scenario(self, tmp_path):
        cfg = self.sim_config(tmp_path, {})
        out = tmp_path / "run"
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
        assert (out / "trace.jsonl").read_bytes() == b""
        _, rows = read_csv(out / "metrics.csv")
        assert float(rows[0][1]) == 0.0

    def test_unknown_scenario_kind_rejected(self, tmp_path):
        cfg = self.sim_config(tmp_path, {"kind": "teleport"})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "r")]) == 2

    def test_json_format_mirrors_metrics(self, tmp_path):
        cfg = self.sim_config(tmp_path, self.specdec_scenario())
        out = tmp_path / "run"
        assert main(["simulate", "--config", cfg, "--out", str(out),
                     "--format", "json"]) == 0
        mirrored = json.loads((out / "metrics.json").read_text())
        assert mirrored[0]["tokens_emitted"] == 16


class TestReport:
    def test_two_runs_concatenate_with_run_id(self, tmp_path):
        cfg = decompose_config(tmp_path)
        run_a, run_b = tmp_path / "run_a", tmp_path / "run_b"
        assert main(["decompose", "--config", cfg, "--out", str(run_a)]) == 0
        assert main(["decompose", "--config", cfg, "--seed", "4",
                     "--out", str(run_b)]) == 0
        merged = tmp_path / "merged"
        assert main(["report", str(run_a), str(run_b), "--out", str(merged)]) == 0
        header, rows = read_csv(merged / "decompose.csv")
        assert header[0] == "run_id"
        assert {r[0] for r in rows} == {"run_a", "run_b"}
        _, a_rows = read_csv(run_a / "decompose.csv")
        _, b_rows = read_csv(run_b / "decompose.csv")
        assert len(rows) == len(a_rows) + len(b_rows)
        assert (merged / "decompose_xy.csv").exists()
        report = json.loads((merged / "report.json").read_text())
        assert report["runs"] == ["run_a", "run_b"]

    def test_single_run_passes_through(self, tmp_path):
        cfg = decompose_config(tmp_path)
        run_a = tmp_path / "run_a"
        assert main(["decompose", "--config", cfg, "--out", str(run_a)]) == 0
        merged = tmp_path / "merged"
        assert main(["report", str(run_a), "--out", str(merged)]) == 0
        assert (merged / "decompose.csv").read_bytes() == (
            run_a / "decompose.csv"
        ).read_bytes()

    def test_schema_mismatch_names_columns(self, tmp_path, capsys):
        run_a, run_b = tmp_path / "run_a", tmp_path / "run_b"
        for run_dir, header in ((run_a, "x,y"), (run_b, "x,z")):
            run_dir.mkdir()
            (run_dir / "data.csv").write_text(f"{header}\n1,2\n")
            (run_dir / "manifest.json").write_text(
                json.dumps({"outputs": ["data.csv"], "seed": 0})
            )
        assert main(["report", str(run_a), str(run_b),
                     "--out", str(tmp_path / "m")]) == 2
        err = capsys.readouterr().err
        assert "z" in err and "y" in err

    def test_missing_manifest_is_incomplete_run(self, tmp_path):
        bare = tmp_path / "bare"
        bare.mkdir()
        assert main(["report", str(bare), "--out", str(tmp_path / "m")]) == 3


class TestHarness:
    def test_invalid_log_level_rejected(self, tmp_path, monkeypatch):
        monkeypatch.setenv("AIFLOW_LOG", "loud")
        cfg = decompose_config(tmp_path)
        assert main(["decompose", "--config", cfg, "--out", str(tmp_path / "r")]) == 2

    def test_manifest_lists_every_output(self, tmp_path):
        cfg = tofc_config(tmp_path)
        out = tmp_path / "run"
        assert main(["tofc", "--config", cfg, "--out", str(out),
                     "--format", "json"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        files = {p.name for p in out.iterdir()} - {"manifest.json"}
        assert set(manifest["outputs"]) == files

    def test_malformed_json_config(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert main(["decompose", "--config", str(path),
                     "--out", str(tmp_path / "r")]) == 2
