"""Scenario-driven command line front end.

Subcommands: decompose (low-rank layer studies), specdec (draft-verify
decoding sweeps), tofc (feature-compression sweeps), simulate (one scenario
on a described topology), report (merge finished run directories).

Shared flags: --config PATH, --seed N (overrides the config's seed),
--out DIR, --format csv|json. CSV output is RFC 4180 with LF line endings
and 17 significant digits for reals, so identical config and seed reproduce
byte-identical files. The AIFLOW_LOG environment variable (error, info,
debug) sets log verbosity.

Every run directory gets a manifest.json written after all other files, the
completion marker: config path, resolved seed, tool version, output names,
and start/finish timestamps. Timestamps live only in the manifest so data
files stay reproducible.

Exit codes: 0 success; 2 configuration or scenario errors (including schema
mismatches in report); 3 I/O errors, including missing or corrupt input
files and incomplete run directories; 4 violated internal invariants.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    BudgetTooSmallError,
    ConfigError,
    IncompleteRunError,
    InvalidInputError,
    InvalidRankError,
    InvalidScenarioError,
    InvariantViolationError,
    IoError,
    MalformedBitstreamError,
    NotPositiveDefiniteError,
    ProtocolViolationError,
    SchemaError,
    SingularTriangularError,
)
from .familial import (
    allocate_ranks,
    decompose_layer,
    parameter_ratio,
    truncation_loss,
    whiten,
)
from .netsim import (
    default_topology,
    run_scenario,
    run_specdec_scenario,
    run_tofc_scenario,
    serialize_trace,
    topology_from_dict,
)
from .numerics import Rng, svd_reduced
from .specdec import ProtocolConfig, run_pipelined, run_sequential
from .tofc import (
    TofcConfig,
    fit_laplacian,
    load_features,
    load_features_csv,
)
from .toylm import LmDecoder, ToyLmConfig, build, sample

_LOG = logging.getLogger("aiflow")

_CONFIG_ERRORS = (
    ConfigError, InvalidScenarioError, SchemaError, InvalidInputError,
    BudgetTooSmallError, InvalidRankError,
)
_IO_ERRORS = (IoError, IncompleteRunError, MalformedBitstreamError, OSError)
_INVARIANT_ERRORS = (
    InvariantViolationError, ProtocolViolationError, NotPositiveDefiniteError,
    SingularTriangularError,
)


def format_value(value) -> str:
    """One CSV cell: reals carry 17 significant digits, exact for doubles."""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


class RunDir:
    """Output directory of one run; tracks files and writes the manifest."""

    def __init__(self, out_dir, config_path, seed):
        self.path = Path(out_dir)
        self.path.mkdir(parents=True, exist_ok=True)
        self.config_path = str(config_path) if config_path else None
        self.seed = seed
        self.outputs = []
        self.started = _utc_now()

    def file(self, name: str) -> Path:
        self.outputs.append(name)
        return self.path / name

    def table(self, name, header, rows, fmt):
        write_csv(self.file(f"{name}.csv"), header, rows)
        if fmt == "json":
            payload = [dict(zip(header, row)) for row in rows]
            _write_json(self.file(f"{name}.json"), payload)

    def finish(self):
        manifest = {
            "config": self.config_path,
            "seed": self.seed,
            "version": __version__,
            "out_dir": str(self.path),
            "outputs": sorted(self.outputs),
            "started_utc": self.started,
            "finished_utc": _utc_now(),
        }
        _write_json(self.path / "manifest.json", manifest)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def require_field(cfg: dict, field: str, where: str = "config"):
    if field not in cfg:
        raise ConfigError(f"{where} is missing field '{field}'")
    return cfg[field]


def _resolve_seed(cfg: dict, override) -> int:
    if override is not None:
        return int(override)
    return int(cfg.get("seed", 0))


def _topology_from_config(cfg: dict):
    if "topology" in cfg:
        return topology_from_dict(cfg["topology"])
    return default_topology()


def _relative_gap(predicted: float, measured: float) -> float:
    scale = max(abs(predicted), abs(measured), 1e-30)
    return abs(predicted - measured) / scale


def cmd_decompose(cfg: dict, seed: int, run: RunDir, fmt: str) -> None:
    """Low-rank sweep or budgeted allocation over seeded dense layers.

    Writes decompose.csv with layer, h, predicted_loss, measured_loss,
    param_ratio. The two loss columns are recomputed independently and must
    agree to 1e-8 relative; disagreement aborts the run as an invariant
    violation.
    """
    layers = require_field(cfg, "layers")
    if not isinstance(layers, list) or not layers:
        raise ConfigError("'layers' must be a non-empty list of {m, n} objects")
    num_calib = int(cfg.get("num_calib", 64))
    prepared = []
    for i, spec in enumerate(layers):
        m = int(require_field(spec, "m", f"layers[{i}]"))
        n = int(require_field(spec, "n", f"layers[{i}]"))
        if m < 1 or n < 1:
            raise ConfigError(f"layers[{i}] dimensions must be positive")
        if num_calib < n:
            raise ConfigError(
                f"layers[{i}]: 'num_calib' ({num_calib}) must be >= n ({n}) "
                "for an exactly factorizable covariance"
            )
        rng = Rng(seed).spawn(i)
        w = rng.normal_matrix(m, n)
        x = rng.normal_matrix(n, num_calib)
        ctx = whiten(x, ridge=0.0)
        sigma = svd_reduced(w @ ctx.s).sigma
        prepared.append((m, n, w, x, ctx, sigma))

    if "budget" in cfg and "h_values" in cfg:
        raise ConfigError("use either 'h_values' or 'budget', not both")
    if "budget" in cfg:
        budget = int(cfg["budget"])
        allocation = allocate_ranks(
            [p[5] for p in prepared], [(p[0], p[1]) for p in prepared], budget
        )
        sweep = [(i, allocation.per_layer_rank[i]) for i in range(len(prepared))]
    elif "h_values" in cfg:
        h_values = [int(h) for h in cfg["h_values"]]
        if not h_values:
            raise ConfigError("'h_values' must be non-empty")
        sweep = [
            (i, h)
            for i in range(len(prepared))
            for h in h_values
            if h <= min(prepared[i][0], prepared[i][1])
        ]
    else:
        raise ConfigError("config is missing field 'h_values' (or 'budget')")

    rows = []
    for i, h in sweep:
        m, n, w, x, ctx, sigma = prepared[i]
        layer = decompose_layer(w, ctx, h)
        predicted = truncation_loss(sigma, h)
        diff = w @ x - layer.apply(x)
        measured = float(np.sum(diff * diff))
        if _relative_gap(predicted, measured) > 1e-8 and predicted > 1e-16:
            raise InvariantViolationError(
                f"layer {i} h {h}: predicted loss {predicted!r} vs measured "
                f"{measured!r} beyond 1e-8 relative"
            )
        rows.append((i, h, predicted, measured, parameter_ratio(m, n, h)))
    run.table(
        "decompose",
        ["layer", "h", "predicted_loss", "measured_loss", "param_ratio"],
        rows,
        fmt,
    )


def _decoder_for(spec: dict, shared: dict, where: str) -> LmDecoder:
    try:
        lm_cfg = ToyLmConfig(
            vocab_size=shared["vocab_size"],
            embed_dim=shared["embed_dim"],
            num_layers=int(spec["layers"]),
            context_window=shared["context_window"],
            seed=int(spec["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where} needs integer 'layers' and 'seed': {exc}") from exc
    return LmDecoder(build(lm_cfg))


def _reference_histogram(model, prompt, num_tokens, seed, vocab):
    """Unigram histogram of a verifier-only decode on the drafter's stream."""
    rng = Rng(seed).spawn(0)
    context = list(prompt)
    counts = np.zeros(vocab, dtype=np.int64)
    for _ in range(num_tokens):
        token = sample(model.next_dist(context), rng)
        counts[token] += 1
        context.append(token)
    return counts


def _tv_distance(counts_a, counts_b) -> float:
    pa = counts_a / max(counts_a.sum(), 1)
    pb = counts_b / max(counts_b.sum(), 1)
    return 0.5 * float(np.abs(pa - pb).sum())


def cmd_specdec(cfg: dict, seed: int, run: RunDir, fmt: str) -> None:
    """Sweep draft-verify configurations; writes specdec.csv and summary.json.

    tv_distance_to_target compares the emitted token histogram against a
    verifier-only decode of the same length running on the drafter's random
    stream, so identical tiers reproduce the reference stream exactly and
    score 0.
    """
    shared = {
        "vocab_size": int(cfg.get("vocab_size", 24)),
        "embed_dim": int(cfg.get("embed_dim", 12)),
        "context_window": int(cfg.get("context_window", 6)),
    }
    prompt = [int(t) for t in cfg.get("prompt", [0])]
    num_tokens = int(require_field(cfg, "num_tokens"))
    entries = require_field(cfg, "configs")
    if not isinstance(entries, list) or not entries:
        raise ConfigError("'configs' must be a non-empty list")
    topology = _topology_from_config(cfg)
    rows = []
    summary = []
    for idx, entry in enumerate(entries):
        where = f"configs[{idx}]"
        tiers = tuple(str(t) for t in require_field(entry, "tiers", where))
        gamma = int(require_field(entry, "gamma", where))
        mode = str(entry.get("mode", "sequential"))
        model_specs = require_field(entry, "models", where)
        models = {}
        for tier in tiers:
            if tier not in model_specs:
                raise ConfigError(f"{where} is missing field 'models.{tier}'")
            models[tier] = _decoder_for(model_specs[tier], shared, f"{where}.models.{tier}")
        costs = {t: topology.cost(t, "token") for t in tiers}
        proto = ProtocolConfig(
            draft_len=gamma, tiers=tiers, per_token_compute_cost=costs, mode=mode
        )
        _, metrics = run_specdec_scenario(topology, proto, models, prompt, num_tokens, seed)
        if mode == "pipelined":
            transcript, _ = run_pipelined(proto, models, prompt, num_tokens, Rng(seed))
        else:
            transcript = run_sequential(proto, models, prompt, num_tokens, Rng(seed))
        emitted = np.bincount(
            np.asarray(transcript.emitted_tokens, dtype=np.int64),
            minlength=shared["vocab_size"],
        )
        reference = _reference_histogram(
            models[tiers[-1]], prompt, num_tokens, seed, shared["vocab_size"]
        )
        tv = _tv_distance(emitted, reference)
        tput = metrics.tokens_emitted / metrics.simulated_wall_s if metrics.simulated_wall_s else 0.0
        rows.append(
            (mode, "+".join(tiers), gamma, metrics.acceptance_rate, tput, tv)
        )
        summary.append(
            {
                "mode": mode,
                "tiers": list(tiers),
                "gamma": gamma,
                "metrics": metrics.as_dict(),
                "tv_distance_to_target": tv,
            }
        )
    run.table(
        "specdec",
        ["mode", "tiers", "gamma", "acceptance_rate", "sim_tokens_per_s",
         "tv_distance_to_target"],
        rows,
        fmt,
    )
    _write_json(run.file("summary.json"), summary)


def _load_feature_file(path: str):
    p = Path(path)
    if not p.exists():
        raise IoError(f"feature file not found: {path}")
    try:
        if p.suffix == ".csv":
            return load_features_csv(p)
        return load_features(p)
    except InvalidInputError as exc:
        raise IoError(f"feature file {path} is unreadable: {exc}") from exc


def cmd_tofc(cfg: dict, seed: int, run: RunDir, fmt: str) -> None:
    """Compression sweep over cluster counts; writes tofc.csv."""
    features = _load_feature_file(str(require_field(cfg, "features")))
    sweep = [int(m) for m in require_field(cfg, "num_centers_sweep")]
    if not sweep:
        raise ConfigError("'num_centers_sweep' must be non-empty")
    k_neighbors = int(cfg.get("k_neighbors", 4))
    num_models = int(cfg.get("num_models", 2))
    if num_models < 1:
        raise ConfigError("'num_models' must be >= 1")
    topology = _topology_from_config(cfg)
    device = str(cfg.get("device", "device"))
    server = str(cfg.get("server", "edge"))
    rows_idx = np.arange(features.count)
    models = tuple(
        fit_laplacian(features.features[rows_idx % num_models == e], e)
        for e in range(num_models)
    )
    rows = []
    for m_centers in sweep:
        tofc_cfg = TofcConfig(num_centers=m_centers, k_neighbors=k_neighbors, models=models)
        _, metrics, stats = run_tofc_scenario(
            topology, tofc_cfg, features, device=device, server=server, seed=seed
        )
        rows.append(
            (
                stats["M"], stats["est_bits"], stats["bytes"], stats["balance"],
                metrics.device_compute_s, metrics.transmit_s,
                metrics.server_compute_s, metrics.simulated_wall_s,
            )
        )
    run.table(
        "tofc",
        ["M", "est_bits", "payload_bytes", "balance", "device_s", "transmit_s",
         "server_s", "wall_s"],
        rows,
        fmt,
    )


def cmd_simulate(cfg: dict, seed: int, run: RunDir, fmt: str) -> None:
    """One scenario on a described topology; writes trace.jsonl and metrics."""
    topology = _topology_from_config(cfg)
    scenario = cfg.get("scenario", {})
    if not isinstance(scenario, dict):
        raise ConfigError("'scenario' must be a JSON object")
    trace, metrics = run_scenario(topology, scenario, seed)
    with open(run.file("trace.jsonl"), "wb") as fh:
        fh.write(serialize_trace(trace))
    metric_dict = metrics.as_dict()
    header = list(metric_dict)
    run.table("metrics", header, [tuple(metric_dict[k] for k in header)], fmt)


def _read_manifest(run_dir: Path) -> dict:
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise IncompleteRunError(f"{run_dir} has no manifest.json; run incomplete")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IncompleteRunError(f"unreadable manifest in {run_dir}: {exc}") from exc


def _read_csv_rows(path: Path):
    with open(path, "r", newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path} is empty")
    return rows[0], rows[1:]


def _xy_series(header, rows):
    """Long-form plot data: y-column vs the first fully numeric column."""
    numeric = []
    for idx in range(len(header)):
        try:
            values = [float(r[idx]) for r in rows]
        except (ValueError, IndexError):
            continue
        numeric.append((idx, values))
    if len(numeric) < 2:
        return []
    x_idx, x_values = numeric[0]
    out = []
    for idx, values in numeric[1:]:
        name = f"{header[idx]} vs {header[x_idx]}"
        out.extend((name, x, y) for x, y in zip(x_values, values))
    return out


def cmd_report(run_dirs, run: RunDir, fmt: str) -> None:
    """Merge finished run directories into consolidated tables.

    A single run's tables pass through unchanged. Multiple runs with equal
    headers are row-concatenated under a leading run_id column; differing
    headers are a schema error naming both column sets.
    """
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    tables = {}
    order = []
    run_ids = []
    for run_dir in run_dirs:
        rd = Path(run_dir)
        manifest = _read_manifest(rd)
        run_id = rd.name
        run_ids.append(run_id)
        for name in manifest.get("outputs", []):
            if not name.endswith(".csv"):
                continue
            header, rows = _read_csv_rows(rd / name)
            tables.setdefault(name, [])
            if name not in order:
                order.append(name)
            tables[name].append((run_id, header, rows))
    consolidated = []
    for name in order:
        versions = tables[name]
        base_header = versions[0][1]
        for run_id, header, _ in versions[1:]:
            if header != base_header:
                raise SchemaError(
                    f"{name}: columns {header} from run {run_id} do not match "
                    f"{base_header}"
                )
        stem = name[: -len(".csv")]
        if len(versions) == 1:
            merged_header = base_header
            merged_rows = versions[0][2]
        else:
            merged_header = ["run_id"] + base_header
            merged_rows = [
                [run_id] + row for run_id, _, rows in versions for row in rows
            ]
        write_csv(run.file(name), merged_header, merged_rows)
        series = _xy_series(base_header, [r for _, _, rows in versions for r in rows])
        if series:
            run.table(f"{stem}_xy", ["series", "x", "y"], series, fmt)
        consolidated.append({"table": name, "rows": sum(len(v[2]) for v in versions)})
    _write_json(
        run.file("report.json"),
        {"runs": run_ids, "tables": consolidated},
    )


def _configure_logging() -> None:
    level_name = os.environ.get("AIFLOW_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise ConfigError(f"AIFLOW_LOG must be error, info, or debug, not {level_name!r}")
    logging.basicConfig(level=levels[level_name], stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aiflow",
        description="Deterministic decomposition, decoding, and compression studies.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_config in (
        ("decompose", True), ("specdec", True), ("tofc", True), ("simulate", True),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=needs_config)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--format", choices=("csv", "json"), default="csv")
    p = sub.add_parser("report")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


_COMMANDS = {
    "decompose": cmd_decompose,
    "specdec": cmd_specdec,
    "tofc": cmd_tofc,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        if args.command == "report":
            run = RunDir(args.out, None, 0)
            cmd_report(args.runs, run, args.format)
            run.finish()
            return 0
        cfg = load_config(args.config)
        seed = _resolve_seed(cfg, args.seed)
        run = RunDir(args.out, args.config, seed)
        _COMMANDS[args.command](cfg, seed, run, args.format)
        run.finish()
        return 0
    except _CONFIG_ERRORS as exc:
        _LOG.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _IO_ERRORS as exc:
        _LOG.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _INVARIANT_ERRORS as exc:
        _LOG.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
