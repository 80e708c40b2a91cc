"""Experiment runner: build a cluster, load a workload, run one protocol,
collect metrics and write reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

from .netsim import Cluster, ConfigError, LatencyModel
from .protocols import PROTOCOLS
from .protocols.base import ProtoOptions
from .protocols.calvin import Calvin
from .store import Database
from .txncore import STAGES, HybridCode, LogRings, RetryPolicy, RunStats, coordinator
from .verify import check_conflict_serializable, replay_serial
from .workload import SmallBankConfig, TpccConfig, YcsbConfig, build_workload

SUMMARY_COLUMNS = ["protocol", "mode", "hybrid", "workload", "seed", "txns", "commits", "aborts",
                   "abort_rate", "round_trips_per_txn", "mean_latency", "p50", "p99",
                   "stage_read", "stage_lock", "stage_validate", "stage_log", "stage_commit",
                   "stage_release"]

# ledger stage -> summary column
SUMMARY_STAGE = {"Read": "stage_read", "Fetch": "stage_read", "Lock": "stage_lock",
                 "Validate": "stage_validate", "Renew": "stage_validate", "Log": "stage_log",
                 "Commit": "stage_commit", "Release": "stage_release"}
EXTRA_STAGES = ("exec", "backoff")


@dataclass
class ExperimentConfig:
    protocol: str = "nowait"
    mode: str = "onesided"
    hybrid: str | None = None
    workload: str = "ycsb"
    nodes: int = 4
    threads: int = 2
    coroutines: int = 4
    txns: int = 1000
    seed: int = 1
    hot_prob: float | None = None
    hot_keys: int | None = None
    exec_us: int | None = None
    slots: int = 4
    replicas: int = 3
    batch: int = 100
    records_per_thread: int | None = None
    prewarm: bool = True
    one_sided_rt: int = 2
    rpc_rt: int = 4
    local_op: int = 1
    per_verb_overhead: int = 0
    jitter: int = 0

    def hybrid_code(self) -> HybridCode:
        if self.protocol not in STAGES:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.hybrid is not None:
            return HybridCode(self.protocol, self.hybrid)
        if self.mode == "hybrid":
            raise ConfigError("--mode hybrid needs --hybrid <bits>")
        if self.mode not in ("rpc", "onesided"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        return HybridCode.uniform(self.protocol, self.mode == "onesided")

    def mode_label(self) -> str:
        if self.hybrid is None:
            return self.mode
        if set(self.hybrid) == {"1"}:
            return "onesided"
        if set(self.hybrid) == {"0"}:
            return "rpc"
        return "hybrid"

    def latency(self) -> LatencyModel:
        return LatencyModel(self.one_sided_rt, self.rpc_rt, self.local_op,
                            self.per_verb_overhead, self.jitter)

    def workload_config(self):
        if self.workload == "ycsb":
            cfg = YcsbConfig()
            if self.hot_prob is not None:
                cfg = replace(cfg, hot_access_prob=self.hot_prob)
            if self.hot_keys is not None:
                cfg = replace(cfg, hot_keys=self.hot_keys)
            if self.exec_us is not None:
                cfg = replace(cfg, exec_time=self.exec_us)
            if self.records_per_thread is not None:
                cfg = replace(cfg, records_per_thread=self.records_per_thread)
            return cfg
        if self.workload == "smallbank":
            cfg = SmallBankConfig()
            if self.hot_prob is not None:
                cfg = replace(cfg, hot_access_prob=self.hot_prob,
                              hot_accounts=self.hot_keys or cfg.hot_accounts or 64)
            if self.exec_us is not None:
                cfg = replace(cfg, exec_time=self.exec_us)
            if self.records_per_thread is not None:
                cfg = replace(cfg, accounts_per_thread=self.records_per_thread)
            return cfg
        if self.workload == "tpcc":
            cfg = TpccConfig()
            if self.exec_us is not None:
                cfg = replace(cfg, exec_time=self.exec_us)
            return cfg
        raise ConfigError(f"unknown workload {self.workload!r}")


@dataclass
class Run:
    config: ExperimentConfig
    hybrid: HybridCode
    cluster: Cluster
    db: Database
    proto: object
    stats: RunStats
    specs: list
    log: LogRings | None = None
    metrics: dict = field(default_factory=dict)


def run_experiment(config: ExperimentConfig) -> Run:
    hybrid = config.hybrid_code()
    shape = (config.nodes, config.threads, config.coroutines)
    cluster = Cluster(*shape, latency=config.latency(), seed=config.seed)
    wl = build_workload(config.workload, shape, config.txns, config.seed, config.workload_config())
    db = Database(cluster, wl.tables, slots=config.slots, prewarm=config.prewarm)
    stats = RunStats()
    opts = ProtoOptions(exec_time=wl.exec_time)
    log = None
    if config.protocol == "calvin":
        max_keys = max([len(s.rs) + len(s.ws) for s in wl.specs] + [1])
        max_args = max([len(s.args) for s in wl.specs] + [1])
        proto = Calvin(db, hybrid, stats, opts, batch=config.batch,
                       max_keys=max_keys, max_args=max_args)
        proto.spawn(wl.specs)
    else:
        log = LogRings(cluster, config.replicas)
        proto = PROTOCOLS[config.protocol](db, hybrid, log, stats, opts)
        per_worker: dict = {}
        for s in wl.specs:
            per_worker.setdefault(s.arrival, []).append(s)
        retry = RetryPolicy()
        for ident in sorted(per_worker):
            w = cluster.workers[ident]
            cluster.spawn(*ident, coordinator(w, proto, per_worker[ident], stats, retry),
                          name=f"coord{ident}")
    cluster.run_until_quiescent()
    run = Run(config, hybrid, cluster, db, proto, stats, wl.specs, log)
    run.metrics = compute_metrics(run)
    return run


def _pct(sorted_vals, p):
    if not sorted_vals:
        return 0
    return sorted_vals[max(0, math.ceil(p * len(sorted_vals)) - 1)]


def stage_names(run: Run) -> list[str]:
    return list(STAGES[run.config.protocol]) + list(EXTRA_STAGES)


def _throughput(st, end: int) -> float:
    """Commits per unit of sim time while every client still had work.

    The drain after the first client runs dry is left out: with a fixed
    transaction count the last straggler would otherwise set the rate."""
    window = min(st.finish_times) if st.finish_times else end
    if window <= 0:
        return 0.0
    return sum(1 for t in st.commit_times if t <= window) / window


def compute_metrics(run: Run) -> dict:
    st = run.stats
    commits = len(st.commits)
    lat = sorted(st.latencies)
    stage_means = {}
    for s in stage_names(run):
        stage_means[s] = sum(l.get(s, 0) for l in st.ledgers) / commits if commits else 0.0
    attempts = commits + st.aborts
    return {
        "commits": commits,
        "aborts": st.aborts,
        "abort_rate": st.aborts / attempts if attempts else 0.0,
        "round_trips": run.cluster.round_trips,
        "round_trips_per_txn": run.cluster.round_trips / commits if commits else 0.0,
        "mean_latency": sum(lat) / commits if commits else 0.0,
        "p50": _pct(lat, 0.5),
        "p99": _pct(lat, 0.99),
        "sim_time": run.cluster.now,
        "throughput": _throughput(st, run.cluster.now),
        "stage_means": stage_means,
        "abort_reasons": dict(sorted(st.abort_reasons.items())),
        "abort_stages": dict(sorted(st.abort_stages.items())),
    }


def _f(x) -> str:
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def summary_row(run: Run) -> dict:
    c, m = run.config, run.metrics
    row = {"protocol": c.protocol, "mode": c.mode_label(), "hybrid": run.hybrid.bits,
           "workload": c.workload, "seed": c.seed, "txns": c.txns, "commits": m["commits"],
           "aborts": m["aborts"], "abort_rate": m["abort_rate"],
           "round_trips_per_txn": m["round_trips_per_txn"], "mean_latency": m["mean_latency"],
           "p50": m["p50"], "p99": m["p99"]}
    cols = {v: 0.0 for v in SUMMARY_STAGE.values()}
    for stage, mean in m["stage_means"].items():
        if stage in SUMMARY_STAGE:
            cols[SUMMARY_STAGE[stage]] += mean
    row.update(cols)
    return {k: _f(row[k]) for k in SUMMARY_COLUMNS}


def summary_csv(runs: list[Run]) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    wr.writeheader()
    for r in runs:
        wr.writerow(summary_row(r))
    return buf.getvalue()


def emit_breakdown(runs: list[Run]) -> str:
    """Per-stage mean latency, one row per run; stage columns follow the
    protocol's stage order, then exec and backoff, then the total."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    header = None
    for r in runs:
        stages = stage_names(r)
        h = ["protocol", "hybrid", "commits"] + stages + ["total"]
        if h != header:
            wr.writerow(h)
            header = h
        m = r.metrics
        wr.writerow([r.config.protocol, r.hybrid.bits, m["commits"]]
                    + [_f(float(m["stage_means"][s])) for s in stages]
                    + [_f(float(m["mean_latency"]))])
    return buf.getvalue()


def human_table(runs: list[Run]) -> str:
    head = ("protocol", "hybrid", "workload", "commits", "aborts", "abort%", "rt/txn",
            "mean lat", "p99", "thruput")
    rows = [head]
    for r in runs:
        m = r.metrics
        rows.append((r.config.protocol, r.hybrid.bits, r.config.workload, str(m["commits"]),
                     str(m["aborts"]), f"{100 * m['abort_rate']:.2f}",
                     f"{m['round_trips_per_txn']:.2f}", f"{m['mean_latency']:.1f}",
                     str(m["p99"]), f"{m['throughput']:.4f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows) + "\n"


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def manifest(configs: list[ExperimentConfig]) -> dict:
    cfgs = [asdict(c) for c in configs]
    blob = json.dumps(cfgs, sort_keys=True).encode()
    return {"configs": cfgs, "seed": configs[0].seed if configs else None,
            "input_hash": git_blob_hash(blob)}


def verify_run(run: Run):
    """(oracle verdict, replay-in-oracle-order matches the final store image)."""
    verdict = check_conflict_serializable(run.stats.commits)
    if not verdict:
        return verdict, False
    specs = {s.txn_id: s for s in run.specs}
    final = replay_serial(verdict.order, specs, run.db.initial_state())
    return verdict, final == run.db.snapshot()


def replay_in_commit_order(run: Run) -> bool:
    """Replay sorted by each protocol's own commit key and compare."""
    order = [c.txn_id for c in sorted(run.stats.commits, key=lambda c: c.commit_key)]
    specs = {s.txn_id: s for s in run.specs}
    return replay_serial(order, specs, run.db.initial_state()) == run.db.snapshot()
