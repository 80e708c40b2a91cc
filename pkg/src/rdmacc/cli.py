"""Command-line entry point: ``rdmacc --protocol occ --mode onesided ...``"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .harness import (ExperimentConfig, emit_breakdown, human_table, manifest, run_experiment,
                      summary_csv)
from .netsim import ConfigError
from .txncore import STAGES, enumerate_hybrids
from .verify import format_history


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdmacc", description=__doc__)
    p.add_argument("--protocol", choices=sorted(STAGES), default="nowait")
    p.add_argument("--mode", choices=("rpc", "onesided", "hybrid"), default="onesided")
    p.add_argument("--hybrid", metavar="BITS", help="per-stage primitive bits, 1 = one-sided")
    p.add_argument("--workload", choices=("smallbank", "ycsb", "tpcc"), default="ycsb")
    p.add_argument("--nodes", type=int, default=4)
    p.add_argument("--threads", type=int, default=2)
    p.add_argument("--coroutines", type=int, default=4)
    p.add_argument("--txns", type=int, default=1000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--hot-prob", type=float)
    p.add_argument("--hot-keys", type=int)
    p.add_argument("--exec-us", type=int)
    p.add_argument("--slots", type=int, default=4)
    p.add_argument("--replicas", type=int, default=3)
    p.add_argument("--batch", type=int, default=100, help="CALVIN transactions per sequencer per epoch")
    p.add_argument("--records-per-thread", type=int)
    p.add_argument("--jitter", type=int, default=0)
    p.add_argument("--enumerate-hybrids", action="store_true")
    p.add_argument("--dump-history", metavar="PATH")
    p.add_argument("--out", default="rdmacc-out", help="directory for CSV and manifest files")
    return p


def config_from_args(a) -> ExperimentConfig:
    return ExperimentConfig(
        protocol=a.protocol, mode="hybrid" if a.hybrid and a.mode == "onesided" else a.mode,
        hybrid=a.hybrid, workload=a.workload, nodes=a.nodes, threads=a.threads,
        coroutines=a.coroutines, txns=a.txns, seed=a.seed, hot_prob=a.hot_prob,
        hot_keys=a.hot_keys, exec_us=a.exec_us, slots=a.slots, replicas=a.replicas,
        batch=a.batch, records_per_thread=a.records_per_thread, jitter=a.jitter)


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    base = config_from_args(a)
    if a.enumerate_hybrids:
        configs = [replace(base, mode="hybrid", hybrid=h.bits) for h in enumerate_hybrids(a.protocol)]
    else:
        configs = [base]
    try:
        for c in configs:
            c.hybrid_code()
        runs = [run_experiment(c) for c in configs]
    except ConfigError as e:
        parser.error(str(e))
    sys.stdout.write(human_table(runs))
    os.makedirs(a.out, exist_ok=True)
    with open(os.path.join(a.out, "summary.csv"), "w") as f:
        f.write(summary_csv(runs))
    with open(os.path.join(a.out, "breakdown.csv"), "w") as f:
        f.write(emit_breakdown(runs))
    with open(os.path.join(a.out, "manifest.json"), "w") as f:
        json.dump(manifest(configs), f, indent=2, sort_keys=True)
        f.write("\n")
    if a.dump_history:
        with open(a.dump_history, "w") as f:
            for r in runs:
                f.write(format_history(r.stats.commits))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
