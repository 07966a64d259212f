"""Workload harness: replay scenarios on a virtual clock, report metrics.

A scenario describes a program mix plus an arrival process. Closed-loop runs
keep a fixed population alive (each exit launches a replacement); open runs
schedule arrivals by fixed interval or a seeded Poisson process. Everything
executes on the virtual clock, so a scenario with the same seed produces the
same event log and the same report bytes every time.

Metrics come from the kernel event log, not from instrumentation inside the
programs: throughput from exit records, time-to-first-token and inter-token
gaps from send records, batch shape from dispatch records, and utilization
as total service time over the horizon.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .clock import VirtualClock
from .config import PolicySpec, ServerConfig
from .errors import InvalidArgument
from .hashing import SplitMixStream
from .runtime import ClientSink, Kernel


@dataclass
class WorkItem:
    program: str
    args: List[str] = field(default_factory=list)
    weight: float = 1.0


@dataclass
class Scenario:
    name: str
    mix: List[WorkItem]
    policy: str = "adaptive"
    duration_s: float = 2.0
    seed: int = 0
    population: int = 0
    arrival: Optional[dict] = None
    max_requests: Optional[int] = None
    config: Optional[dict] = None

    def __post_init__(self):
        if not self.mix:
            raise InvalidArgument("scenario needs a non-empty mix")
        if self.population <= 0 and self.arrival is None:
            raise InvalidArgument("scenario needs a population or an arrival process")
        if self.duration_s <= 0:
            raise InvalidArgument("duration_s must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        data = dict(data)
        mix = [WorkItem(**item) for item in data.pop("mix", [])]
        return cls(mix=mix, **data)

    @classmethod
    def from_file(cls, path: str) -> "Scenario":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass
class MetricsReport:
    scenario: str
    policy: str
    seed: int
    horizon_s: float
    launched: int
    finished: int
    unfinished: int
    req_per_s: float
    tokens_out: int
    tokens_per_s: float
    ttft_ms_mean: float
    ttft_ms_p50: float
    ttft_ms_p95: float
    tbt_ms_mean: float
    tbt_ms_p50: float
    tbt_ms_p95: float
    batches: int
    batch_mean: float
    batch_histogram: Dict[int, int]
    utilization: float

    CSV_HEADER = ("scenario,policy,seed,horizon_s,launched,finished,req_per_s,"
                  "tokens_per_s,ttft_ms_p50,ttft_ms_p95,tbt_ms_mean,tbt_ms_p50,"
                  "tbt_ms_p95,batch_mean,utilization")

    def to_csv_row(self) -> str:
        return ",".join([
            self.scenario, self.policy, str(self.seed),
            f"{self.horizon_s:.3f}", str(self.launched), str(self.finished),
            f"{self.req_per_s:.6f}", f"{self.tokens_per_s:.6f}",
            f"{self.ttft_ms_p50:.6f}", f"{self.ttft_ms_p95:.6f}",
            f"{self.tbt_ms_mean:.6f}", f"{self.tbt_ms_p50:.6f}",
            f"{self.tbt_ms_p95:.6f}", f"{self.batch_mean:.6f}",
            f"{self.utilization:.6f}",
        ])

    def summary(self) -> str:
        hist = " ".join(f"{k}:{v}" for k, v in sorted(self.batch_histogram.items()))
        lines = [
            f"scenario {self.scenario} | policy {self.policy} | seed {self.seed}",
            f"  horizon {self.horizon_s:.3f}s  launched {self.launched}"
            f"  finished {self.finished}  unfinished {self.unfinished}",
            f"  throughput {self.req_per_s:.3f} req/s  {self.tokens_per_s:.1f} tok/s"
            f"  ({self.tokens_out} tokens)",
            f"  ttft ms mean {self.ttft_ms_mean:.3f}  p50 {self.ttft_ms_p50:.3f}"
            f"  p95 {self.ttft_ms_p95:.3f}",
            f"  tbt  ms mean {self.tbt_ms_mean:.3f}  p50 {self.tbt_ms_p50:.3f}"
            f"  p95 {self.tbt_ms_p95:.3f}",
            f"  batches {self.batches}  mean size {self.batch_mean:.3f}"
            f"  utilization {self.utilization:.3f}",
            f"  batch histogram {hist or '(none)'}",
        ]
        return "\n".join(lines)


def _percentile(sorted_vals: List[float], q: float) -> float:
    """Nearest-rank percentile; deterministic, no interpolation."""
    if not sorted_vals:
        return 0.0
    rank = max(1, math.ceil(q / 100.0 * len(sorted_vals)))
    return sorted_vals[rank - 1]


def _stats(values: List[float]) -> Tuple[float, float, float]:
    if not values:
        return 0.0, 0.0, 0.0
    vals = sorted(values)
    mean = sum(vals) / len(vals)
    return mean, _percentile(vals, 50), _percentile(vals, 95)


class _DriverSink(ClientSink):
    """Drops output; tells the driver when its instance exits."""

    def __init__(self, driver: "_Driver"):
        self.driver = driver

    def on_message(self, iid: int, seq: int, data: bytes) -> None:
        pass

    def on_status(self, iid: int, status: str, detail: str) -> None:
        self.driver.on_exit(iid)


class _Driver:
    """Owns launch decisions for one scenario run."""

    def __init__(self, kernel: Kernel, scenario: Scenario):
        self.kernel = kernel
        self.scenario = scenario
        self.stream = SplitMixStream(scenario.seed ^ 0x62656E6368)
        self.weights = [max(item.weight, 0.0) for item in scenario.mix]
        self.total_weight = sum(self.weights)
        if self.total_weight <= 0:
            raise InvalidArgument("mix weights must sum to a positive value")
        self.launched = 0
        self.instances: set = set()
        self.stopped = False

    def _pick(self) -> WorkItem:
        u = self.stream.next_float() * self.total_weight
        acc = 0.0
        for item, w in zip(self.scenario.mix, self.weights):
            acc += w
            if u < acc:
                return item
        return self.scenario.mix[-1]

    def _quota_left(self) -> bool:
        cap = self.scenario.max_requests
        return cap is None or self.launched < cap

    def launch_one(self) -> None:
        if not self._quota_left():
            return
        item = self._pick()
        inst = self.kernel.launch(item.program, list(item.args),
                                  _DriverSink(self))
        self.launched += 1
        self.instances.add(inst.id)

    def on_exit(self, iid: int) -> None:
        if self.stopped or iid not in self.instances:
            return
        closed = self.scenario.population > 0
        if closed and self.kernel.now() < self.scenario.duration_s:
            self.launch_one()

    def schedule(self) -> None:
        s = self.scenario
        if s.population > 0:
            for _ in range(s.population):
                self.launch_one()
            return
        kind = s.arrival.get("kind")
        t = 0.0
        if kind == "interval":
            period = float(s.arrival["period_s"])
            if period <= 0:
                raise InvalidArgument("period_s must be positive")
            while t < s.duration_s:
                self.kernel.at(t, self.launch_one)
                t += period
        elif kind == "poisson":
            rate = float(s.arrival["rate"])
            if rate <= 0:
                raise InvalidArgument("rate must be positive")
            while True:
                u = self.stream.next_float()
                t += -math.log(1.0 - u) / rate
                if t >= s.duration_s:
                    break
                self.kernel.at(t, self.launch_one)
        else:
            raise InvalidArgument(f"unknown arrival kind {kind!r}")


def run_scenario(scenario: Scenario,
                 kernel: Optional[Kernel] = None) -> MetricsReport:
    if kernel is None:
        overrides = dict(scenario.config or {})
        overrides["policy"] = scenario.policy
        config = ServerConfig.from_dict(overrides)
        kernel = Kernel(config, clock=VirtualClock())
    driver = _Driver(kernel, scenario)
    driver.schedule()
    kernel.run_until_idle(max_virtual_s=scenario.duration_s)
    horizon = scenario.duration_s

    # Freeze the log before teardown adds exit records for stragglers.
    records = list(kernel.events.records)
    driver.stopped = True
    kernel.shutdown()

    ours = driver.instances
    launch_t = {r["inferlet"]: r["t"] for r in records
                if r["ev"] == "launch" and r["inferlet"] in ours}
    finished = [r for r in records
                if r["ev"] == "exit" and r["status"] == "finished"
                and r["inferlet"] in ours]
    sends: Dict[int, List[float]] = {}
    for r in records:
        if r["ev"] == "send" and r["inferlet"] in ours:
            sends.setdefault(r["inferlet"], []).append(r["t"])

    ttfts = []
    tbts = []
    tokens_out = 0
    for iid, times in sorted(sends.items()):
        tokens_out += len(times)
        if iid in launch_t:
            ttfts.append((times[0] - launch_t[iid]) * 1000.0)
        for a, b in zip(times, times[1:]):
            tbts.append((b - a) * 1000.0)

    histogram: Dict[int, int] = {}
    batch_sizes = []
    for r in records:
        if r["ev"] == "dispatch":
            histogram[r["size"]] = histogram.get(r["size"], 0) + 1
            batch_sizes.append(r["size"])
    service = sum(r["service_s"] for r in records if r["ev"] == "complete")
    # each model lane serves independently, so normalize by lanes that ran
    lanes_used = len({r["model"] for r in records if r["ev"] == "complete"})
    service /= max(lanes_used, 1)

    ttft_mean, ttft_p50, ttft_p95 = _stats(ttfts)
    tbt_mean, tbt_p50, tbt_p95 = _stats(tbts)
    n_fin = len(finished)
    return MetricsReport(
        scenario=scenario.name,
        policy=scenario.policy,
        seed=scenario.seed,
        horizon_s=horizon,
        launched=driver.launched,
        finished=n_fin,
        unfinished=driver.launched - n_fin,
        req_per_s=n_fin / horizon,
        tokens_out=tokens_out,
        tokens_per_s=tokens_out / horizon,
        ttft_ms_mean=ttft_mean, ttft_ms_p50=ttft_p50, ttft_ms_p95=ttft_p95,
        tbt_ms_mean=tbt_mean, tbt_ms_p50=tbt_p50, tbt_ms_p95=tbt_p95,
        batches=len(batch_sizes),
        batch_mean=sum(batch_sizes) / len(batch_sizes) if batch_sizes else 0.0,
        batch_histogram=histogram,
        utilization=service / horizon,
    )


SWEEP_POLICIES = ["eager", "k=4", "k=16", "k=64", "t=1", "t=5", "t=20", "adaptive"]


def sweep(scenario: Scenario,
          policies: Optional[List[str]] = None) -> List[MetricsReport]:
    """Run one scenario under each policy; same seed and arrivals throughout."""
    reports = []
    for policy in policies or SWEEP_POLICIES:
        variant = Scenario(
            name=scenario.name, mix=scenario.mix, policy=policy,
            duration_s=scenario.duration_s, seed=scenario.seed,
            population=scenario.population, arrival=scenario.arrival,
            max_requests=scenario.max_requests, config=scenario.config,
        )
        reports.append(run_scenario(variant))
    return reports


def to_csv(reports: List[MetricsReport]) -> str:
    return "\n".join([MetricsReport.CSV_HEADER]
                     + [r.to_csv_row() for r in reports]) + "\n"


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="inferd-bench",
                                     description="replay a scenario file")
    parser.add_argument("scenario", help="path to a scenario JSON file")
    parser.add_argument("--sweep", action="store_true",
                        help="run the standard policy sweep")
    parser.add_argument("--csv", help="write a CSV report to this path")
    args = parser.parse_args(argv)

    scenario = Scenario.from_file(args.scenario)
    reports = sweep(scenario) if args.sweep else [run_scenario(scenario)]
    for report in reports:
        print(report.summary())
        print()
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write(to_csv(reports))
    return 0


if __name__ == "__main__":
    sys.exit(main())
