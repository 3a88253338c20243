"""Simulation loop, scenario sweeps and reports.

Each request runs iteration by iteration: the policy picks K, the workload
decides how many drafts are accepted, the cost model prices the step and the
analyzer records it. Requests in a stream run back to back with a fresh
controller each.
"""
from __future__ import annotations

import csv
import io
import json
import math
import re
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from specmoe.controller import ControllerConfig, SpeculationController
from specmoe.cost_model import (
    NO_DRAFTER,
    ConfigError,
    DraftCostModel,
    ExpertConfig,
    MoECostModel,
    draft_preset,
    model_preset,
)
from specmoe.utility import (
    PROBE,
    SET,
    IterationRecord,
    UtilityAnalyzer,
    harmonic_mean,
    mean_probe_time,
    totals_utility,
    write_telemetry,
)
from specmoe.workload import (
    AcceptanceTrace,
    ProfileState,
    RequestStream,
    StreamCursor,
    TraceCursor,
    WorkloadProfile,
    load_task,
    next_request,
    with_budget,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


# ------------------------------------------------------------------ policies

@dataclass(frozen=True)
class Policy:
    kind: str
    k: int = 0
    controller: ControllerConfig | None = None

    def __post_init__(self):
        if self.kind not in ("none", "static", "adaptive"):
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.kind == "static" and self.k < 0:
            raise ConfigError("static K must be >= 0")
        if self.kind == "adaptive" and self.controller is None:
            object.__setattr__(self, "controller", ControllerConfig())

    @classmethod
    def none(cls) -> "Policy":
        return cls("none")

    @classmethod
    def static(cls, k: int) -> "Policy":
        return cls("static", k)

    @classmethod
    def adaptive(cls, config: ControllerConfig | None = None) -> "Policy":
        return cls("adaptive", controller=config or ControllerConfig())

    @property
    def label(self) -> str:
        if self.kind == "static":
            return f"static:{self.k}"
        if self.kind == "adaptive" and not self.controller.backoff:
            return "adaptive:nobackoff"
        return self.kind

    def driver(self):
        if self.kind == "adaptive":
            return SpeculationController(self.controller)
        return _StaticDriver(self.k if self.kind == "static" else 0)


class _StaticDriver:
    tag = SET

    def __init__(self, k: int):
        self.k = k
        self.events: list = []

    def next_k(self, latest, analyzer) -> int:
        return self.k


_RANGE = re.compile(r"^static:(\d+)\.\.(\d+)$")


def parse_policies(specs: Iterable[str], controller: ControllerConfig | None = None) -> list[Policy]:
    """Parse ``none``, ``static:K``, ``static:A..B``, ``adaptive``, ``adaptive:nobackoff``."""
    out: list[Policy] = []
    ctrl = controller or ControllerConfig()
    for item in specs:
        for part in str(item).split(","):
            part = part.strip().lower()
            if not part:
                continue
            m = _RANGE.match(part)
            if m:
                lo, hi = int(m.group(1)), int(m.group(2))
                if hi < lo:
                    raise ConfigError(f"empty policy range {part!r}")
                out.extend(Policy.static(k) for k in range(lo, hi + 1))
            elif part.startswith("static:"):
                try:
                    out.append(Policy.static(int(part.split(":", 1)[1])))
                except ValueError:
                    raise ConfigError(f"bad static policy {part!r}") from None
            elif part == "none":
                out.append(Policy.none())
            elif part == "adaptive":
                out.append(Policy.adaptive(ctrl))
            elif part == "adaptive:nobackoff":
                out.append(Policy.adaptive(replace(ctrl, backoff=False)))
            else:
                raise ConfigError(f"unknown policy {part!r}")
    seen, uniq = set(), []
    for p in out:
        if p.label not in seen:
            seen.add(p.label)
            uniq.append(p)
    return uniq


# ------------------------------------------------------------------ metrics

@dataclass
class RequestMetrics:
    request_id: int
    task: str
    tokens: int
    iterations: int
    total_time: float
    t_base: float
    records: list[IterationRecord] | None = None
    events: list = field(default_factory=list)
    max_k: int = 0

    @property
    def tpot(self) -> float:
        return self.total_time / self.tokens

    @property
    def etr(self) -> float:
        return self.tokens / self.iterations

    @property
    def cost(self) -> float:
        return (self.total_time / self.iterations) / self.t_base

    @property
    def utility(self) -> float:
        return totals_utility(self.tokens, self.total_time, self.iterations, self.t_base)


@dataclass
class StreamMetrics:
    requests: list[RequestMetrics]

    @property
    def tokens(self) -> int:
        return sum(r.tokens for r in self.requests)

    @property
    def iterations(self) -> int:
        return sum(r.iterations for r in self.requests)

    @property
    def total_time(self) -> float:
        return math.fsum(r.total_time for r in self.requests)

    @property
    def normalized_time(self) -> float:
        # Each request's time in units of its own baseline.
        return math.fsum(r.total_time / r.t_base for r in self.requests)

    @property
    def t_base(self) -> float:
        return self.total_time / self.normalized_time

    @property
    def tpot(self) -> float:
        return self.total_time / self.tokens

    @property
    def etr(self) -> float:
        return self.tokens / self.iterations

    @property
    def cost(self) -> float:
        return self.normalized_time / self.iterations

    @property
    def utility(self) -> float:
        return self.tokens / self.normalized_time

    @property
    def hmean_utility(self) -> float:
        return harmonic_mean(r.utility for r in self.requests)

    @property
    def max_k(self) -> int:
        return max((r.max_k for r in self.requests), default=0)


# ------------------------------------------------------------------ core loop

def _seed_seq(seed: int, *labels: Any) -> np.random.SeedSequence:
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for lab in labels:
        words.append(lab if isinstance(lab, int) else zlib.crc32(str(lab).encode()))
    return np.random.SeedSequence(words)


def _rngs(ss: np.random.SeedSequence):
    return [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(3)]


def _shadow_baseline(cost_model, rng, n: int) -> float:
    probes = [IterationRecord(-1, 0, 1, c.draft_time, c.verify_time, c.sampling_time, c.total, PROBE)
              for c in (cost_model.sample(0, rng) for _ in range(n))]
    return mean_probe_time(probes)


def simulate_request(
    source,
    policy: Policy,
    cost_model,
    rngs: Sequence[np.random.Generator],
    output_len: int | None = None,
    iteration_budget: int | None = None,
    request_id: int = 0,
    task: str = "",
    keep_records: bool = False,
) -> RequestMetrics:
    """Run one request to completion.

    Args:
        source: Acceptance source with ``accepted(k, rng)``, ``advance(rng)``
            and an ``affinity`` attribute (``ProfileState`` or ``TraceCursor``).
        policy: Speculation policy; ``none`` runs without a drafter.
        cost_model: ``MoECostModel`` or ``FixedCostModel``.
        rngs: Three generators for acceptance, routing and phase changes.
        output_len: Stop once this many tokens were emitted.
        iteration_budget: Stop after this many iterations.
    """
    if output_len is None and iteration_budget is None:
        raise ValueError("need an output length or an iteration budget")
    rng_acc, rng_route, rng_phase = rngs
    if policy.kind == "none":
        cost_model = cost_model.without_drafter()
    driver = policy.driver()
    analyzer = UtilityAnalyzer()
    probe_len = policy.controller.baseline_probe_len if policy.controller else 4
    if policy.kind != "adaptive":
        # Static policies never run K=0 probes; measure the baseline off the books.
        t_shadow = _shadow_baseline(cost_model, rng_route, probe_len)
        analyzer.refresh_baseline([IterationRecord(-1, 0, 1, 0.0, t_shadow, 0.0, t_shadow, PROBE)])

    limit_tokens = output_len if output_len is not None else math.inf
    limit_iters = iteration_budget if iteration_budget is not None else math.inf
    records: list[IterationRecord] | None = [] if keep_records else None
    tokens = 0
    it = 0
    max_k = 0
    k = driver.next_k(None, analyzer)
    while tokens < limit_tokens and it < limit_iters:
        accepted = source.accepted(k, rng_acc)
        emitted = accepted + 1
        if tokens + emitted > limit_tokens:
            emitted = int(limit_tokens - tokens)
        c = cost_model.sample(k, rng_route, source.affinity)
        rec = IterationRecord(it, k, emitted, c.draft_time, c.verify_time, c.sampling_time, c.total,
                              driver.tag)
        analyzer.record(rec)
        if records is not None:
            records.append(rec)
        tokens += emitted
        if k > max_k:
            max_k = k
        source.advance(rng_phase)
        it += 1
        k = driver.next_k(rec, analyzer)

    if analyzer.baseline is None:
        analyzer.refresh_baseline([IterationRecord(-1, 0, 1, 0.0, 0.0, 0.0,
                                                   _shadow_baseline(cost_model, rng_route, probe_len),
                                                   PROBE)])
    return RequestMetrics(
        request_id=request_id,
        task=task,
        tokens=analyzer.total_tokens,
        iterations=analyzer.iterations,
        total_time=analyzer.total_time,
        t_base=analyzer.t_base,
        records=records,
        events=list(driver.events),
        max_k=max_k,
    )


def run_request(
    profile: WorkloadProfile,
    policy: Policy,
    cost_cfg: ExpertConfig,
    draft_cfg: DraftCostModel = NO_DRAFTER,
    seed: int = 0,
    output_len: int | None = None,
    keep_records: bool = False,
) -> RequestMetrics:
    """Simulate a single request of ``profile`` under ``policy``."""
    rngs = _rngs(_seed_seq(seed, profile.name, "request"))
    if output_len is None:
        output_len = profile.output_len.sample(rngs[2])
    state = ProfileState(profile, rngs[2])
    return simulate_request(state, policy, MoECostModel(cost_cfg, draft_cfg), rngs,
                            output_len=output_len, task=profile.name, keep_records=keep_records)


def run_stream(
    stream: RequestStream,
    policy: Policy,
    cost_model,
    seed: int,
    model_name: str = "",
    keep_records: bool = False,
) -> StreamMetrics:
    """Serve every request of ``stream``; identical seeds give identical requests
    regardless of the policy."""
    stream_rng = np.random.Generator(np.random.PCG64(_seed_seq(seed, stream.name, model_name, "stream")))
    cursor = StreamCursor(stream)
    out = []
    idx = 0
    while not cursor.exhausted():
        profile, length = next_request(cursor, stream_rng)
        rngs = _rngs(_seed_seq(seed, stream.name, model_name, idx))
        state = ProfileState(profile, rngs[2])
        out.append(simulate_request(state, policy, cost_model, rngs, output_len=length,
                                    request_id=idx, task=profile.name, keep_records=keep_records))
        idx += 1
    return StreamMetrics(out)


def run_trace(
    trace: AcceptanceTrace,
    policy: Policy,
    cost_model,
    seed: int,
    affinity: float | None = None,
    keep_records: bool = False,
) -> StreamMetrics:
    """Replay every request of ``trace`` for its recorded number of iterations."""
    out = []
    for rid in trace.request_ids:
        rngs = _rngs(_seed_seq(seed, "trace", rid))
        cursor = TraceCursor(trace, rid, affinity)
        out.append(simulate_request(cursor, policy, cost_model, rngs,
                                    iteration_budget=trace.iterations(rid),
                                    request_id=rid, task="trace", keep_records=keep_records))
    return StreamMetrics(out)


# ------------------------------------------------------------------ scenarios

CELL_FIELDS = (
    "model", "task", "policy", "seed", "requests", "tokens", "iterations", "total_time",
    "tpot", "etr", "cost", "utility", "hmean_utility", "t_base", "speedup", "max_k",
)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    models: tuple[ExpertConfig, ...]
    tasks: tuple[str, ...]
    policies: tuple[Policy, ...]
    seeds: tuple[int, ...] = (0,)
    draft: DraftCostModel = field(default_factory=lambda: draft_preset("ngram"))
    tokens: int | None = None
    requests: int | None = None
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    task_files: tuple[tuple[str, str], ...] = ()
    seed_source: str = "config"

    def stream(self, task: str, model: str) -> RequestStream:
        paths = dict(self.task_files)
        stream = load_task(task, model=model, path=paths.get(task))
        return with_budget(stream, self.tokens, self.requests)


_CONTROLLER_KEYS = {f for f in ControllerConfig.__dataclass_fields__}
_MODEL_KEYS = {f for f in ExpertConfig.__dataclass_fields__}


def _model_from_entry(name: str, entry: dict) -> ExpertConfig:
    entry = dict(entry)
    base = entry.pop("base", None)
    unknown = set(entry) - _MODEL_KEYS
    if unknown:
        raise ConfigError(f"model {name!r}: unknown fields {sorted(unknown)}")
    entry.setdefault("name", name)
    if base is not None:
        return replace(model_preset(base), **entry)
    try:
        return ExpertConfig(**entry)
    except TypeError as exc:
        raise ConfigError(f"model {name!r}: {exc}") from None


def scenario_from_dict(data: dict, base_dir: Path | None = None) -> ScenarioConfig:
    known = {"name", "models", "model", "tasks", "policies", "seed", "seeds", "draft", "tokens",
             "requests", "controller", "task_files"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown scenario fields {sorted(unknown)}")
    ctrl_src = data.get("controller", {})
    bad = set(ctrl_src) - _CONTROLLER_KEYS
    if bad:
        raise ConfigError(f"unknown controller fields {sorted(bad)}")
    controller = ControllerConfig(**ctrl_src)

    inline = data.get("model", {})
    models = []
    for m in data.get("models", []):
        models.append(_model_from_entry(m, inline[m]) if m in inline else model_preset(m))
    for m, entry in inline.items():
        if m not in data.get("models", []):
            models.append(_model_from_entry(m, entry))
    if not models:
        raise ConfigError("scenario lists no models")
    tasks = tuple(data.get("tasks", ()))
    if not tasks:
        raise ConfigError("scenario lists no tasks")
    policies = tuple(parse_policies(data.get("policies", ["none"]), controller))
    if "seeds" in data:
        seeds = tuple(int(s) for s in data["seeds"])
        source = "config"
    elif "seed" in data:
        seeds = (int(data["seed"]),)
        source = "config"
    else:
        seeds = (int(np.random.SeedSequence().entropy % (2 ** 63)),)
        source = "entropy"
    draft = data.get("draft", "ngram")
    draft_model = draft_preset(draft) if isinstance(draft, str) else DraftCostModel(**draft)
    task_files = []
    for t, p in data.get("task_files", {}).items():
        path = Path(p)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        task_files.append((t, str(path)))
    return ScenarioConfig(
        name=data.get("name", "scenario"),
        models=tuple(models),
        tasks=tasks,
        policies=policies,
        seeds=seeds,
        draft=draft_model,
        tokens=data.get("tokens"),
        requests=data.get("requests"),
        controller=controller,
        task_files=tuple(task_files),
        seed_source=source,
    )


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    data.setdefault("name", path.stem)
    return scenario_from_dict(data, base_dir=path.parent)


@dataclass(frozen=True)
class _CellJob:
    model: ExpertConfig
    task: str
    policy: Policy
    seed: int
    stream: RequestStream
    draft: DraftCostModel
    telemetry_dir: str | None = None


def _cell_row(model: str, task: str, policy: str, seed: int, m: StreamMetrics) -> dict:
    return {
        "model": model, "task": task, "policy": policy, "seed": seed,
        "requests": len(m.requests), "tokens": m.tokens, "iterations": m.iterations,
        "total_time": m.total_time, "tpot": m.tpot, "etr": m.etr, "cost": m.cost,
        "utility": m.utility, "hmean_utility": m.hmean_utility, "t_base": m.t_base,
        "max_k": m.max_k,
    }


def _telemetry_name(model: str, task: str, policy: str, seed: int) -> str:
    return f"{model}__{task}__{policy.replace(':', '-')}__s{seed}"


def _write_cell_telemetry(directory: str, stem: str, m: StreamMetrics) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / f"{stem}.jsonl", "w") as fh:
        for r in m.requests:
            write_telemetry(r.records or [], fh, request_id=r.request_id, task=r.task, t_base=r.t_base)
    with open(d / f"{stem}.decisions.jsonl", "w") as fh:
        for r in m.requests:
            for ev in r.events:
                fh.write(json.dumps({"request_id": r.request_id, **asdict(ev)}) + "\n")


def _run_cell(job: _CellJob) -> dict:
    cm = MoECostModel(job.model, job.draft)
    keep = job.telemetry_dir is not None
    metrics = run_stream(job.stream, job.policy, cm, job.seed, model_name=job.model.name, keep_records=keep)
    if keep:
        _write_cell_telemetry(job.telemetry_dir,
                              _telemetry_name(job.model.name, job.task, job.policy.label, job.seed), metrics)
    return _cell_row(job.model.name, job.task, job.policy.label, job.seed, metrics)


@dataclass
class ScenarioReport:
    name: str
    cells: list[dict]
    baseline_cells: list[dict]
    regression: dict
    summary: list[dict]
    worst_case: dict
    failures: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def cell(self, model: str, task: str, policy: str, seed: int | None = None) -> dict:
        for c in self.cells + self.baseline_cells:
            if c["model"] == model and c["task"] == task and c["policy"] == policy and \
                    (seed is None or c["seed"] == seed):
                return c
        raise KeyError((model, task, policy, seed))


class MissingBaselinePolicy(KeyError):
    def __str__(self):
        return self.args[0]


def regression(xs: Sequence[float], ys: Sequence[float]) -> dict:
    """Ordinary least squares y = slope * x + intercept with R^2."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    n = len(x)
    if n < 2:
        return {"n": n, "slope": None, "intercept": None, "r2": None}
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    sxy = float(((x - xm) * (y - ym)).sum())
    syy = float(((y - ym) ** 2).sum())
    if sxx == 0.0:
        return {"n": n, "slope": None, "intercept": None, "r2": None}
    slope = sxy / sxx
    intercept = float(ym - slope * xm)
    resid = float(((y - (slope * x + intercept)) ** 2).sum())
    r2 = 1.0 - resid / syy if syy > 0 else 1.0
    return {"n": n, "slope": slope, "intercept": intercept, "r2": r2}


def compare_policies(report: ScenarioReport) -> list[dict]:
    """Per-cell speedup over the ``none`` policy for the same model, task and seed."""
    base = {(c["model"], c["task"], c["seed"]): c for c in report.baseline_cells}
    for c in report.cells:
        if c["policy"] == "none":
            base[(c["model"], c["task"], c["seed"])] = c
    rows = []
    for c in report.cells:
        key = (c["model"], c["task"], c["seed"])
        if key not in base:
            raise MissingBaselinePolicy(
                f"no 'none' policy result for model={key[0]} task={key[1]} seed={key[2]}"
            )
        rows.append({
            "model": c["model"], "task": c["task"], "policy": c["policy"], "seed": c["seed"],
            "speedup": base[key]["tpot"] / c["tpot"],
        })
    return rows


def worst_case(rows: Sequence[dict]) -> dict:
    out: dict[str, dict] = {}
    for r in rows:
        cur = out.get(r["policy"])
        if cur is None or r["speedup"] < cur["speedup"]:
            out[r["policy"]] = {"speedup": r["speedup"], "slowdown": max(0.0, 1.0 - r["speedup"]),
                                "model": r["model"], "task": r["task"], "seed": r["seed"]}
    return dict(sorted(out.items()))


def _summarize(cells: Sequence[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for c in cells:
        groups.setdefault((c["model"], c["task"], c["policy"]), []).append(c)
    out = []
    for (model, task, policy), cs in groups.items():
        out.append({
            "model": model, "task": task, "policy": policy, "seeds": len(cs),
            "speedup": float(np.mean([c["speedup"] for c in cs])),
            "etr": float(np.mean([c["etr"] for c in cs])),
            "cost": float(np.mean([c["cost"] for c in cs])),
            "utility": float(np.mean([c["utility"] for c in cs])),
            "hmean_utility": harmonic_mean(c["hmean_utility"] for c in cs),
        })
    return out


def run_scenario(config: ScenarioConfig, jobs: int = 1, telemetry_dir: str | Path | None = None) -> ScenarioReport:
    """Run every (model, task, policy, seed) cell and aggregate.

    A ``none`` baseline is always simulated so speedups are defined; it only
    shows up among ``cells`` when the scenario lists it.
    """
    tdir = str(telemetry_dir) if telemetry_dir is not None else None
    listed_none = any(p.kind == "none" for p in config.policies)
    job_list: list[_CellJob] = []
    for model in config.models:
        for task in config.tasks:
            stream = config.stream(task, model.name)
            for seed in config.seeds:
                pols = list(config.policies)
                if not listed_none:
                    pols.insert(0, Policy.none())
                for pol in pols:
                    job_list.append(_CellJob(model, task, pol, seed, stream, config.draft, tdir))

    results: list[dict | Exception] = []
    if jobs > 1 and len(job_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futures = [ex.submit(_run_cell, j) for j in job_list]
            for f in futures:
                try:
                    results.append(f.result())
                except Exception as exc:  # reported per cell
                    results.append(exc)
    else:
        for j in job_list:
            try:
                results.append(_run_cell(j))
            except Exception as exc:
                results.append(exc)

    cells, baseline_cells, failures = [], [], []
    for job, res in zip(job_list, results):
        if isinstance(res, Exception):
            failures.append({"model": job.model.name, "task": job.task, "policy": job.policy.label,
                             "seed": job.seed, "error": f"{type(res).__name__}: {res}"})
            continue
        if job.policy.kind == "none" and not listed_none:
            baseline_cells.append(res)
        else:
            cells.append(res)

    base = {(c["model"], c["task"], c["seed"]): c for c in baseline_cells + cells if c["policy"] == "none"}
    for c in cells + baseline_cells:
        b = base.get((c["model"], c["task"], c["seed"]))
        c["speedup"] = b["tpot"] / c["tpot"] if b else math.nan

    report = ScenarioReport(
        name=config.name,
        cells=cells,
        baseline_cells=baseline_cells,
        regression={},
        summary=[],
        worst_case={},
        failures=failures,
        metadata={"seeds": list(config.seeds), "seed_source": config.seed_source},
    )
    ok = [c for c in cells if c["policy"] != "none" and not math.isnan(c["speedup"])]
    report.regression = regression([c["utility"] for c in ok], [c["speedup"] for c in ok])
    report.summary = _summarize([c for c in cells if not math.isnan(c["speedup"])])
    try:
        report.worst_case = worst_case(compare_policies(report))
    except MissingBaselinePolicy:
        report.worst_case = {}
    return report


def replay_report(
    trace: AcceptanceTrace,
    policies: Sequence[Policy],
    model: ExpertConfig,
    draft: DraftCostModel,
    seed: int,
    name: str = "trace",
    affinity: float | None = None,
    telemetry_dir: str | Path | None = None,
) -> ScenarioReport:
    cm = MoECostModel(model, draft)
    keep = telemetry_dir is not None
    cells = []
    pols = list(policies)
    listed_none = any(p.kind == "none" for p in pols)
    if not listed_none:
        pols.insert(0, Policy.none())
    baseline_cells = []
    for pol in pols:
        m = run_trace(trace, pol, cm, seed, affinity=affinity, keep_records=keep)
        if keep:
            _write_cell_telemetry(str(telemetry_dir), _telemetry_name(model.name, name, pol.label, seed), m)
        row = _cell_row(model.name, name, pol.label, seed, m)
        (baseline_cells if pol.kind == "none" and not listed_none else cells).append(row)
    none_row = next(c for c in cells + baseline_cells if c["policy"] == "none")
    for c in cells + baseline_cells:
        c["speedup"] = none_row["tpot"] / c["tpot"]
    report = ScenarioReport(name, cells, baseline_cells, {}, [], {},
                            metadata={"seeds": [seed], "seed_source": "flag"})
    ok = [c for c in cells if c["policy"] != "none"]
    report.regression = regression([c["utility"] for c in ok], [c["speedup"] for c in ok])
    report.summary = _summarize(cells)
    report.worst_case = worst_case(compare_policies(report))
    return report


# ------------------------------------------------------------------ output

def cells_csv(report: ScenarioReport) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CELL_FIELDS, lineterminator="\n")
    w.writeheader()
    for c in report.baseline_cells + report.cells:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in c.items() if k in CELL_FIELDS})
    return buf.getvalue()


def summary_json(report: ScenarioReport, metadata: dict | None = None) -> str:
    meta = dict(report.metadata)
    if metadata:
        meta.update(metadata)
    doc = {
        "scenario": report.name,
        "cells": len(report.cells),
        "summary": report.summary,
        "regression": report.regression,
        "worst_case": report.worst_case,
        "failures": report.failures,
        "baseline": report.baseline_cells,
        "metadata": meta,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_report(report: ScenarioReport, out_dir: str | Path, metadata: dict | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells_path = out / "cells.csv"
    summary_path = out / "summary.json"
    cells_path.write_text(cells_csv(report))
    summary_path.write_text(summary_json(report, metadata))
    return cells_path, summary_path


def read_cells(path: str | Path) -> list[dict]:
    ints = {"seed", "requests", "tokens", "iterations", "max_k"}
    strs = {"model", "task", "policy"}
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (v if k in strs else int(v) if k in ints else float(v)) for k, v in row.items()})
    return rows
