"""Experiment orchestration: the outer simulation loop, metrics emission,
policy comparison grids, and end-to-end training of the learned components.

Every run is a pure function of (config, policy, seed): all randomness flows
through seeded generators and output files carry no timestamps, so reruns
are byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from . import agent as agent_mod
from . import baselines, slicing
from .config import Config
from .env import (AllocationAction, RegionCatalog, RegionState, ResourceCatalog,
                  SettlementRecord, VmQueueState, rented_and_cost,
                  rented_in_region, step)
from .errors import ConfigError
from .forecasting import ForecastModel, TrafficSeries, baseline_forecast, fit, forecast
from .scenario import InstanceFamily, OffloadEnv, generate_scenario, traffic_counts

log = logging.getLogger("edgeslice")

POLICY_TAGS = ("sliceoff", "greedy", "max_transaction", "auction", "random", "oracle")

METRICS_HEADER = ("h", "revenue", "cost", "profit", "offloaded",
                  "hit_rate", "bw_util", "vm_util")


@dataclass
class SlotMetrics:
    """Aggregates for one long slot."""

    h: int
    revenue: float
    cost: float
    profit: float
    offloaded: int
    hit_rate: float
    bw_util: float
    vm_util: float

    def __post_init__(self):
        if abs(self.profit - (self.revenue - self.cost)) > 1e-9:
            raise ValueError("profit must equal revenue - cost")
        if self.offloaded < 0:
            raise ValueError("offloaded count must be nonnegative")

    def as_row(self):
        return (self.h, self.revenue, self.cost, self.profit, self.offloaded,
                self.hit_rate, self.bw_util, self.vm_util)


@dataclass
class MetricsReport:
    """Per-long-slot rows plus run totals for one (config, policy, seed)."""

    policy: str
    seed: int
    rows: list = field(default_factory=list)
    violations: int = 0
    settlements: list = field(default_factory=list)
    rental_log: list = field(default_factory=list)  # (h, cost)

    @property
    def total_revenue(self) -> float:
        return sum(r.revenue for r in self.rows)

    @property
    def total_cost(self) -> float:
        return sum(r.cost for r in self.rows)

    @property
    def total_profit(self) -> float:
        return sum(r.profit for r in self.rows)

    @property
    def total_offloaded(self) -> int:
        return sum(r.offloaded for r in self.rows)

    def totals(self) -> dict:
        rows = self.rows
        return {
            "policy": self.policy,
            "seed": self.seed,
            "revenue": self.total_revenue,
            "cost": self.total_cost,
            "profit": self.total_profit,
            "offloaded": self.total_offloaded,
            "hit_rate": (sum(r.hit_rate * r.offloaded for r in rows)
                         / max(1, self.total_offloaded)),
            "bw_util": sum(r.bw_util for r in rows) / max(1, len(rows)),
            "vm_util": sum(r.vm_util for r in rows) / max(1, len(rows)),
            "violations": self.violations,
        }


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

def make_policy(tag: str, config: Config, rng: np.random.Generator,
                agent_bundle=None):
    """Bind a policy tag to a callable RegionState -> AllocationAction."""
    freq = config.vm_frequency
    if tag == "greedy":
        return partial(baselines.greedy_policy, radio=config.radio,
                       econ=config.econ, frequency=freq)
    if tag == "max_transaction":
        return partial(baselines.max_transaction_policy, radio=config.radio,
                       econ=config.econ, frequency=freq)
    if tag == "auction":
        return partial(baselines.auction_policy, radio=config.radio,
                       econ=config.econ, frequency=freq)
    if tag == "random":
        return lambda region: baselines.random_policy(region, rng)
    if tag == "oracle":
        def oracle_policy(region: RegionState):
            _, assignment = baselines.brute_force_offload(
                region.tasks, region.vm_count, region.bandwidth,
                config.radio, config.econ, frequency=freq,
                initial_pending=[q.pending_work for q in region.queues])
            chosen = {j: vm for j, vm in enumerate(assignment) if vm is not None}
            _, fractions, vms = baselines._exact_allocation(
                region, chosen, config.radio, config.econ, freq)
            return AllocationAction(bw_fraction=fractions, vm_index=vms)
        return oracle_policy
    if tag == "sliceoff":
        if agent_bundle is None:
            raise ConfigError("policy 'sliceoff' needs a trained agent checkpoint")

        def sliceoff_policy(region: RegionState):
            obs = agent_mod.encode_state(region, config.radio, config.econ,
                                         agent_bundle.n_max)
            raw = agent_mod.act(agent_bundle, obs, explore=False)
            return agent_mod.decode_action(raw, region.bandwidth,
                                           region.vm_count, len(region.tasks))
        return sliceoff_policy
    raise ConfigError(f"unknown policy tag {tag!r}; choose from {POLICY_TAGS}")


def default_state_scale(config: Config) -> np.ndarray:
    """Observation normalizers sized to the mean-task demand magnitudes."""
    profile = task_profile(config)
    efficiency = config.radio.spectral_efficiency(profile.mean_distance)
    rate_ref = profile.mean_data_size / (config.econ.deadline * efficiency)
    compute_ref = (profile.mean_data_size * profile.mean_compute_density
                   / config.econ.deadline)
    bw_ref = rate_ref * max(2, config.n_max / 2)
    return agent_mod.feature_scale(
        config.n_max, bw_ref=bw_ref, rate_ref=rate_ref,
        compute_ref=compute_ref, power_ref=config.radio.upload_power)


def task_profile(config: Config) -> slicing.TaskProfile:
    lo_d, hi_d = config.tasks["data_size"]
    lo_e, hi_e = config.tasks["compute_density"]
    lo_l, hi_l = config.tasks["distance"]
    return slicing.TaskProfile(mean_data_size=(lo_d + hi_d) / 2,
                               mean_compute_density=(lo_e + hi_e) / 2,
                               mean_distance=(lo_l + hi_l) / 2)


def make_predictor(model: ForecastModel | None, n_max: float | None = None):
    """Forecast callable: the trained model when given, else persistence.
    Predictions are capped at the physical per-region user bound."""
    def predict(series, horizon):
        if model is None:
            counts = baseline_forecast(series, horizon, "persistence")
        else:
            counts = forecast(model, series, horizon)
        return np.minimum(counts, n_max) if n_max is not None else counts
    return predict


# ---------------------------------------------------------------------------
# Simulation loop
# ---------------------------------------------------------------------------

def run(config: Config, policy_tag: str, seed: int, agent_bundle=None,
        forecaster: ForecastModel | None = None) -> MetricsReport:
    """Execute H long slots of slicing plus T short slots of allocation.

    Per long slot: adjust rentals from observed traffic, account rental
    cost, then serve the per-slot task batches under the chosen policy and
    settle revenues.  Queues are cleared at every slice boundary.
    """
    if policy_tag not in POLICY_TAGS:
        raise ConfigError(f"unknown policy tag {policy_tag!r}; choose from {POLICY_TAGS}")
    scenario = generate_scenario(config, seed)
    ss = np.random.SeedSequence([seed, 0x7a5])
    rng_round, rng_policy = (np.random.default_rng(s) for s in ss.spawn(2))
    policy = make_policy(policy_tag, config, rng_policy, agent_bundle=agent_bundle)
    predictor = make_predictor(forecaster, n_max=config.n_max)
    profile = task_profile(config)
    freq = config.vm_frequency

    report_out = MetricsReport(policy=policy_tag, seed=seed)
    for h in range(1, config.horizon + 1):
        history = None
        if h > 1:
            history = TrafficSeries(scenario.counts[:, :h - 1],
                                    history_window=config.forecaster.history_window,
                                    current_window=config.forecaster.current_window)
        slices = slicing.adjust_slices(history, config.catalog, predictor,
                                       rng_round, profile, config.radio,
                                       config.econ, config.kappa_up, config.kappa_exe)
        _, _, cost_h = rented_and_cost(config.catalog, slices)
        report_out.rental_log.append((h, cost_h))

        states = []
        for i in range(config.regions):
            bw_i, vm_i = rented_in_region(config.catalog, slices, i)
            states.append(RegionState(
                region=i, bandwidth=bw_i, vm_count=vm_i, tasks=[],
                queues=[VmQueueState() for _ in range(vm_i)],
                long_slot=h, short_slot=1))

        revenue_h = 0.0
        offloaded = hits = 0
        bw_util_sum = vm_util_sum = 0.0
        cells = 0
        for t in range(1, config.short_slots + 1):
            for i in range(config.regions):
                state = states[i]
                state.tasks = scenario.tasks[i][h - 1][t - 1]
                if len(state.tasks) > config.n_max:
                    state.tasks = state.tasks[:config.n_max]
                action = policy(state).projected()
                pending_before = sum(q.pending_work for q in state.queues)
                if action.bw_fraction.sum() > 1.0 + 1e-9:
                    report_out.violations += 1
                served_mask = action.bw_fraction > 0
                if np.any(action.vm_index[served_mask] >= state.vm_count) or \
                        np.any(action.vm_index[served_mask] < 0):
                    report_out.violations += 1
                reward, next_state, recs = step(
                    state, action, config.econ, config.radio, None,
                    frequency=freq, slot_duration=config.slot_duration)
                revenue_h += reward
                for rec in recs:
                    report_out.settlements.append(rec)
                    if math.isfinite(rec.t_total):
                        offloaded += 1
                        if rec.revenue > 0:
                            hits += 1
                    if rec.t_total < 0 or rec.t_up < 0 or rec.t_que < 0 or rec.t_exe < 0:
                        report_out.violations += 1
                added = sum(state.tasks[rec.task_id].work
                            for rec in recs if rec.revenue > 0)
                capacity = state.vm_count * freq * config.slot_duration
                vm_util_sum += min(1.0, (pending_before + added) / capacity)
                bw_util_sum += min(1.0, float(action.bw_fraction.sum()))
                cells += 1
                states[i] = next_state
        report_out.rows.append(SlotMetrics(
            h=h, revenue=revenue_h, cost=cost_h, profit=revenue_h - cost_h,
            offloaded=offloaded,
            hit_rate=hits / offloaded if offloaded else 1.0,
            bw_util=bw_util_sum / max(1, cells),
            vm_util=vm_util_sum / max(1, cells)))
    return report_out


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    import io
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def report(metrics: MetricsReport, out_dir) -> dict:
    """Write metrics.csv, summary.json and settlements.csv; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "metrics": os.path.join(out_dir, "metrics.csv"),
        "summary": os.path.join(out_dir, "summary.json"),
        "settlements": os.path.join(out_dir, "settlements.csv"),
    }
    _csv_rows = [r.as_row() for r in metrics.rows]
    try:
        _atomic_write(paths["metrics"], _csv_text(METRICS_HEADER, _csv_rows))
        _atomic_write(paths["summary"],
                      json.dumps(metrics.totals(), sort_keys=True, indent=2) + "\n")
        _atomic_write(paths["settlements"],
                      _csv_text(SettlementRecord.CSV_HEADER,
                                [rec.as_row() for rec in metrics.settlements]))
    except OSError as exc:
        raise OSError(f"cannot write report under {out_dir}: {exc}") from exc
    return paths


def compare(config: Config, policies, seeds, out_dir, agent_bundle=None,
            peer_bundle=None, forecaster=None) -> dict:
    """Run a policy x seed grid; write per-run reports plus comparison.csv
    (per-policy means of revenue / offloaded count / hit rate / utilization,
    mirroring the four headline panels) and a combined summary.json."""
    os.makedirs(out_dir, exist_ok=True)
    all_totals = []
    for tag in policies:
        for seed in seeds:
            metrics = run(config, tag, seed,
                          agent_bundle=agent_bundle if tag == "sliceoff" else None,
                          forecaster=forecaster if tag == "sliceoff" else None)
            sub = os.path.join(out_dir, f"{tag}_seed{seed}")
            report(metrics, sub)
            all_totals.append(metrics.totals())
            log.info("run complete: policy=%s seed=%s profit=%.3f",
                     tag, seed, metrics.total_profit)
    comparison_rows = []
    for tag in policies:
        rows = [t for t in all_totals if t["policy"] == tag]
        n = len(rows)
        comparison_rows.append((
            tag,
            sum(r["revenue"] for r in rows) / n,
            sum(r["cost"] for r in rows) / n,
            sum(r["profit"] for r in rows) / n,
            sum(r["offloaded"] for r in rows) / n,
            sum(r["hit_rate"] for r in rows) / n,
            sum(r["bw_util"] for r in rows) / n,
            sum(r["vm_util"] for r in rows) / n,
        ))
    _atomic_write(os.path.join(out_dir, "comparison.csv"),
                  _csv_text(("policy", "revenue", "cost", "profit", "offloaded",
                             "hit_rate", "bw_util", "vm_util"), comparison_rows))
    summary = {"runs": all_totals,
               "policies": {row[0]: {"revenue": row[1], "cost": row[2],
                                     "profit": row[3], "offloaded": row[4],
                                     "hit_rate": row[5], "bw_util": row[6],
                                     "vm_util": row[7]}
                            for row in comparison_rows}}
    _atomic_write(os.path.join(out_dir, "summary.json"),
                  json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


# ---------------------------------------------------------------------------
# Training orchestration
# ---------------------------------------------------------------------------

def make_training_envs(config: Config, seed: int, episode_slots=None):
    """Current/peer/eval environments over the configured scenario family.

    The peer explores the same family under a different stream and a
    permuted region phase (its traffic-driven arrival mix differs)."""
    slots = episode_slots if episode_slots is not None else config.short_slots
    family = InstanceFamily.from_config(config)
    peer_family = InstanceFamily.from_config(config)
    env_current = OffloadEnv(family, config.n_max, seed=seed * 4 + 1,
                             episode_slots=slots,
                             slot_duration=config.slot_duration)
    env_peer = OffloadEnv(peer_family, config.n_max, seed=seed * 4 + 2,
                          episode_slots=slots,
                          slot_duration=config.slot_duration)
    eval_current = env_current.spawn(seed * 4 + 3)
    eval_peer = env_peer.spawn(seed * 4 + 4)
    return env_current, env_peer, eval_current, eval_peer


def train_forecaster(config: Config, seed: int, history_slots: int = 160):
    """Fit the traffic model on a long synthetic history; returns
    (model, per-epoch loss trace)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xf0]))
    counts = traffic_counts(config.raw["traffic"], config.regions,
                            history_slots, rng, n_max=config.n_max)
    series = TrafficSeries(counts,
                           history_window=config.forecaster.history_window,
                           current_window=config.forecaster.current_window)
    model = ForecastModel(config.forecaster,
                          np.random.default_rng(np.random.SeedSequence([seed, 0xf1])))
    trace = fit(model, series, epochs=config.forecaster_epochs,
                lr=config.forecaster_lr,
                rng=np.random.default_rng(np.random.SeedSequence([seed, 0xf2])))
    return model, trace


def train_agents(config: Config, seed: int, episode_slots=None):
    """Train the dual agents on the configured instance family."""
    env_c, env_p, eval_c, eval_p = make_training_envs(config, seed, episode_slots)
    scale = default_state_scale(config)
    return agent_mod.train(env_c, env_p, config.agent, config.n_max, scale,
                           seed=seed, eval_env_current=eval_c,
                           eval_env_peer=eval_p)


def train_all(config: Config, out_dir, seed: int | None = None) -> dict:
    """Train forecaster and both agents; write checkpoints and curves."""
    os.makedirs(out_dir, exist_ok=True)
    seed = config.seed if seed is None else seed
    model, trace = train_forecaster(config, seed)
    model.save(os.path.join(out_dir, "forecaster.ckpt"))
    _atomic_write(os.path.join(out_dir, "forecaster_loss.csv"),
                  _csv_text(("epoch", "loss"),
                            [(i, v) for i, v in enumerate(trace)]))
    current, peer, curves_c, curves_p = train_agents(config, seed)
    agent_mod.save_agent(current, os.path.join(out_dir, "agent_current.ckpt"))
    agent_mod.save_agent(peer, os.path.join(out_dir, "agent_peer.ckpt"))
    for name, curves in (("curves_current.csv", curves_c),
                         ("curves_peer.csv", curves_p)):
        _atomic_write(os.path.join(out_dir, name),
                      _csv_text(agent_mod.CurveRow.CSV_HEADER,
                                [row.as_row() for row in curves]))
    return {"out_dir": str(out_dir), "forecaster_epochs": len(trace),
            "agent_steps": current.step_count}


# ---------------------------------------------------------------------------
# Small-instance exactness checks (the `oracle` CLI command)
# ---------------------------------------------------------------------------

def oracle_checks(config: Config, instances: int = 25, seed: int = 0) -> list:
    """Exactness spot checks on small instances; returns (name, ok, detail)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0c]))
    family = InstanceFamily.from_config(config, n_range=(3, 8))
    freq = config.vm_frequency
    results = []

    worst = None
    dominated = True
    for _ in range(instances):
        region = family.sample(rng)
        best, _ = baselines.brute_force_offload(
            region.tasks, region.vm_count, region.bandwidth, config.radio,
            config.econ, frequency=freq)
        for policy in (baselines.greedy_policy, baselines.max_transaction_policy,
                       baselines.auction_policy):
            action = policy(region, config.radio, config.econ, frequency=freq)
            reward, _, _ = step(region, action, config.econ, config.radio,
                                None, frequency=freq,
                                slot_duration=config.slot_duration)
            if reward > best + 1e-6:
                dominated = False
                worst = (policy.__name__, reward, best)
    results.append(("offload_oracle_dominates_heuristics", dominated,
                    "ok" if dominated else f"violated by {worst}"))

    lp_bounded = True
    rounded_feasible = True
    detail = "ok"
    for _ in range(instances):
        caps = np.sort(rng.uniform(1e6, 1.2e7, size=4))
        costs = caps / 1e6 * rng.uniform(0.8, 1.2, size=4) * 10
        reg = config.catalog.regions[0]
        catalog = ResourceCatalog(regions=(RegionCatalog(
            bandwidth_options=tuple((float(c), float(z)) for c, z in zip(caps, costs)),
            vm_options=reg.vm_options, vm_frequency=reg.vm_frequency),))
        demand = slicing.DemandVector(
            bw_demand=np.array([rng.uniform(0.5e6, caps.max())]),
            compute_demand=np.array([rng.uniform(0.2, 0.9)
                                     * reg.vm_options[-1][0] * reg.vm_frequency]))
        frac = slicing.solve_relaxed(demand, catalog)
        lp_cost = slicing.relaxed_cost(frac, catalog)
        opt_cost, _ = baselines.brute_force_slicing(demand, catalog)
        if lp_cost > opt_cost + 1e-9:
            lp_bounded = False
            detail = f"LP {lp_cost} above enumeration {opt_cost}"
        decision = slicing.randomized_round(frac, demand, catalog, rng)
        bw_cap = catalog.regions[0].bandwidth_options[decision.bw_index(0)][0]
        vm_cap = (catalog.regions[0].vm_options[decision.vm_index(0)][0]
                  * catalog.regions[0].vm_frequency)
        if bw_cap < demand.bw_demand[0] or vm_cap < demand.compute_demand[0]:
            rounded_feasible = False
            detail = "rounded decision under-provisions demand"
    results.append(("relaxation_lower_bounds_enumeration", lp_bounded, detail))
    results.append(("rounded_slices_cover_demand", rounded_feasible,
                    "ok" if rounded_feasible else detail))

    profit_consistent = True
    metrics = run(config_small(config), "greedy", seed)
    resum = (sum(rec.revenue for rec in metrics.settlements)
             - sum(c for _, c in metrics.rental_log))
    if abs(resum - metrics.total_profit) > 1e-6:
        profit_consistent = False
    results.append(("profit_equals_settlement_resummation", profit_consistent,
                    f"profit {metrics.total_profit} vs re-summation {resum}"))
    return results


def config_small(config: Config) -> Config:
    """Shrunk copy of a config for quick exactness checks."""
    from .config import build_config
    doc = dict(config.raw)
    doc["horizon"] = min(4, config.horizon)
    doc["short_slots"] = min(4, config.short_slots)
    return build_config(doc)
