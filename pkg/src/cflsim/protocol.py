"""Synchronous round engine for the three training modes.

cfl: devices train locally, exchange models with graph neighbors over
simulated wireless links, and aggregate with mixing-matrix weights.
ofl: devices upload to a base station that averages (sample-weighted)
and broadcasts the result back.  hybrid: cfl with the BS joining the
mix as an extra vertex that never trains.

A round advances the simulated clock by the slowest participant
(compute plus its slowest outgoing transmission) and charges a
four-component energy ledger: device transmit, device local update,
BS global transmit, BS aggregation.  All randomness is drawn from named
per-round substreams of the scenario seed, so packet-error draws stay
aligned across configs that share a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from . import channel as ch
from . import quant
from .graph import MixingMatrix, NetworkGraph, build_mixing
from .model import (
    Dataset,
    ModelParams,
    ModelShapes,
    TrainConfig,
    TrainingDivergedError,
    accuracy,
    average_params,
    gd_steps,
    init_params,
    load_idx,
    loss,
    partition_dataset,
    synth_data,
)

MODES = ("cfl", "ofl", "hybrid")
MIX_ORDERS = ("train-then-mix", "mix-then-train")
SCHEDULE_KINDS = ("all", "uniform-k", "probabilistic", "sample-weighted")

# energy ledger component indices
E_TX, E_COMP, E_GLOBAL_TX, E_AGG = 0, 1, 2, 3
ENERGY_COMPONENTS = ("tx", "comp", "global_tx", "agg")

RAW_BITS_PER_PARAM = 32

_PURPOSES = {"schedule": 0, "per": 1, "downlink": 2}


def round_rng(seed: int, purpose: str, round_idx: int) -> np.random.Generator:
    """Named substream: independent generator per (seed, purpose, round)."""
    key = (_PURPOSES[purpose], round_idx)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


@dataclass(frozen=True)
class SchedulePolicy:
    """Which devices engage in a round.

    all: everyone.  uniform-k: k devices uniformly without replacement.
    probabilistic: device i independently with probability p_i.
    sample-weighted: k devices without replacement, probability
    proportional to their dataset sizes.
    """

    kind: str = "all"
    k: int | None = None
    p: float | tuple[float, ...] | None = None
    weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind in ("uniform-k", "sample-weighted"):
            if self.k is None or self.k < 1:
                raise ValueError(f"schedule {self.kind} needs k >= 1")
        if self.kind == "probabilistic":
            if self.p is None:
                raise ValueError("probabilistic schedule needs p")
            ps = [self.p] if isinstance(self.p, (int, float)) else list(self.p)
            if any(not 0.0 <= float(x) <= 1.0 for x in ps):
                raise ValueError("schedule probabilities must lie in [0, 1]")


def schedule(policy: SchedulePolicy, n: int,
             round_seed: int | np.random.Generator) -> frozenset[int]:
    """Pick the scheduled device set; deterministic per (policy, n, seed)."""
    if isinstance(round_seed, np.random.Generator):
        rng = round_seed
    else:
        rng = np.random.default_rng(round_seed)
    if policy.kind == "all":
        return frozenset(range(n))
    if policy.kind == "uniform-k":
        if policy.k > n:
            raise ValueError(f"k={policy.k} exceeds n={n}")
        return frozenset(int(i) for i in rng.choice(n, size=policy.k, replace=False))
    if policy.kind == "probabilistic":
        p = np.broadcast_to(np.asarray(policy.p, dtype=float), (n,))
        draws = rng.random(n)
        return frozenset(int(i) for i in np.flatnonzero(draws < p))
    # sample-weighted
    if policy.weights is None:
        raise ValueError("sample-weighted schedule has no weights resolved")
    w = np.asarray(policy.weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("bad sample weights")
    if policy.k > n:
        raise ValueError(f"k={policy.k} exceeds n={n}")
    picks = rng.choice(n, size=policy.k, replace=False, p=w / w.sum())
    return frozenset(int(i) for i in picks)


@dataclass(frozen=True)
class DataSpec:
    """Where device datasets come from."""

    kind: str = "synthetic"  # synthetic | mnist
    dim: int = 12
    classes: int = 12
    samples_per_device: int = 500
    shards_per_device: int = 2
    spread: float = 3.0
    test_samples: int = 1200
    data_seed: int = 0
    images_path: str | None = None
    labels_path: str | None = None
    test_images_path: str | None = None
    test_labels_path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "mnist"):
            raise ValueError(f"unknown data kind {self.kind!r}")
        if self.kind == "mnist":
            missing = [k for k in ("images_path", "labels_path",
                                   "test_images_path", "test_labels_path")
                       if getattr(self, k) is None]
            if missing:
                raise ValueError(f"mnist data needs {', '.join(missing)}")


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete recipe for one simulated training run."""

    graph: NetworkGraph
    channel: ch.ChannelParams
    radio: ch.DeviceRadio
    data: DataSpec
    train: TrainConfig
    hidden: int = 50
    mode: str = "cfl"
    mixing: str = "lazy-metropolis"
    mix_order: str = "train-then-mix"
    schedule: SchedulePolicy = SchedulePolicy("all")
    quantizer_bits: int | None = None
    delay_budget_s: float | None = None
    rounds: int = 1
    seed: int = 0
    init_seed: int = 0
    bs_tx_power_w: float = 0.1
    bs_aggregation_energy_j: float = 0.0
    downlink_errors: bool = False
    default_distance_m: float = 100.0
    target_loss: float | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mix_order not in MIX_ORDERS:
            raise ValueError(f"unknown mix order {self.mix_order!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.seed < 0 or self.init_seed < 0:
            raise ValueError("seeds must be nonnegative")
        if self.mode in ("ofl", "hybrid") and not self.graph.bs:
            raise ValueError(f"mode {self.mode!r} requires a BS vertex")
        if self.quantizer_bits is not None and not 1 <= self.quantizer_bits <= 32:
            raise ValueError("quantizer_bits must be in [1, 32] or off")
        if self.delay_budget_s is not None and not self.delay_budget_s > 0:
            raise ValueError("delay budget must be positive or off")
        if self.hidden < 1:
            raise ValueError("hidden width must be >= 1")
        if not self.bs_tx_power_w > 0:
            raise ValueError("bs_tx_power_w must be positive")
        if self.bs_aggregation_energy_j < 0:
            raise ValueError("bs_aggregation_energy_j must be nonnegative")
        if not self.default_distance_m > 0:
            raise ValueError("default_distance_m must be positive")


@dataclass(frozen=True)
class RoundOutcome:
    """What one round did: new models, link fates, clock and energy."""

    params: tuple[np.ndarray, ...]
    delivered: frozenset[tuple[int, int]]
    dropped: Mapping[tuple[int, int], str]  # error | budget | unscheduled
    duration_s: float
    energy: np.ndarray  # (n_vertices, 4)
    participants: tuple[int, ...]


@dataclass(frozen=True)
class RoundReport:
    """Per-round metrics row (time is cumulative simulated seconds)."""

    round_idx: int
    sim_time_s: float
    avg_model_loss: float
    avg_model_acc: float
    mean_device_loss: float
    participants: int
    energy: np.ndarray  # (n_vertices, 4), this round only


@dataclass(frozen=True)
class UplinkCheck:
    """Static device-to-BS link budget audit for the configured payload."""

    delays_s: tuple[float, ...]
    admitted: tuple[bool, ...]
    budget_s: float | None

    @property
    def n_admitted(self) -> int:
        return sum(self.admitted)


@dataclass
class ExperimentState:
    cfg: ScenarioConfig
    shapes: ModelShapes
    datasets: list[Dataset]
    test_set: Dataset
    params: list[ModelParams]          # one per mixing vertex
    mixing: MixingMatrix | None
    mix_graph: NetworkGraph | None
    links: dict[tuple[int, int], ch.LinkStats]
    uplink: dict[int, ch.LinkStats]
    downlink: dict[int, ch.LinkStats]
    payload_bits: int
    global_model: ModelParams | None = None
    round_idx: int = 0


@dataclass
class RunResult:
    config: ScenarioConfig
    reports: list[RoundReport]
    final_params: list[ModelParams]
    uplink_check: UplinkCheck | None = None
    history: list[list[np.ndarray]] | None = None


def _distance(g: NetworkGraph, a: int, b: int, default: float) -> float:
    pa, pb = g.position_of(a), g.position_of(b)
    if pa is None or pb is None:
        return default
    d = float(np.hypot(pa[0] - pb[0], pa[1] - pb[1]))
    if d <= 0:
        raise ValueError(f"vertices {a} and {b} share a position")
    return d


def _payload_bits(cfg: ScenarioConfig, n_params: int) -> int:
    if cfg.quantizer_bits is None:
        return n_params * RAW_BITS_PER_PARAM
    return quant.payload_bits_for(n_params, cfg.quantizer_bits)


def build_state(cfg: ScenarioConfig) -> ExperimentState:
    """Materialize datasets, initial models, mixing matrix and link table."""
    g = cfg.graph
    data = cfg.data
    if data.kind == "synthetic":
        datasets, test_set = synth_data(
            data.data_seed, data.samples_per_device, g.n_devices,
            data.dim, data.classes, data.shards_per_device,
            spread=data.spread, test_samples=data.test_samples)
        dim, classes = data.dim, data.classes
    else:
        train_all = load_idx(data.images_path, data.labels_path)
        test_set = load_idx(data.test_images_path, data.test_labels_path)
        classes = int(max(train_all.labels.max(), test_set.labels.max())) + 1
        dim = train_all.features.shape[1]
        datasets = partition_dataset(
            train_all, data.data_seed, g.n_devices,
            data.samples_per_device, data.shards_per_device, classes)
    shapes = ModelShapes(dim, cfg.hidden, classes)

    if cfg.schedule.kind == "sample-weighted" and cfg.schedule.weights is None:
        sizes = tuple(float(d.n_samples) for d in datasets)
        cfg = replace(cfg, schedule=replace(cfg.schedule, weights=sizes))

    if cfg.mode == "cfl":
        mix_graph = g.device_subgraph()
    elif cfg.mode == "hybrid":
        mix_graph = g
    else:
        mix_graph = None
    mixing = build_mixing(mix_graph, cfg.mixing) if mix_graph is not None else None

    n_mix = mix_graph.n_vertices if mix_graph is not None else g.n_devices
    params = [
        init_params(np.random.SeedSequence(entropy=cfg.init_seed, spawn_key=(i,)),
                    shapes)
        for i in range(n_mix)
    ]

    payload = _payload_bits(cfg, shapes.n_params)

    def power_of(v: int) -> float:
        return cfg.bs_tx_power_w if (g.bs and v == g.bs_index) else cfg.radio.tx_power_w

    links: dict[tuple[int, int], ch.LinkStats] = {}
    if mix_graph is not None:
        for a, b in mix_graph.edges:
            d = _distance(g, a, b, cfg.default_distance_m)
            links[(a, b)] = ch.link_stats(d, payload, power_of(a), cfg.channel)
            links[(b, a)] = ch.link_stats(d, payload, power_of(b), cfg.channel)

    uplink: dict[int, ch.LinkStats] = {}
    downlink: dict[int, ch.LinkStats] = {}
    if g.bs:
        for i in range(g.n_devices):
            d = _distance(g, i, g.bs_index, cfg.default_distance_m)
            uplink[i] = ch.link_stats(d, payload, cfg.radio.tx_power_w, cfg.channel)
            downlink[i] = ch.link_stats(d, payload, cfg.bs_tx_power_w, cfg.channel)

    return ExperimentState(cfg=cfg, shapes=shapes, datasets=datasets,
                           test_set=test_set, params=params, mixing=mixing,
                           mix_graph=mix_graph, links=links, uplink=uplink,
                           downlink=downlink, payload_bits=payload)


def uplink_check(state: ExperimentState) -> UplinkCheck | None:
    cfg = state.cfg
    if not cfg.graph.bs:
        return None
    delays = tuple(state.uplink[i].delay_s for i in range(cfg.graph.n_devices))
    budget = cfg.delay_budget_s
    admitted = tuple(budget is None or d <= budget for d in delays)
    return UplinkCheck(delays, admitted, budget)


def _maybe_quantize(cfg: ScenarioConfig,
                    theta: np.ndarray) -> tuple[np.ndarray, quant.QuantizedBlob | None]:
    """Model vector as it arrives at a receiver (after codec, if enabled)."""
    if cfg.quantizer_bits is None:
        return theta, None
    blob = quant.encode(theta, cfg.quantizer_bits)
    return quant.decode(blob), blob


def _train_one(state: ExperimentState, i: int, start: ModelParams) -> ModelParams:
    try:
        return gd_steps(start, state.datasets[i], state.cfg.train)
    except TrainingDivergedError as exc:
        raise TrainingDivergedError(
            f"device {i}, round {state.round_idx}: {exc}") from exc


def cfl_round(state: ExperimentState, cfg: ScenarioConfig) -> RoundOutcome:
    """One neighbor-to-neighbor round (also drives hybrid mode).

    Scheduled devices take their GD steps, then every transmitter sends
    its model over each incident link (one unicast per directed link, in
    parallel, so round time sees only the slowest one).  Each receiver
    folds the weights of undelivered neighbors back onto its own model,
    keeping every mixing row summing to exactly 1.
    """
    g = cfg.graph
    mix_graph = state.mix_graph
    n_dev = g.n_devices
    r = state.round_idx
    w = state.mixing.weights

    sched = schedule(cfg.schedule, n_dev, round_rng(cfg.seed, "schedule", r))
    participants = tuple(sorted(sched))
    energy = np.zeros((g.n_vertices, 4))

    cur = list(state.params)
    comp_t: dict[int, float] = {}

    def run_training() -> None:
        for i in participants:
            cur[i] = _train_one(state, i, cur[i])
            n_i = state.datasets[i].n_samples
            comp_t[i] = ch.comp_time(n_i, cfg.train.local_steps, cfg.radio)
            energy[i, E_COMP] += ch.comp_energy(n_i, cfg.train.local_steps, cfg.radio)

    def run_mixing() -> None:
        nonlocal cur
        sent: dict[int, np.ndarray] = {}
        for j in transmitters:
            sent[j], _ = _maybe_quantize(cfg, cur[j].theta)
        mixed = []
        for i in range(mix_graph.n_vertices):
            acc = w[i, i] * cur[i].theta
            fold_back = 0.0
            for j in mix_graph.neighbors(i):
                if (j, i) in delivered:
                    acc = acc + w[i, j] * sent[j]
                else:
                    fold_back += w[i, j]
            if fold_back:
                acc = acc + fold_back * cur[i].theta
            mixed.append(ModelParams(state.shapes, acc))
        cur = mixed

    if cfg.mix_order == "train-then-mix":
        run_training()

    transmitters = set(participants)
    if cfg.mode == "hybrid":
        transmitters.add(g.bs_index)

    directed = sorted((s, d) for a, b in mix_graph.edges for s, d in ((a, b), (b, a)))
    per_draws = round_rng(cfg.seed, "per", r).random(len(directed))

    delivered: set[tuple[int, int]] = set()
    dropped: dict[tuple[int, int], str] = {}
    out_delay: dict[int, float] = {}
    for (src, dst), u in zip(directed, per_draws):
        if src not in transmitters:
            dropped[(src, dst)] = "unscheduled"
            continue
        ls = state.links[(src, dst)]
        if cfg.delay_budget_s is not None and ls.delay_s > cfg.delay_budget_s:
            dropped[(src, dst)] = "budget"
            continue
        is_bs = g.bs and src == g.bs_index
        power = cfg.bs_tx_power_w if is_bs else cfg.radio.tx_power_w
        energy[src, E_GLOBAL_TX if is_bs else E_TX] += ch.tx_energy(power, ls.delay_s)
        out_delay[src] = max(out_delay.get(src, 0.0), ls.delay_s)
        if u < ls.per:
            dropped[(src, dst)] = "error"
        else:
            delivered.add((src, dst))

    run_mixing()
    if cfg.mix_order == "mix-then-train":
        run_training()

    duration = 0.0
    for v in transmitters:
        duration = max(duration, comp_t.get(v, 0.0) + out_delay.get(v, 0.0))

    state.params = cur
    state.round_idx += 1
    return RoundOutcome(tuple(p.theta for p in cur), frozenset(delivered),
                        dropped, duration, energy, participants)


def ofl_round(state: ExperimentState, cfg: ScenarioConfig) -> RoundOutcome:
    """One BS-centric round: sample-weighted average of delivered uploads,
    then a broadcast back to every device.

    Scheduled devices whose uplink fits the delay budget train and upload;
    the broadcast is a single transmission paced by the slowest downlink.
    With nothing delivered the global model is left unchanged.
    """
    g = cfg.graph
    n_dev = g.n_devices
    bs = g.bs_index
    r = state.round_idx

    sched = schedule(cfg.schedule, n_dev, round_rng(cfg.seed, "schedule", r))
    energy = np.zeros((g.n_vertices, 4))
    dropped: dict[tuple[int, int], str] = {}
    delivered: set[tuple[int, int]] = set()

    participants = []
    for i in range(n_dev):
        if i not in sched:
            dropped[(i, bs)] = "unscheduled"
            continue
        if (cfg.delay_budget_s is not None
                and state.uplink[i].delay_s > cfg.delay_budget_s):
            dropped[(i, bs)] = "budget"
            continue
        participants.append(i)

    cur = list(state.params)
    comp_t: dict[int, float] = {}
    uploads: dict[int, np.ndarray] = {}
    per_draws = round_rng(cfg.seed, "per", r).random(n_dev)
    for i in participants:
        cur[i] = _train_one(state, i, cur[i])
        n_i = state.datasets[i].n_samples
        comp_t[i] = ch.comp_time(n_i, cfg.train.local_steps, cfg.radio)
        energy[i, E_COMP] += ch.comp_energy(n_i, cfg.train.local_steps, cfg.radio)
        ls = state.uplink[i]
        energy[i, E_TX] += ch.tx_energy(cfg.radio.tx_power_w, ls.delay_s)
        if per_draws[i] < ls.per:
            dropped[(i, bs)] = "error"
        else:
            delivered.add((i, bs))
            uploads[i], _ = _maybe_quantize(cfg, cur[i].theta)

    if uploads:
        order = sorted(uploads)
        stack = np.stack([uploads[i] for i in order])
        counts = np.array([state.datasets[i].n_samples for i in order], dtype=float)
        theta = (counts / counts.sum()) @ stack
        state.global_model = ModelParams(state.shapes, theta)
        energy[bs, E_AGG] += cfg.bs_aggregation_energy_j

    bcast_delay = 0.0
    if state.global_model is not None:
        bcast_delay = max(state.downlink[i].delay_s for i in range(n_dev))
        energy[bs, E_GLOBAL_TX] += ch.tx_energy(cfg.bs_tx_power_w, bcast_delay)
        received, _ = _maybe_quantize(cfg, state.global_model.theta)
        dl_draws = (round_rng(cfg.seed, "downlink", r).random(n_dev)
                    if cfg.downlink_errors else None)
        for i in range(n_dev):
            if dl_draws is not None and dl_draws[i] < state.downlink[i].per:
                dropped[(bs, i)] = "error"
            else:
                cur[i] = ModelParams(state.shapes, received)
                delivered.add((bs, i))

    duration = max((comp_t[i] + state.uplink[i].delay_s for i in participants),
                   default=0.0) + bcast_delay

    state.params = cur
    state.round_idx += 1
    return RoundOutcome(tuple(p.theta for p in cur), frozenset(delivered),
                        dropped, duration, energy, tuple(participants))


def run_experiment(cfg: ScenarioConfig, *, record_history: bool = False) -> RunResult:
    """Run the configured number of rounds and report per-round metrics.

    Deterministic for a fixed config.  Loss/accuracy are measured on the
    held-out test set, both for the network-average model and as the mean
    of per-device losses.
    """
    state = build_state(cfg)
    cfg = state.cfg  # schedule weights may have been resolved from the data
    check = uplink_check(state)
    round_fn = ofl_round if cfg.mode == "ofl" else cfl_round

    reports: list[RoundReport] = []
    history: list[list[np.ndarray]] | None = [] if record_history else None
    cum_time = 0.0
    for _ in range(cfg.rounds):
        outcome = round_fn(state, cfg)
        cum_time += outcome.duration_s
        device_params = state.params[: cfg.graph.n_devices]
        avg = average_params(device_params)
        avg_loss = loss(avg, state.test_set)
        avg_acc = accuracy(avg, state.test_set)
        dev_loss = float(np.mean([loss(p, state.test_set) for p in device_params]))
        reports.append(RoundReport(
            round_idx=state.round_idx - 1, sim_time_s=cum_time,
            avg_model_loss=avg_loss, avg_model_acc=avg_acc,
            mean_device_loss=dev_loss, participants=len(outcome.participants),
            energy=outcome.energy))
        if history is not None:
            history.append([p.theta for p in device_params])

    return RunResult(config=cfg, reports=reports,
                     final_params=state.params[: cfg.graph.n_devices],
                     uplink_check=check, history=history)


def equivalence_check(cfg_a: ScenarioConfig, cfg_b: ScenarioConfig) -> float:
    """Max over rounds and devices of the L-inf parameter gap between two
    runs.  Meaningful when both configs share seed, data and model init."""
    res_a = run_experiment(cfg_a, record_history=True)
    res_b = run_experiment(cfg_b, record_history=True)
    if cfg_a.graph.n_devices != cfg_b.graph.n_devices:
        raise ValueError("device counts differ")
    if res_a.history[0][0].shape != res_b.history[0][0].shape:
        raise ValueError("model shapes differ")
    worst = 0.0
    for pa, pb in zip(res_a.history, res_b.history):
        for ta, tb in zip(pa, pb):
            worst = max(worst, float(np.max(np.abs(ta - tb))))
    return worst


def param_spread(thetas: Iterable[np.ndarray]) -> float:
    """Frobenius norm of the deviations from the across-device mean."""
    stack = np.stack(list(thetas))
    dev = stack - stack.mean(axis=0)
    return float(np.linalg.norm(dev))


def param_mean(thetas: Iterable[np.ndarray]) -> np.ndarray:
    return np.stack(list(thetas)).mean(axis=0)
