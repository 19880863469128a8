"""Round-based protocol engine: the two-teacher algorithm and its baselines.

Every algorithm runs behind one interface: R communication rounds over a
fixed set of clients, each owning a personalized model, a transfer model, a
private dataset and an independent RNG stream. Client updates within a round
are mutually isolated (frozen teacher snapshots, per-client streams, purely
functional parameter steps), so end-of-round state does not depend on the
order in which clients execute.

Variants
--------
FedL2T   full protocol: per-round random peer teacher, bidirectional
         confidence-weighted distillation between the personalized and
         transfer models at output and feature level, proximal anchoring of
         the personalized model to the broadcast global model, weighted
         server aggregation of transfer models.
L2T_CG   FedL2T without the proximal term (mu forced to 0).
L2T_C    peer-teacher pathway only; no server, no transfer models.
FML      fixed-weight mutual output distillation between the two models.
Ditto    personalized model trained with a proximal pull toward a global
         model that itself is trained FedAvg-style.
FedAvg   one shared global model, overwritten locally each round.
Local    independent per-client training, no communication.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import SampleBatch, accuracy
from .errors import ConfigError, ContractError, InputError
from .losses import (
    LossTerm,
    adaptive_scale,
    combine,
    compose_P_loss,
    compose_T_loss,
    kl_output,
    mse_features,
    proximal,
    task_ce,
)
from .nn import (
    GradBuffer,
    ModelParams,
    ModelSpec,
    backward,
    check_congruent,
    forward,
    init_model,
    sgd_step,
)
from .seeding import rng_from_state, rng_state, training_streams

ALGORITHMS = ("Local", "FedAvg", "Ditto", "FML", "L2T_C", "L2T_CG", "FedL2T")

# variants that maintain a server-side aggregate and those that use the queue
_AGGREGATING = {"FedAvg", "Ditto", "FML", "L2T_CG", "FedL2T"}
_QUEUED = {"L2T_C", "L2T_CG", "FedL2T"}


def normalize_algorithm(name: str) -> str:
    """Map user spellings (case, hyphens) onto the canonical variant names."""
    key = name.strip().replace("-", "_").lower()
    for canonical in ALGORITHMS:
        if key == canonical.lower():
            return canonical
    raise ConfigError(f"unknown algorithm '{name}' (choose from {', '.join(ALGORITHMS)})")


@dataclass(frozen=True)
class HyperParams:
    """Training settings shared by all algorithm variants."""

    eta: float = 0.01
    mu: float = 0.2
    lambda_c: float = 0.5
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 32
    algorithm: str = "FedL2T"
    seed: int = 0
    fml_weight: float = 0.5  # fixed distillation weight used only by the FML baseline

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigError(f"eta must be > 0 (got {self.eta})")
        if self.mu < 0:
            raise ConfigError(f"mu must be >= 0 (got {self.mu})")
        if self.lambda_c < 0:
            raise ConfigError(f"lambda_c must be >= 0 (got {self.lambda_c})")
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds, local_epochs and batch_size must all be >= 1")
        if self.fml_weight < 0:
            raise ConfigError(f"fml_weight must be >= 0 (got {self.fml_weight})")
        object.__setattr__(self, "algorithm", normalize_algorithm(self.algorithm))


@dataclass
class ClientState:
    """One client: dual models, private data, independent RNG stream."""

    client_id: int
    personalized: ModelParams
    transfer: ModelParams
    train: SampleBatch
    test: SampleBatch
    rng: np.random.Generator

    def __post_init__(self):
        check_congruent(self.personalized, self.transfer)
        if len(self.train) < 1:
            raise InputError(f"client {self.client_id} has no training samples")

    @property
    def n_train(self) -> int:
        return len(self.train)

    def clone(self) -> "ClientState":
        """Independent copy: fresh parameter vectors and RNG position, shared data."""
        return ClientState(
            client_id=self.client_id,
            personalized=self.personalized.copy(),
            transfer=self.transfer.copy(),
            train=self.train,
            test=self.test,
            rng=rng_from_state(rng_state(self.rng)),
        )


@dataclass(frozen=True)
class CrossClientQueue:
    """Per-round peer-teacher assignment; assignments[k-1] teaches client k."""

    assignments: tuple[int, ...]

    def __post_init__(self):
        k = len(self.assignments)
        for cid, peer in enumerate(self.assignments, start=1):
            if not 1 <= peer <= k:
                raise ContractError(f"queue entry {peer} outside 1..{k}")
            if peer == cid:
                raise ContractError(f"client {cid} assigned to itself")

    def peer_of(self, client_id: int) -> int:
        return self.assignments[client_id - 1]


@dataclass
class GlobalState:
    """Server-side aggregate of the transfer models."""

    t_global: ModelParams
    round: int = 0


@dataclass
class RoundMetrics:
    """Per-round, per-client training-loss components and test accuracy."""

    round: int
    acc: np.ndarray
    task_loss: np.ndarray
    kl_loss: np.ndarray
    feat_loss: np.ndarray
    prox_loss: np.ndarray


@dataclass
class AlgorithmRun:
    """Everything produced by running one variant for some number of rounds."""

    algorithm: str
    metrics: list[RoundMetrics]
    clients: list[ClientState]
    global_state: GlobalState | None
    server_rng: np.random.Generator
    completed_rounds: int


def generate_queue(n_clients: int, rng: np.random.Generator) -> CrossClientQueue:
    """Independent uniform draws over the peers of each client (never itself)."""
    if n_clients < 2:
        raise ConfigError("the cross-client queue needs at least 2 clients")
    draws = rng.integers(0, n_clients - 1, size=n_clients)
    ids = np.arange(1, n_clients + 1)
    peers = draws + 1 + (draws + 1 >= ids)
    return CrossClientQueue(tuple(int(p) for p in peers))


def aggregate(models: list[ModelParams], counts: list[int]) -> ModelParams:
    """Sample-count-weighted average of congruent models.

    Anchored at the first model so that averaging identical models (and the
    single-model case) reproduces the input exactly.
    """
    if not models:
        raise ContractError("cannot aggregate an empty model list")
    if len(counts) != len(models):
        raise ContractError(f"{len(models)} models but {len(counts)} counts")
    if any(c < 1 for c in counts):
        raise InputError(f"sample counts must be >= 1 (got {list(counts)})")
    base = models[0]
    for m in models[1:]:
        check_congruent(base, m)
    total = float(sum(counts))
    acc = np.zeros_like(base.values)
    for m, c in zip(models, counts):
        acc += (c / total) * (m.values - base.values)
    return ModelParams(base.spec, base.values + acc)


def build_clients(
    datasets: list[tuple[SampleBatch, SampleBatch]],
    spec: ModelSpec,
    hp: HyperParams,
) -> tuple[list[ClientState], np.random.Generator]:
    """Assemble client states with a common initialization and per-client streams.

    Every model (personalized and transfer, on every client) starts from one
    shared draw, the standard setup in which the proximal and distillation
    terms penalize divergence accumulated through training rather than an
    arbitrary initial parameter gap, and single-client federation coincides
    with purely local training.
    """
    init_rng, server_rng, client_rngs = training_streams(hp.seed, len(datasets))
    theta = init_model(spec, init_rng)
    clients = [
        ClientState(
            client_id=k + 1,
            personalized=theta.copy(),
            transfer=theta.copy(),
            train=train,
            test=test,
            rng=rng,
        )
        for k, ((train, test), rng) in enumerate(zip(datasets, client_rngs))
    ]
    return clients, server_rng


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled mini-batch index slices; the short final batch is kept."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


class _LossMeter:
    """Averages per-batch loss components across one client's round."""

    def __init__(self):
        self.sums = np.zeros(4)
        self.count = 0

    def add(self, task: float, kl: float, feat: float, prox: float):
        self.sums += (task, kl, feat, prox)
        self.count += 1

    def means(self) -> np.ndarray:
        return self.sums / max(self.count, 1)


# ---------------------------------------------------------------------------
# client updates
# ---------------------------------------------------------------------------

def client_update_fedl2t(
    state: ClientState,
    peer: ModelParams | None,
    t_global: ModelParams,
    hp: HyperParams,
) -> tuple[ClientState, np.ndarray]:
    """Local epochs of the full two-teacher update.

    Per mini-batch, both local models are evaluated on the same samples along
    with the frozen peer; all loss terms are composed into the two totals and
    both models take their gradient step simultaneously from the pre-update
    parameters. The peer and global parameters are never written. Returns the
    updated state and the round-averaged loss components of the personalized
    model (task, output-distill, feature-distill, proximal).
    """
    check_congruent(state.personalized, t_global)
    if peer is not None:
        check_congruent(state.personalized, peer)
    elif hp.lambda_c > 0:
        raise ContractError("a peer teacher is required when lambda_c > 0")
    spec = state.personalized.spec
    meter = _LossMeter()
    for _ in range(hp.local_epochs):
        for idx in _batches(state.n_train, hp.batch_size, state.rng):
            x, y = state.train.x[idx], state.train.y[idx]
            trace_p = forward(state.personalized, x)
            trace_t = forward(state.transfer, x)
            task_p = task_ce(trace_p, y)
            task_t = task_ce(trace_t, y)

            # bidirectional distillation between the two local models; the
            # feature loss value is shared, gradients flow to one side at a time
            kl_to_t = adaptive_scale(kl_output(trace_p.probs, trace_t), task_p.value, task_t.value)
            kl_to_p = adaptive_scale(kl_output(trace_t.probs, trace_p), task_t.value, task_p.value)
            feat_to_t = adaptive_scale(
                mse_features(trace_p.features, trace_t), task_p.value, task_t.value
            )
            feat_to_p = adaptive_scale(
                mse_features(trace_t.features, trace_p), task_t.value, task_p.value
            )

            peer_kl = peer_feat = None
            if hp.lambda_c > 0:
                trace_c = forward(peer, x)
                task_c = task_ce(trace_c, y)
                peer_kl = adaptive_scale(
                    kl_output(trace_c.probs, trace_p), task_c.value, task_p.value
                )
                peer_feat = adaptive_scale(
                    mse_features(trace_c.features, trace_p), task_c.value, task_p.value
                )

            prox = proximal(state.personalized, t_global, hp.mu)

            total_t = compose_T_loss(task_t, kl_to_t, feat_to_t)
            total_p = compose_P_loss(
                task_p,
                kl_to_p,
                feat_to_p,
                prox=prox,
                peer_kl=peer_kl,
                peer_feat=peer_feat,
                lambda_c=hp.lambda_c,
            )

            g_t = backward(trace_t, total_t.d_logits, total_t.d_features, GradBuffer.zeros(spec))
            g_p = backward(trace_p, total_p.d_logits, total_p.d_features, GradBuffer.zeros(spec))
            if total_p.d_params is not None:
                g_p.values += total_p.d_params

            state.transfer = sgd_step(state.transfer, g_t, hp.eta)
            state.personalized = sgd_step(state.personalized, g_p, hp.eta)

            cross_kl = hp.lambda_c * peer_kl.value if peer_kl is not None else 0.0
            cross_feat = hp.lambda_c * peer_feat.value if peer_feat is not None else 0.0
            meter.add(task_p.value, kl_to_p.value + cross_kl, feat_to_p.value + cross_feat, prox.value)
    return state, meter.means()


def _client_update_l2t_c(state: ClientState, peer: ModelParams, hp: HyperParams) -> np.ndarray:
    """Peer-teacher-only update of the personalized model."""
    spec = state.personalized.spec
    meter = _LossMeter()
    for _ in range(hp.local_epochs):
        for idx in _batches(state.n_train, hp.batch_size, state.rng):
            x, y = state.train.x[idx], state.train.y[idx]
            trace_p = forward(state.personalized, x)
            task_p = task_ce(trace_p, y)
            terms = [(1.0, task_p)]
            cross_kl = cross_feat = 0.0
            if hp.lambda_c > 0:
                trace_c = forward(peer, x)
                task_c = task_ce(trace_c, y)
                peer_kl = adaptive_scale(
                    kl_output(trace_c.probs, trace_p), task_c.value, task_p.value
                )
                peer_feat = adaptive_scale(
                    mse_features(trace_c.features, trace_p), task_c.value, task_p.value
                )
                terms += [(hp.lambda_c, peer_kl), (hp.lambda_c, peer_feat)]
                cross_kl = hp.lambda_c * peer_kl.value
                cross_feat = hp.lambda_c * peer_feat.value
            total = combine(terms)
            g = backward(trace_p, total.d_logits, total.d_features, GradBuffer.zeros(spec))
            state.personalized = sgd_step(state.personalized, g, hp.eta)
            meter.add(task_p.value, cross_kl, cross_feat, 0.0)
    return meter.means()


def _client_update_fml(state: ClientState, hp: HyperParams) -> np.ndarray:
    """Fixed-weight mutual output distillation between the two local models."""
    spec = state.personalized.spec
    w = hp.fml_weight
    meter = _LossMeter()
    for _ in range(hp.local_epochs):
        for idx in _batches(state.n_train, hp.batch_size, state.rng):
            x, y = state.train.x[idx], state.train.y[idx]
            trace_p = forward(state.personalized, x)
            trace_t = forward(state.transfer, x)
            task_p = task_ce(trace_p, y)
            task_t = task_ce(trace_t, y)
            kl_to_p = kl_output(trace_t.probs, trace_p)
            kl_to_t = kl_output(trace_p.probs, trace_t)
            total_p = combine([(1.0, task_p), (w, kl_to_p)])
            total_t = combine([(1.0, task_t), (w, kl_to_t)])
            g_p = backward(trace_p, total_p.d_logits, None, GradBuffer.zeros(spec))
            g_t = backward(trace_t, total_t.d_logits, None, GradBuffer.zeros(spec))
            state.personalized = sgd_step(state.personalized, g_p, hp.eta)
            state.transfer = sgd_step(state.transfer, g_t, hp.eta)
            meter.add(task_p.value, w * kl_to_p.value, 0.0, 0.0)
    return meter.means()


def _client_update_ditto(state: ClientState, anchor: ModelParams, hp: HyperParams) -> np.ndarray:
    """Dual-objective update: a global-track model plus a proximal personal model."""
    spec = state.personalized.spec
    meter = _LossMeter()
    for _ in range(hp.local_epochs):
        for idx in _batches(state.n_train, hp.batch_size, state.rng):
            x, y = state.train.x[idx], state.train.y[idx]
            trace_t = forward(state.transfer, x)
            task_t = task_ce(trace_t, y)
            g_t = backward(trace_t, task_t.d_logits, None, GradBuffer.zeros(spec))

            trace_p = forward(state.personalized, x)
            task_p = task_ce(trace_p, y)
            prox = proximal(state.personalized, anchor, hp.mu)
            g_p = backward(trace_p, task_p.d_logits, None, GradBuffer.zeros(spec))
            g_p.values += prox.d_params

            state.transfer = sgd_step(state.transfer, g_t, hp.eta)
            state.personalized = sgd_step(state.personalized, g_p, hp.eta)
            meter.add(task_p.value, 0.0, 0.0, prox.value)
    return meter.means()


def _client_update_ce(state: ClientState, hp: HyperParams) -> np.ndarray:
    """Plain cross-entropy training of the personalized model."""
    spec = state.personalized.spec
    meter = _LossMeter()
    for _ in range(hp.local_epochs):
        for idx in _batches(state.n_train, hp.batch_size, state.rng):
            x, y = state.train.x[idx], state.train.y[idx]
            trace = forward(state.personalized, x)
            task = task_ce(trace, y)
            g = backward(trace, task.d_logits, None, GradBuffer.zeros(spec))
            state.personalized = sgd_step(state.personalized, g, hp.eta)
            meter.add(task.value, 0.0, 0.0, 0.0)
    return meter.means()


# ---------------------------------------------------------------------------
# rounds
# ---------------------------------------------------------------------------

def _metrics_from(round_index, loss_rows, accs) -> RoundMetrics:
    losses = np.asarray(loss_rows)
    return RoundMetrics(
        round=round_index,
        acc=np.asarray(accs),
        task_loss=losses[:, 0],
        kl_loss=losses[:, 1],
        feat_loss=losses[:, 2],
        prox_loss=losses[:, 3],
    )


def run_round(
    clients: list[ClientState],
    global_state: GlobalState,
    hp: HyperParams,
    server_rng: np.random.Generator,
    order: list[int] | None = None,
) -> tuple[list[ClientState], GlobalState, RoundMetrics]:
    """One full two-teacher communication round.

    Broadcast the global model into every transfer model, draw the peer
    queue, snapshot end-of-previous-round personalized models as frozen
    teachers, run all client updates (any order; they are isolated), then
    aggregate the transfer models. `order` only permutes execution and must
    not change the result.
    """
    k = len(clients)
    for c in clients:
        c.transfer = global_state.t_global.copy()
    queue = generate_queue(k, server_rng)
    snapshots = [c.personalized for c in clients]

    loss_rows: list[np.ndarray | None] = [None] * k
    for i in order if order is not None else range(k):
        client = clients[i]
        peer = snapshots[queue.peer_of(client.client_id) - 1]
        _, loss_rows[i] = client_update_fedl2t(client, peer, global_state.t_global, hp)

    new_global = aggregate([c.transfer for c in clients], [c.n_train for c in clients])
    global_state = GlobalState(t_global=new_global, round=global_state.round + 1)
    accs = [accuracy(c.personalized, c.test) for c in clients]
    return clients, global_state, _metrics_from(global_state.round, loss_rows, accs)


def _round_l2t_c(clients, hp, server_rng, round_index, order=None) -> RoundMetrics:
    k = len(clients)
    queue = generate_queue(k, server_rng)
    snapshots = [c.personalized for c in clients]
    loss_rows: list[np.ndarray | None] = [None] * k
    for i in order if order is not None else range(k):
        client = clients[i]
        peer = snapshots[queue.peer_of(client.client_id) - 1]
        loss_rows[i] = _client_update_l2t_c(client, peer, hp)
    accs = [accuracy(c.personalized, c.test) for c in clients]
    return _metrics_from(round_index, loss_rows, accs)


def _round_fml(clients, global_state, hp, order=None) -> tuple[GlobalState, RoundMetrics]:
    k = len(clients)
    for c in clients:
        c.transfer = global_state.t_global.copy()
    loss_rows: list[np.ndarray | None] = [None] * k
    for i in order if order is not None else range(k):
        loss_rows[i] = _client_update_fml(clients[i], hp)
    new_global = aggregate([c.transfer for c in clients], [c.n_train for c in clients])
    global_state = GlobalState(new_global, global_state.round + 1)
    accs = [accuracy(c.personalized, c.test) for c in clients]
    return global_state, _metrics_from(global_state.round, loss_rows, accs)


def _round_ditto(clients, global_state, hp, order=None) -> tuple[GlobalState, RoundMetrics]:
    k = len(clients)
    anchor = global_state.t_global
    for c in clients:
        c.transfer = anchor.copy()
    loss_rows: list[np.ndarray | None] = [None] * k
    for i in order if order is not None else range(k):
        loss_rows[i] = _client_update_ditto(clients[i], anchor, hp)
    new_global = aggregate([c.transfer for c in clients], [c.n_train for c in clients])
    global_state = GlobalState(new_global, global_state.round + 1)
    accs = [accuracy(c.personalized, c.test) for c in clients]
    return global_state, _metrics_from(global_state.round, loss_rows, accs)


def _round_fedavg(clients, global_state, hp, first_round, order=None) -> tuple[GlobalState, RoundMetrics]:
    k = len(clients)
    if not first_round:
        for c in clients:
            c.personalized = global_state.t_global.copy()
    loss_rows: list[np.ndarray | None] = [None] * k
    for i in order if order is not None else range(k):
        loss_rows[i] = _client_update_ce(clients[i], hp)
    new_global = aggregate([c.personalized for c in clients], [c.n_train for c in clients])
    global_state = GlobalState(new_global, global_state.round + 1)
    accs = [accuracy(global_state.t_global, c.test) for c in clients]
    return global_state, _metrics_from(global_state.round, loss_rows, accs)


def _round_local(clients, hp, round_index, order=None) -> RoundMetrics:
    k = len(clients)
    loss_rows: list[np.ndarray | None] = [None] * k
    for i in order if order is not None else range(k):
        loss_rows[i] = _client_update_ce(clients[i], hp)
    accs = [accuracy(c.personalized, c.test) for c in clients]
    return _metrics_from(round_index, loss_rows, accs)


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

def run_algorithm(
    variant: str,
    clients: list[ClientState],
    hp: HyperParams,
    server_rng: np.random.Generator | None = None,
    global_state: GlobalState | None = None,
    start_round: int = 0,
    stop_at_round: int | None = None,
    round_hook=None,
) -> AlgorithmRun:
    """Run one variant for hp.rounds communication rounds.

    Input clients are cloned, never mutated. The initial global model is the
    weighted aggregate of the (identically initialized) per-client track it
    synchronizes, so it needs no extra state. start_round/stop_at_round and
    the optional round_hook(round_index, run) exist for checkpointing.
    """
    variant = normalize_algorithm(variant)
    clients = [c.clone() for c in clients]
    if server_rng is None:
        _, server_rng, _ = training_streams(hp.seed, len(clients))
    counts = [c.n_train for c in clients]

    if global_state is None and variant in _AGGREGATING:
        track = "personalized" if variant == "FedAvg" else "transfer"
        global_state = GlobalState(
            aggregate([getattr(c, track) for c in clients], counts), round=start_round
        )

    if variant == "L2T_CG":
        hp_round = replace(hp, mu=0.0)
    else:
        hp_round = hp

    metrics: list[RoundMetrics] = []
    last = hp.rounds if stop_at_round is None else min(stop_at_round, hp.rounds)
    run = AlgorithmRun(variant, metrics, clients, global_state, server_rng, start_round)
    for r in range(start_round + 1, last + 1):
        if variant in ("FedL2T", "L2T_CG"):
            clients, global_state, rm = run_round(clients, global_state, hp_round, server_rng)
        elif variant == "L2T_C":
            rm = _round_l2t_c(clients, hp_round, server_rng, r)
        elif variant == "FML":
            global_state, rm = _round_fml(clients, global_state, hp_round)
        elif variant == "Ditto":
            global_state, rm = _round_ditto(clients, global_state, hp_round)
        elif variant == "FedAvg":
            global_state, rm = _round_fedavg(clients, global_state, hp_round, first_round=(r == 1))
        else:  # Local
            rm = _round_local(clients, hp_round, r)
        metrics.append(rm)
        run.clients, run.global_state, run.completed_rounds = clients, global_state, r
        if round_hook is not None:
            round_hook(r, run)
    return run


def run_experiment(
    variant: str,
    datasets: list[tuple[SampleBatch, SampleBatch]],
    spec: ModelSpec,
    hp: HyperParams,
) -> AlgorithmRun:
    """Convenience wrapper: build clients from datasets and run one variant."""
    clients, server_rng = build_clients(datasets, spec, hp)
    return run_algorithm(variant, clients, hp, server_rng=server_rng)
