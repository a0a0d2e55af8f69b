"""Multi-round protocol: local training, mask estimation, masked aggregation.

One round per client: train E local epochs, regenerate the style-simulated
dataset, estimate both Fisher diagonals, build the binary mask (or a static
policy mask), and upload (parameters, mask). The server averages parameters
once per round and hands every client back its own parameters where its mask
is set and the shared average everywhere else. Only parameter vectors, masks,
and the one-time amplitude banks ever cross the client boundary.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .benchmark import BenchmarkSpec, ClientData, evaluate, generate_benchmark, stack_batch
from .fisher import (
    BinaryMask,
    STATIC_POLICIES,
    build_mask,
    fisher_diagonal,
    mask_to_bytes,
    per_layer_masking_rate,
    resfim,
    static_mask,
)
from .nn.layers import NonFiniteError
from .nn.model import Model, build_unet, init_parameters
from .nn.optim import AdamState, adam_step
from .nn.params import LayoutError, ParameterVector, assign_parameters, flatten
from .nn.rten import rten_bytes, write_rten
from .seeding import derive_seed, rng_for
from .spectral import AmplitudeBank, SwapWindow, generate_simulated_dataset

POLICIES = ("resfim",) + STATIC_POLICIES


@dataclass
class FederationConfig:
    clients: int = 6
    rounds: int = 100
    local_epochs: int = 4
    batch_size: int = 4
    lr: float = 1e-3
    lr_decay: float = 0.99
    delta_percent: float = 30.0
    eps: float = 1e-12
    beta: float = 0.05
    fisher_max_samples: int = 64
    fisher_mode: str = "empirical"
    fisher_label_draws: int = 1
    fisher_batch: int = 16
    resfim_normalization: str = "global"
    policy: str = "resfim"
    client_weighting: str = "samples"
    seed: int = 0
    model_width: int = 8
    num_classes: int = 2
    eval_batch: int = 16
    parallel_clients: bool = False
    checkpoint_every: int = 0
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if not 0.0 <= self.delta_percent <= 100.0:
            raise ValueError("delta_percent out of [0, 100]")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 <= self.beta <= 0.5:
            raise ValueError("beta out of [0, 0.5]")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("rounds and local_epochs must be nonnegative")
        if min(self.clients, self.batch_size, self.fisher_max_samples, self.model_width) < 1:
            raise ValueError("clients, batch_size, fisher_max_samples, model_width must be positive")
        if self.client_weighting not in ("samples", "uniform"):
            raise ValueError("client_weighting must be 'samples' or 'uniform'")
        if self.benchmark.clients != self.clients:
            self.benchmark = replace(self.benchmark, clients=self.clients)


@dataclass
class ClientState:
    client_id: str
    index: int
    model: Model
    data: ClientData
    other_banks: dict[str, AmplitudeBank] = field(default_factory=dict)
    adam: AdamState | None = None
    mask: BinaryMask | None = None


@dataclass
class ServerState:
    banks: dict[str, AmplitudeBank] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    received: dict[str, tuple[ParameterVector, BinaryMask]] = field(default_factory=dict)


@dataclass
class ClientUpdate:
    client_id: str
    params: ParameterVector
    mask: BinaryMask
    train_loss: float
    wall_clock: float


@dataclass
class RoundRecord:
    round: int
    client_id: str
    train_loss: float
    val_dice: float
    test_dice: float
    layer_rates: dict[str, float]
    wall_clock: float


@dataclass
class FederationResult:
    records: list[RoundRecord]
    clients: list[ClientState]
    config: FederationConfig

    def final_params(self) -> dict[str, ParameterVector]:
        return {c.client_id: flatten(c.model) for c in self.clients}


class FederationDivergence(RuntimeError):
    """Raised when a client's loss turns non-finite; carries partial history."""

    def __init__(self, message: str, records: list[RoundRecord]):
        super().__init__(message)
        self.records = records


def bootstrap(clients: list[ClientState], server: ServerState) -> ServerState:
    """One-time amplitude exchange; idempotent, recomputes from scratch.

    Every client uploads the amplitude spectra of its training images; the
    server keeps the banks and hands each client the banks of all others.
    """
    layouts = {c.client_id: c.model.layout() for c in clients}
    first = clients[0].model.layout()
    for cid, layout in layouts.items():
        if layout != first:
            raise LayoutError(f"client {cid} has a different model architecture")
    server.banks = {
        c.client_id: AmplitudeBank.from_images(c.client_id, [s.image for s in c.data.train])
        for c in clients
    }
    for c in clients:
        c.other_banks = {cid: bank for cid, bank in server.banks.items() if cid != c.client_id}
    return server


def client_round(state: ClientState, config: FederationConfig, round_index: int) -> ClientUpdate:
    """Local epochs, then mask estimation; returns the upload payload."""
    t0 = time.perf_counter()
    model = state.model
    pv = flatten(model)
    if state.adam is None:
        state.adam = AdamState.zeros(pv.layout.total)
    lr = config.lr * config.lr_decay**round_index
    n_train = len(state.data.train)
    losses = []
    for epoch in range(config.local_epochs):
        order = rng_for(config.seed, "shuffle", round_index, state.index, epoch).permutation(n_train)
        for start in range(0, n_train, config.batch_size):
            batch = [state.data.train[i] for i in order[start : start + config.batch_size]]
            images, labels = stack_batch(batch)
            try:
                loss, grads = model.loss_and_grad(images, labels, train=True)
            except NonFiniteError as exc:
                raise FederationDivergence(
                    f"client {state.client_id} diverged in round {round_index}: {exc}", []
                ) from exc
            pv, state.adam = adam_step(pv, grads, state.adam, lr)
            assign_parameters(model, pv)
            losses.append(loss)

    if config.policy == "resfim":
        window = SwapWindow(config.beta)
        simulated = generate_simulated_dataset(
            state.data.train, state.other_banks, window, config.seed, "dbar", round_index, state.index
        )
        f_real = fisher_diagonal(
            model,
            state.data.train,
            mode=config.fisher_mode,
            seed=derive_seed(config.seed, "fisher-real", round_index, state.index),
            max_samples=config.fisher_max_samples,
            batch_size=config.fisher_batch,
            label_draws=config.fisher_label_draws,
        )
        f_sim = fisher_diagonal(
            model,
            simulated,
            mode=config.fisher_mode,
            seed=derive_seed(config.seed, "fisher-sim", round_index, state.index),
            max_samples=config.fisher_max_samples,
            batch_size=config.fisher_batch,
            label_draws=config.fisher_label_draws,
        )
        scores = resfim(f_real, f_sim, eps=config.eps, normalization=config.resfim_normalization)
        mask = build_mask(scores, config.delta_percent)
    else:
        mask = static_mask(pv.layout, config.policy)

    state.mask = mask
    train_loss = float(np.mean(losses)) if losses else 0.0
    return ClientUpdate(
        client_id=state.client_id,
        params=pv,
        mask=mask,
        train_loss=train_loss,
        wall_clock=time.perf_counter() - t0,
    )


def server_aggregate(
    params: dict[str, ParameterVector],
    masks: dict[str, BinaryMask],
    weights: dict[str, float],
) -> dict[str, ParameterVector]:
    """Masked personalized aggregation.

    The weighted average of all client vectors is computed once; each client
    keeps its own value where its mask bit is set and takes the average
    elsewhere. Kept entries are copied bitwise, never recomputed.
    """
    cids = sorted(params)
    layout = params[cids[0]].layout
    for cid in cids:
        if params[cid].layout != layout or masks[cid].layout != layout:
            raise LayoutError(f"layout mismatch for client {cid}")
    total = sum(weights[cid] for cid in cids)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"client weights must sum to 1, got {total}")
    shared = np.zeros(layout.total)
    for cid in cids:
        shared += weights[cid] * params[cid].values
    return {
        cid: ParameterVector(np.where(masks[cid].bits, params[cid].values, shared), layout)
        for cid in cids
    }


def client_weights(clients: list[ClientState], scheme: str) -> dict[str, float]:
    if scheme == "uniform":
        return {c.client_id: 1.0 / len(clients) for c in clients}
    sizes = {c.client_id: len(c.data.train) for c in clients}
    total = sum(sizes.values())
    return {cid: n / total for cid, n in sizes.items()}


def init_clients(config: FederationConfig, datasets: list[ClientData]) -> list[ClientState]:
    """All clients start from one seeded parameter draw (synchronized init)."""
    template = build_unet(1, config.num_classes, config.model_width)
    init_parameters(template, derive_seed(config.seed, "init"))
    clients = []
    for i, data in enumerate(datasets):
        clients.append(ClientState(client_id=data.client_id, index=i, model=template.copy(), data=data))
    return clients


def run_federation(
    config: FederationConfig,
    datasets: list[ClientData] | None = None,
    checkpoint_dir=None,
) -> FederationResult:
    """Full protocol: bootstrap, R rounds of train/mask/aggregate/redistribute.

    Per-round evaluation runs on each client's own validation and test split
    after redistribution. With ``checkpoint_dir`` set and
    ``config.checkpoint_every`` > 0, per-client parameter vectors are written
    as RTEN files at that round interval. Raises FederationDivergence with
    the partial record history attached if any client's loss turns non-finite.
    """
    if datasets is None:
        datasets = generate_benchmark(config.benchmark, config.seed)
    if len(datasets) != config.clients:
        raise ValueError(f"expected {config.clients} client datasets, got {len(datasets)}")
    clients = init_clients(config, datasets)
    server = ServerState(weights=client_weights(clients, config.client_weighting))
    bootstrap(clients, server)

    records: list[RoundRecord] = []
    for round_index in range(config.rounds):
        try:
            if config.parallel_clients:
                with ThreadPoolExecutor(max_workers=len(clients)) as pool:
                    updates = list(pool.map(lambda c: client_round(c, config, round_index), clients))
            else:
                updates = [client_round(c, config, round_index) for c in clients]
        except FederationDivergence as exc:
            raise FederationDivergence(str(exc), records) from None

        server.received = {u.client_id: (u.params, u.mask) for u in updates}
        personalized = server_aggregate(
            {u.client_id: u.params for u in updates},
            {u.client_id: u.mask for u in updates},
            server.weights,
        )
        for client in clients:
            assign_parameters(client.model, personalized[client.client_id])

        for client, update in zip(clients, updates):
            records.append(
                RoundRecord(
                    round=round_index,
                    client_id=client.client_id,
                    train_loss=update.train_loss,
                    val_dice=evaluate(client.model, client.data.val, config.eval_batch),
                    test_dice=evaluate(client.model, client.data.test, config.eval_batch),
                    layer_rates=per_layer_masking_rate(update.mask),
                    wall_clock=update.wall_clock,
                )
            )

        if (
            checkpoint_dir is not None
            and config.checkpoint_every
            and (round_index + 1) % config.checkpoint_every == 0
        ):
            _write_round_checkpoints(checkpoint_dir, round_index, clients)

    return FederationResult(records=records, clients=clients, config=config)


def _write_round_checkpoints(directory, round_index: int, clients: list[ClientState]) -> None:
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for client in clients:
        write_rten(directory / f"round{round_index:04d}_{client.client_id}.rten", flatten(client.model).values)


def server_artifacts(server: ServerState) -> dict[str, bytes]:
    """Serialized view of everything the server holds, for privacy audits."""
    blobs: dict[str, bytes] = {}
    for cid, bank in server.banks.items():
        for i, amp in enumerate(bank.amplitudes):
            blobs[f"bank/{cid}/{i}"] = rten_bytes(amp)
    for cid, (pv, mask) in server.received.items():
        blobs[f"params/{cid}"] = rten_bytes(pv.values)
        blobs[f"mask/{cid}"] = mask_to_bytes(mask)
    return blobs


def write_rounds_csv(path, records: list[RoundRecord]) -> None:
    lines = ["round,client,train_loss,val_dice,test_dice"]
    for r in records:
        lines.append(f"{r.round},{r.client_id},{r.train_loss!r},{r.val_dice!r},{r.test_dice!r}")
    _atomic_write(path, "\n".join(lines) + "\n")


def write_layers_csv(path, records: list[RoundRecord]) -> None:
    lines = ["round,client,layer,masking_rate"]
    for r in records:
        for layer, rate in r.layer_rates.items():
            lines.append(f"{r.round},{r.client_id},{layer},{rate!r}")
    _atomic_write(path, "\n".join(lines) + "\n")


def write_checkpoints(directory, result: FederationResult) -> None:
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for cid, pv in result.final_params().items():
        write_rten(directory / f"{cid}.rten", pv.values)


def _atomic_write(path, text: str) -> None:
    import os
    from pathlib import Path

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
