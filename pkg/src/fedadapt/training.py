"""Local client training procedures.

Source clients train cross-entropy plus a quadratic pull toward their
frozen memory model (the snapshot taken before a new client entered);
target clients train plain cross-entropy. Batch order comes from a
per-call seed stream, so trajectories are reproducible.
"""

import enum
from dataclasses import dataclass, replace

from .data import LabeledDataset
from .errors import ConfigError
from .nn import ProximalSpec, SplitModel, _require_congruent, loss_and_grad, sgd_step
from .seeding import stream


class Role(enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class ClientState:
    """One federation participant: data, current model, frozen memory model."""

    client_id: str
    role: Role
    train: LabeledDataset
    test: LabeledDataset
    model: SplitModel
    memory_model: SplitModel
    lam: float
    batch_size: int
    eta: float

    def __post_init__(self):
        _require_congruent(self.model, self.memory_model)
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")

    def with_model(self, model: SplitModel) -> "ClientState":
        return replace(self, model=model)


def run_sgd(model: SplitModel, dataset: LabeledDataset, epochs: int,
            batch_size: int, eta: float, seed: int, reg: ProximalSpec = None) -> SplitModel:
    """Epochs of mini-batch SGD with per-epoch shuffles from the seed stream."""
    if len(dataset) == 0:
        raise ConfigError("client train set is empty")
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    n = len(dataset)
    for epoch in range(epochs):
        order = stream(seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, batch_size):
            batch_idx = order[start:start + batch_size]
            _, grads = loss_and_grad(
                model, dataset.samples[batch_idx], dataset.labels[batch_idx], reg=reg
            )
            model = sgd_step(model, grads, eta)
    return model


def train_source_local(client: ClientState, epochs: int, seed: int) -> SplitModel:
    """Mini-batch SGD on CE + lam * ||params - memory||^2; leaves the memory model untouched."""
    if client.role is not Role.SOURCE:
        raise ConfigError(f"client {client.client_id} is not a source client")
    reg = ProximalSpec(coeff=client.lam, anchor=client.memory_model)
    return run_sgd(client.model, client.train, epochs,
                   client.batch_size, client.eta, seed, reg=reg)


def train_target_local(client: ClientState, epochs: int, seed: int) -> SplitModel:
    """Plain CE mini-batch SGD for the joining client."""
    if client.role is not Role.TARGET:
        raise ConfigError(f"client {client.client_id} is not a target client")
    return run_sgd(client.model, client.train, epochs,
                   client.batch_size, client.eta, seed)


def train_plain_local(client: ClientState, epochs: int, seed: int) -> SplitModel:
    """Plain CE training regardless of role (bootstrap rounds and baselines)."""
    return run_sgd(client.model, client.train, epochs,
                   client.batch_size, client.eta, seed)


def train_proximal_local(client: ClientState, epochs: int, seed: int,
                         anchor: SplitModel, coeff: float) -> SplitModel:
    """CE + coeff * ||params - anchor||^2 against an explicit anchor (FedProx-style)."""
    reg = ProximalSpec(coeff=coeff, anchor=anchor)
    return run_sgd(client.model, client.train, epochs,
                   client.batch_size, client.eta, seed, reg=reg)


def snapshot_memory(client: ClientState) -> ClientState:
    """Freeze the current model as the client's memory anchor."""
    return replace(client, memory_model=client.model)
