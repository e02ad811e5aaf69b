"""Recurrent controller that samples cell pairs and learns by REINFORCE.

Decisions are emitted in the genotype encoding order: for each cell (normal,
then reduction) and each node ``i``: ``in_a, op_a, in_b, op_b``. Input
decisions at node ``i`` choose among ``i + 2`` indices, op decisions among
the five operations.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .genotype import NUM_OPS, ArchPair, GenotypeError


@dataclass(frozen=True)
class ControllerConfig:
    hidden: int = 64
    lr: float = 3.5e-4
    entropy_weight: float = 1e-4
    tanh_constant: float | None = 1.10
    temperature: float | None = 5.0
    baseline_decay: float = 0.999
    init_range: float = 0.1
    zero_output: bool = True


@dataclass
class SampleTrace:
    decisions: list[int]
    log_probs: list[float]
    entropies: list[float]

    @property
    def total_log_prob(self) -> float:
        return math.fsum(self.log_probs)


@dataclass
class BaselineState:
    value: float = 0.0
    decay: float = 0.999
    initialized: bool = False

    def update(self, reward: float) -> None:
        if not self.initialized:
            self.value = float(reward)
            self.initialized = True
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * float(reward)


class ControllerPolicy(nn.Module):
    def __init__(self, num_nodes: int = 5, cfg: ControllerConfig = ControllerConfig(),
                 dtype: torch.dtype = torch.float32, seed: int | None = None):
        super().__init__()
        self.num_nodes = num_nodes
        self.cfg = cfg
        h = cfg.hidden
        self.start = nn.Parameter(torch.empty(1, h))
        self.lstm = nn.LSTMCell(h, h)
        self.op_embedding = nn.Embedding(NUM_OPS, h)
        self.index_embedding = nn.Embedding(num_nodes + 1, h)
        self.op_head = nn.Linear(h, NUM_OPS)
        self.index_head = nn.Linear(h, num_nodes + 1)
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        with torch.no_grad():
            for p in self.parameters():
                p.uniform_(-cfg.init_range, cfg.init_range, generator=gen)
            if cfg.zero_output:
                for head in (self.op_head, self.index_head):
                    head.weight.zero_()
                    head.bias.zero_()
        self.to(dtype)
        self.optimizer = torch.optim.Adam(self.parameters(), lr=cfg.lr)
        self.steps = 0

    @property
    def num_decisions(self) -> int:
        return 8 * self.num_nodes

    def decision_kind(self, t: int) -> tuple[bool, int]:
        """``(is_op, node)`` for decision ``t``."""
        within = t % (4 * self.num_nodes)
        return within % 2 == 1, within // 4

    def _shape(self, logits):
        if self.cfg.temperature:
            logits = logits / self.cfg.temperature
        if self.cfg.tanh_constant:
            logits = self.cfg.tanh_constant * torch.tanh(logits)
        return logits

    def step_logits(self, h, t):
        is_op, node = self.decision_kind(t)
        if is_op:
            return self._shape(self.op_head(h))
        return self._shape(self.index_head(h)[:, : node + 2])

    def rollout(self, n: int = 1, decisions: torch.Tensor | None = None, generator: torch.Generator | None = None):
        """Run the controller for ``n`` sequences.

        Samples when ``decisions`` is None, otherwise scores the given
        ``(n, 8B)`` integer tensor. Returns decisions, per-step log
        probabilities and per-step entropies, each ``(n, 8B)``.
        """
        if decisions is not None:
            n = decisions.shape[0]
        x = self.start.expand(n, -1)
        state = None
        chosen, logps, ents = [], [], []
        for t in range(self.num_decisions):
            state = self.lstm(x, state)
            logits = self.step_logits(state[0], t)
            log_p = F.log_softmax(logits, dim=-1)
            if decisions is None:
                d = torch.multinomial(log_p.exp(), 1, generator=generator).squeeze(1)
            else:
                d = decisions[:, t]
            chosen.append(d)
            logps.append(log_p.gather(1, d.unsqueeze(1)).squeeze(1))
            ents.append(-(log_p.exp() * log_p).sum(-1))
            is_op, _ = self.decision_kind(t)
            x = self.op_embedding(d) if is_op else self.index_embedding(d)
        return torch.stack(chosen, 1), torch.stack(logps, 1), torch.stack(ents, 1)

    def step_distributions(self, decisions: Sequence[int]) -> list[torch.Tensor]:
        """Per-step probability vectors when following ``decisions``."""
        seq = self._as_tensor([decisions])
        x = self.start
        state = None
        probs = []
        with torch.no_grad():
            for t in range(self.num_decisions):
                state = self.lstm(x, state)
                probs.append(F.softmax(self.step_logits(state[0], t), dim=-1)[0])
                is_op, _ = self.decision_kind(t)
                x = self.op_embedding(seq[:, t]) if is_op else self.index_embedding(seq[:, t])
        return probs

    def _as_tensor(self, sequences) -> torch.Tensor:
        seq = torch.as_tensor(sequences, dtype=torch.long)
        if seq.ndim != 2 or seq.shape[1] != self.num_decisions:
            raise GenotypeError(f"expected sequences of {self.num_decisions} decisions, got shape {tuple(seq.shape)}")
        for t in range(self.num_decisions):
            is_op, node = self.decision_kind(t)
            bound = NUM_OPS if is_op else node + 2
            if (seq[:, t] < 0).any() or (seq[:, t] >= bound).any():
                raise GenotypeError(f"decision {t} out of range [0,{bound})")
        return seq


def sample(policy: ControllerPolicy, num_nodes: int | None = None,
           generator: torch.Generator | None = None) -> tuple[ArchPair, SampleTrace]:
    pairs = sample_batch(policy, 1, generator, num_nodes)
    return pairs[0]


def sample_batch(policy: ControllerPolicy, n: int, generator: torch.Generator | None = None,
                 num_nodes: int | None = None) -> list[tuple[ArchPair, SampleTrace]]:
    if num_nodes is not None and num_nodes != policy.num_nodes:
        raise GenotypeError(f"policy emits B={policy.num_nodes}, asked for B={num_nodes}")
    with torch.no_grad():
        dec, logp, ent = policy.rollout(n, generator=generator)
    out = []
    for row, lp, en in zip(dec.tolist(), logp.tolist(), ent.tolist()):
        out.append((ArchPair.decode(row, policy.num_nodes), SampleTrace(row, lp, en)))
    return out


def log_prob(policy: ControllerPolicy, decisions: Sequence[int]) -> float:
    seq = policy._as_tensor([decisions])
    with torch.no_grad():
        _, logp, _ = policy.rollout(decisions=seq)
    return math.fsum(logp[0].tolist())


def reinforce_objective(policy: ControllerPolicy, decisions, rewards, baseline_value: float,
                        entropy_weight: float) -> torch.Tensor:
    """``sum_j (r_j - b) * sum_t log p_jt + w * sum_j sum_t H_jt`` (to be maximised)."""
    seq = decisions if isinstance(decisions, torch.Tensor) else policy._as_tensor(decisions)
    _, logp, ent = policy.rollout(decisions=seq)
    adv = torch.as_tensor(rewards, dtype=logp.dtype) - baseline_value
    return (adv * logp.sum(1)).sum() + entropy_weight * ent.sum()


def reinforce_update(policy: ControllerPolicy, traces: Sequence[SampleTrace], rewards: Sequence[float],
                     baseline: BaselineState, lr: float | None = None,
                     entropy_weight: float | None = None) -> tuple[ControllerPolicy, BaselineState]:
    """One Adam ascent step on the REINFORCE objective, then the baseline update.

    The gradient uses the baseline as it was before this batch's rewards.
    """
    if len(traces) != len(rewards) or not traces:
        raise ValueError(f"need matching non-empty traces and rewards, got {len(traces)} and {len(rewards)}")
    weight = policy.cfg.entropy_weight if entropy_weight is None else entropy_weight
    if lr is not None:
        for group in policy.optimizer.param_groups:
            group["lr"] = lr
    objective = reinforce_objective(policy, [tr.decisions for tr in traces], rewards, baseline.value, weight)
    policy.optimizer.zero_grad()
    (-objective).backward()
    policy.optimizer.step()
    policy.steps += 1
    for r in rewards:
        baseline.update(r)
    return policy, baseline


def save_controller(policy: ControllerPolicy, baseline: BaselineState, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save({"policy": policy.state_dict(), "optimizer": policy.optimizer.state_dict()},
               directory / "controller.pt")
    manifest = {"B": policy.num_nodes, "config": asdict(policy.cfg), "steps": policy.steps,
                "baseline": asdict(baseline)}
    (directory / "controller.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_controller(directory: str | Path) -> tuple[ControllerPolicy, BaselineState]:
    directory = Path(directory)
    manifest = json.loads((directory / "controller.json").read_text())
    policy = ControllerPolicy(manifest["B"], ControllerConfig(**manifest["config"]))
    blob = torch.load(directory / "controller.pt", weights_only=True)
    policy.load_state_dict(blob["policy"])
    policy.optimizer.load_state_dict(blob["optimizer"])
    policy.steps = manifest["steps"]
    return policy, BaselineState(**manifest["baseline"])
