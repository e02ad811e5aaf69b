"""Watch the controller learn a dense toy reward.

The reward is the fraction of op decisions equal to sep3. With the default
logit shaping the target probability cannot pass exp(1.1) / (exp(1.1) + 4 exp(-1.1)),
about 0.69; turning the shaping off lets it climb to 1.

Run: python3 demos/03_controller_bandit.py
"""

import torch

from enas_us.controller import BaselineState, ControllerConfig, ControllerPolicy, reinforce_update, sample_batch
from enas_us.genotype import OpKind

torch.set_num_threads(1)

for name, cfg in [("default shaping", ControllerConfig()),
                  ("no shaping, lr 0.01", ControllerConfig(lr=0.01, tanh_constant=None, temperature=None))]:
    policy = ControllerPolicy(3, cfg, seed=0)
    baseline = BaselineState(decay=0.9)
    gen = torch.Generator().manual_seed(0)
    ops = [t for t in range(policy.num_decisions) if policy.decision_kind(t)[0]]
    for step in range(301):
        batch = sample_batch(policy, 10, gen)
        rewards = [sum(tr.decisions[t] == OpKind.SEP_CONV_3 for t in ops) / len(ops) for _, tr in batch]
        reinforce_update(policy, [tr for _, tr in batch], rewards, baseline)
        if step % 100 == 0:
            print(f"{name:>20} step {step:3d}: mean reward {sum(rewards) / len(rewards):.2f}")
