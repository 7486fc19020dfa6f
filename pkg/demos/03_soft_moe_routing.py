# Soft mixture-of-experts routing: every token contributes fractionally to
# every slot, each slot visits exactly one expert, and the expert outputs are
# mixed back per token. Expert work is O(num_slots), not O(num_tokens).

import numpy as np

from csmoe.numerics import Tensor
from csmoe.softmoe import init_soft_moe_layer, route, moe_forward

rng = np.random.default_rng(0)
dim, num_slots = 16, 4
layer = init_soft_moe_layer(rng, dim=dim, hidden=dim, num_slots=num_slots)

tokens = Tensor(rng.uniform(-1, 1, (49, dim)))
routing = route(tokens, layer)
print(f"dispatch {routing.dispatch.shape}: rows sum to "
      f"{routing.dispatch.data.sum(axis=1).round(12)[:3]} ...")
print(f"combine  {routing.combine.shape}: columns sum to "
      f"{routing.combine.data.sum(axis=0).round(12)[:3]} ...")

# The headline economy: the expert-call counter stays at num_slots no matter
# how many tokens arrive.
for num_tokens in (16, 49, 196):
    layer.expert_calls = 0
    moe_forward(Tensor(rng.uniform(-1, 1, (num_tokens, dim))), layer)
    print(f"tokens={num_tokens:4d} -> expert calls {layer.expert_calls}")

# Lowering the dispatch temperature sharpens each slot onto fewer tokens.
layer.slot_embeddings.data = rng.uniform(-1, 1, (num_slots, dim))
for temperature in (2.0, 1.0, 0.1, 0.01):
    layer.temperature = temperature
    r = route(tokens, layer)
    print(f"temperature {temperature:5.2f}: mean max dispatch weight "
          f"{r.dispatch.data.max(axis=1).mean():.3f}")
