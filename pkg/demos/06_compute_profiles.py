# Parameter/FLOP/capacity accounting across patch sizes, plus the exactness
# check: the analytic operation count equals an instrumented forward pass.

import numpy as np

from csmoe.evaluation import profile, forward_flops
from csmoe.model import CsmoeConfig, init_model, forward
from csmoe.numerics import FlopCounter

print(f"{'patch':>5} {'tokens':>7} {'params':>9} {'flops':>9} {'c2c':>7}")
for patch_size in (32, 28, 16, 14):
    cfg = CsmoeConfig(patch_size=patch_size)
    prof = profile(cfg)
    print(f"{patch_size:>5} {cfg.num_patches:>7} {prof.params / 1e6:>8.1f}M "
          f"{prof.flops / 1e9:>8.2f}B {prof.c2c:>7.2f}")

# Smaller patches keep parameters flat-to-lower while forward cost climbs, so
# capacity per unit compute (c2c) falls monotonically.

cfg = CsmoeConfig(patch_size=8, image_side=16, channels_x=2, channels_y=3,
                  enc_dim=16, dec_dim=8, enc_layers_modality=1, enc_layers_shared=1,
                  dec_layers=1, num_slots=2, heads=2, dec_heads=2, proj_dim=8)
model = init_model(cfg)
rng = np.random.default_rng(0)
with FlopCounter() as counter:
    forward(model,
            rng.standard_normal((2, 16, 16)),
            rng.standard_normal((3, 16, 16)),
            seed=0)
analytic, components = forward_flops(cfg)
print(f"\nminiature config: instrumented {counter.total} ops, analytic {analytic} ops, "
      f"equal: {counter.total == analytic}")
print("largest components:",
      sorted(components.items(), key=lambda kv: -kv[1])[:3])
