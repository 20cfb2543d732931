"""How the two-pass encoder rewires its layers.

A hard connection feeds layer k on the second pass with a tensor tapped from
layer perm[k] on the first pass. The routing letter picks where the tap comes
from (module output or attention mid-point) and where it is added (before or
after the attention block).

Run: python3 gallery/02_multipass_routing.py
"""
import numpy as np

from mpt import ConnectionSpec, MptConfig, MultiPassTransformer, count_params
from mpt.multipass import RoutingPattern, hard_equivalence_gap

src = np.array([[3, 5, 7, 4, 9]])
base = dict(d_model=16, heads=2, d_ff=32, layers=3, vocab_size=12, max_len=8, dropout=0.0)

none = MptConfig(connection=ConnectionSpec.none(), passes=1, **base)
print(f"plain encoder parameters: {count_params(none)}")

for letter in "abcd":
    cfg = MptConfig(connection=ConnectionSpec.hard((2, 0, 1)), passes=2,
                    routing=RoutingPattern.from_letter(letter), **base)
    model = MultiPassTransformer(cfg, seed=0)
    trace = model.encode(src)
    first, final = trace.outs[0][-1].data, trace.final().data
    print(f"routing {letter} {cfg.routing}: params {count_params(cfg)}, "
          f"final pass moved by {np.abs(final - first).max():.3f}")

soft = MptConfig(connection=ConnectionSpec.soft(), passes=2, **base)
print(f"soft connection adds an N x N logit table: {count_params(soft) - count_params(none)} extra parameters")

# saturating the soft table recovers the hard wiring
model = MultiPassTransformer(MptConfig(connection=ConnectionSpec.hard((2, 0, 1)), passes=2, **base), seed=0)
gap = hard_equivalence_gap(model.params, (2, 0, 1), src, model.config)
print(f"saturated soft vs hard, max abs difference: {gap:.2e}")
