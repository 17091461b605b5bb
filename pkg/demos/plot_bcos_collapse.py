"""
B-cos units and the collapsed linear map
========================================

A B-cos unit scales a linear response by ``|cos|**(B-1)``, so it only fires
strongly when its weight points the same way as the input patch. Because
the scale factor can be frozen, a whole network reduces to one matrix per
input. This script checks both facts numerically.
"""

# %%
# One unit, many angles
# ---------------------
import numpy as np

from hxbcos import Tensor, bcos_forward, collapse_rows, decode_color
from hxbcos.bcos import BcosConv2d
from hxbcos.data import encode_batch, synth_shapes
from hxbcos.models import ModelConfig, build_model

layer = BcosConv2d(2, 1, 1, padding=0, b=2.0)
layer.weight = Tensor(np.array([1.0, 0.0]).reshape(1, 2, 1, 1))
for deg in (0, 30, 60, 90):
    a = np.deg2rad(deg)
    patch = Tensor(np.array([np.cos(a), np.sin(a)]).reshape(1, 2, 1, 1))
    out = float(bcos_forward(layer, patch).data.reshape(()))
    print(f"angle {deg:2d} deg -> output {out:.4f}")

# %%
# Larger B sharpens the alignment pressure.
patch = Tensor(np.array([np.cos(0.5), np.sin(0.5)]).reshape(1, 2, 1, 1))
for b in (1.0, 1.5, 2.0, 3.0):
    layer.b = b
    print(f"B={b}: {float(bcos_forward(layer, patch).data.reshape(())):.4f}")

# %%
# A small network collapses exactly
# ---------------------------------
manifest = synth_shapes(2, 32, seed=0)
model = build_model(ModelConfig(variant="ph", n=3, stage_widths=(12, 24, 24),
                                stage_strides=(1, 2, 1), image_size=32))
x = encode_batch([manifest.samples[0].image]).astype(np.float64)
lm = collapse_rows(model, x)
print("logits         ", lm.outputs)
print("sum(row * x)   ", lm.reconstructed())
print("relative error ", lm.completeness_error())

# %%
# The rows are laid out like the six-channel input, so they decode straight
# back into colours. An untrained model gives noisy colours; the point here
# is only the shape of the result.
img = decode_color(lm.rows[0], lm.x)
print("rgb", img.rgb.shape, "alpha", img.alpha.shape, "opaque pixels", int((img.alpha > 0).sum()))
