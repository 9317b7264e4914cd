"""How padding bands leak into the encoder output at each padding level."""
import numpy as np

from fastsensei.data import TileSample
from fastsensei.encoder import EncoderConfig, encoder_forward, init_encoder
from fastsensei.synthetic import SENTINEL2_VNIR

rng = np.random.default_rng(1)
tile = TileSample(rng.random((2, 32, 32)).astype(np.float32), SENTINEL2_VNIR[2:4])

for level in (1, 2, 3):
    cfg = EncoderConfig(padding_level=level)
    params = init_encoder(cfg, seed=0)
    alone = encoder_forward(tile, params, cfg).data
    # pad the same two real bands up to 10 (eight bands of -0.5)
    padded = encoder_forward(tile, params, cfg, bmax=10).data
    rel = np.abs(padded - alone).max() / np.abs(alone).max()
    print(f"level {level}: max relative change from 8 padding bands = {rel:.2e}")

# level 1 divides by Bmax, so the maps shrink by n_real / Bmax
cfg1, cfg2 = EncoderConfig(padding_level=1), EncoderConfig(padding_level=2)
p = init_encoder(cfg1, seed=0, dtype=np.float64)
ratio = encoder_forward(tile, p, cfg1, bmax=10).data / encoder_forward(tile, p, cfg2, bmax=10).data
print("level1 / level2 =", np.unique(ratio.round(12)))
# level 2 still lets the attention see the padding tokens; level 3 masks them
