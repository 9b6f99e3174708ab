# RS-Win step by step: shuffle tokens, attend inside fixed windows, put them back.
import numpy as np

from vbb import oracle
from vbb.attention import make_permutation, rs_win_attention
from vbb.tensor import Tensor

rng = np.random.default_rng(0)
B, L, C, heads = 1, 12, 6, 3

# %% a permutation and its inverse
perm = make_permutation(B, L, rng_seed=42)
print("shuffle:", perm.shuffle[0])
print("restore:", perm.restore[0])
tokens = np.arange(L)[None, :, None].astype(float)
print("round trip exact:", np.array_equal(perm.undo(perm.apply(tokens)), tokens))

# %% window == L collapses to plain attention
x = rng.normal(size=(B, L, C))
w = rng.normal(size=(C, 3 * C)) / np.sqrt(C)
dense = oracle.full_attention_oracle(x, heads, w)
same = rs_win_attention(Tensor(x), Tensor(w), heads=heads, window_size=L, rng_seed=1).data
print("window=L vs dense attention, max diff:", np.abs(same - dense).max())

# %% smaller windows are a different (sparse) operator
for window in (6, 4, 5):
    out = rs_win_attention(Tensor(x), Tensor(w), heads=heads, window_size=window, rng_seed=1).data
    loop = oracle.rs_win_oracle(x, heads, w, window, make_permutation(B, L, 1).shuffle)
    print(f"window={window}: diff to dense {np.abs(out - dense).max():.3f}, diff to window loop {np.abs(out - loop).max():.1e}")
# window=5 does not divide 12, so the shuffled sequence is zero padded and the pads are masked out
