# Multiply-add cost per token mixer as the sequence grows.
from vbb.attention import flop_count

C, heads, window, keys = 36, 3, 16, 64

print(f"{'L':>6} {'full':>12} {'rs_win':>10} {'global':>10} {'conv':>8}")
for L in (64, 256, 1024, 4096):
    row = [flop_count(m, L, C, heads, window_size=window, pool_size=max(1, L // keys)).mixing
           for m in ("full", "rs_win", "global", "conv")]
    print(f"{L:>6} " + " ".join(f"{v:>{w}}" for v, w in zip(row, (12, 10, 10, 8))))

# Doubling L doubles the sparse mechanisms and quadruples full attention.
# Global attention stays linear only because the pool grows with L (fixed key count).
