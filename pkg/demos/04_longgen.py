"""Long-generation mechanics: peak context versus output length.

Pure cache bookkeeping (no neural model): a 125-token prompt decoding
1K..32K outputs, compressing every 56 tokens into 7 cache tokens plus one
output token. Prints the peak context for plain and compressed decoding and
the exact entry-counting bound.
"""
from gistkv.bench import cmd_longgen

rows = cmd_longgen(measure_time=True)
print(f"{'L_O':>6} {'peak plain':>11} {'peak compressed':>16} {'bound':>6} {'reduction':>10}")
for row in rows:
    print(
        f"{row['n_output']:>6} {row['peak_vanilla']:>11} {row['peak_compressed']:>16} "
        f"{row['peak_bound']:>6} {row['peak_reduction']:>9.1%}"
    )
print("\nemulated per-step attention cost (matvec over live keys):")
for row in rows:
    print(
        f"  L_O={row['n_output']:>6}: plain {row['time_vanilla_s']:.3f}s "
        f"compressed {row['time_compressed_s']:.3f}s"
    )
