"""Encoder latency for the variants discussed in the README (single thread, 512 x 512)."""
from fastsensei.bench import VARIANTS, time_variant

reports = [time_variant(v, 5, 512, iterations=10, warmup=3) for v in VARIANTS]
for r in reports:
    print(r.line())

base = reports[0].fps
for r in reports[1:]:
    print(f"fast-sensei is {base / r.fps:5.2f}x the FPS of {r.variant}")

print()
for b in (1, 5, 10):
    print(time_variant("fast-sensei", b, 512).line())
