"""Performance-ratio arithmetic on published recall triples (R@1, R@5, R@10).

    python3 notebooks/ratio_arithmetic.py
"""

from heviper.metrics import performance_ratio_pct, ratio_delta, round_half_up

TRIPLES = {
    "urban": {
        "baseline": (69.50, 76.42, 79.08),
        "he-vpr(1)": (57.25, 66.50, 70.00),
        "he-vpr(5)": (69.92, 76.17, 78.67),
        "he-vpr(10)": (70.42, 76.83, 79.00),
    },
    "rural": {
        "baseline": (57.61, 72.49, 77.82),
        "he-vpr(1)": (49.14, 68.07, 74.06),
        "he-vpr(5)": (56.80, 72.94, 77.72),
        "he-vpr(10)": (57.41, 71.93, 77.46),
    },
}

for scene, rows in TRIPLES.items():
    base = rows["baseline"]
    for method, triple in rows.items():
        if method == "baseline":
            continue
        ratio = performance_ratio_pct(triple, base)
        print(f"{scene:>6} {method:>11}: {round_half_up(ratio):7.2f}%  ({ratio_delta(ratio)})")
