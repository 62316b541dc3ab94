"""Is the data subscription worth it?

The full-data tier costs about 6.5 EUR per vehicle per month, the
odometer-only tier 2.1 EUR. Against a typical premium the full tier eats
roughly 8% - viable today only where premiums are high (luxury cars,
theft cover), while the cheap tier stays under the default 5% threshold.
"""

from carconnect.analytics import cost_viability

TIERS = [("full data (BMW-like)", 6.5), ("odometer only (Mercedes-like)", 2.1)]
PREMIUMS = [60.0, 81.25, 120.0, 250.0, 650.0]

header = f"{'monthly premium (EUR)':>22} | " + " | ".join(f"{name:^32}" for name, _ in TIERS)
print(header)
print("-" * len(header))
for premium in PREMIUMS:
    cells = []
    for _, cost in TIERS:
        verdict = cost_viability(cost, premium)
        cells.append(f"{verdict.ratio:7.1%}  {verdict.verdict:<15}")
    print(f"{premium:>22.2f} | " + " | ".join(f"{cell:^32}" for cell in cells))

print("\nthe 8% reference point:")
print(" ", cost_viability(6.5, 81.25).to_json_dict())
