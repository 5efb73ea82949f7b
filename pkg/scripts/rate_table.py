"""Print atrous rates and receptive spans for a few input sizes and alphas.

    python3 scripts/rate_table.py
"""

from msroi.dspp import compute_rates, receptive_span
from msroi.model import AblationConfig, BackboneConfig, stage_taps


def main():
    for size in (64, 128, 224):
        bb = BackboneConfig(input_size=(size, size, 1))
        taps = stage_taps(bb, AblationConfig({4, 5, 6}).dspp_stages)
        for alpha in (1, 2, 3):
            sched = compute_rates(taps, alpha)
            cells = [f"s{t.stage_index} {t.height}x{t.width} rate {e.rate:>2} ({e.unrounded_rate:5.2f}) "
                     f"span {receptive_span(t, e.rate):>4}" for t, e in zip(taps, sched.entries)]
            print(f"input {size:>3} alpha {alpha}: " + " | ".join(cells))


if __name__ == "__main__":
    main()
