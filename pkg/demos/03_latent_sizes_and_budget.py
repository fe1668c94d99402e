"""Latent footprints and the uplink/downlink/compute budget.

Reproduces the published size table for a 1024x1024 input (int8-equivalent
bytes of the D3/D4/D5 pyramid under each compression setting) and the
100 km^2 scenario numbers: ~450 MB of raw imagery vs <10 MB of compressed
latents, and about 1.6 s of pure inference at 100 MPixels/s.
"""

from obda.budget import BudgetScenario, compute_budget
from obda.codec import compressed_channels, format_mb, latent_size_bytes
from obda.encoder import REFERENCE_CHANNELS

rows = [
    ("Latent (no comp.)", None, False),
    ("Latent (comp. r=8)", 8, False),
    ("Latent (comp. r=64)", 64, False),
    ("Latent (comp. r=64, no D3)", 64, True),
]

print(f"{'configuration':<30s} {'D3':>4s} {'D4':>4s} {'D5':>4s} "
      f"{'bytes':>10s} {'MB':>7s}")
raw_image = 1024 * 1024 * 3
print(f"{'Input image (1024x1024x3)':<30s} {'--':>4s} {'--':>4s} {'--':>4s} "
      f"{raw_image:>10,d} {format_mb(raw_image):>7s}")
for name, ratio, drop in rows:
    chans = ["--" if (drop and lv == 0) else
             str(compressed_channels(c, ratio))
             for lv, c in enumerate(REFERENCE_CHANNELS)]
    size = latent_size_bytes(ratio=ratio, drop_d3=drop)
    print(f"{name:<30s} {chans[0]:>4s} {chans[1]:>4s} {chans[2]:>4s} "
          f"{size:>10,d} {format_mb(size):>7s}")

print("\n100 km^2 disaster area, 0.8 m/px, 1024^2 tiles:")
for ratio in (None, 8, 64):
    report = compute_budget(BudgetScenario(compression_ratio=ratio))
    label = "raw latents" if ratio is None else f"r={ratio} latents"
    print(f"  {label:<14s} uplink {report.latent_uplink_bytes:>12,d} B "
          f"({format_mb(report.latent_uplink_bytes)} MB) over "
          f"{report.tiles} tiles")
report = compute_budget(BudgetScenario())
print(f"  full images    uplink {report.raw_uplink_bytes:>12,d} B "
      f"({format_mb(report.raw_uplink_bytes)} MB)")
print(f"  inference      {float(report.inference_seconds):.4f} s at "
      f"{report.scenario.throughput_mpix_s:.0f} MPixels/s")
print(f"  downlink       {report.downlink_bytes_per_detection} B per "
      f"detection record")
