"""GeM against G2M on a world where half the channels are noise.

The noise channels carry an image-specific strength, so a fixed linear
layer cannot fully remove them; the per-image gate can.  One seed here;
the acceptance suite runs five.
"""

import sys

from placerec.bench import Protocol, compare

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 1)
for row in compare(["gem", "g2m"], seeds, Protocol()):
    print(f"seed {row['seed']}: GeM R@1 {row['gem']:.1f}   G2M R@1 {row['g2m']:.1f}")
