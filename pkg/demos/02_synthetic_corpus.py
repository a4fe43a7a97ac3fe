"""What the synthetic slides look like and how bags are cut from them.

Each slide is a grid of regions rendered at two magnifications. Positive
slides carry a planted signal in a fifth of their regions: a period-2 texture
(visible only at scale 1) or dark blobs outside the central crop (visible
only at scale 2). Every slide gets its own stain, which is the "domain".
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from msdamil.data import CorpusConfig, export_corpus, extract_bags, generate_synthetic_corpus, split_dataset

cfg = CorpusConfig(n_slides=4, scales=2, regions_per_slide=60, scale_split=True, shift=0.2, seed=3)
slides = generate_synthetic_corpus(cfg)

for s in slides:
    gain, bias = s.stain[:3], s.stain[3:]
    print(f"{s.slide_id}  label={s.label}  signal at {s.signal_scale:<6}  "
          f"signal regions={int(s.is_signal.sum()):2d}  stain gain={np.round(gain, 2)} bias={np.round(bias, 2)}")

pos = next(s for s in slides if s.signal_scale == "fine")
sig, bg = pos.is_signal, ~pos.is_signal


def stripe(p):
    return np.abs(np.diff(p.astype(float), axis=-1)).mean()


print("\nneighbour contrast, fine-signal slide:")
for scale in (1, 2):
    print(f"  scale {scale}: signal {stripe(pos.patches[scale][sig]):6.2f}   background {stripe(pos.patches[scale][bg]):6.2f}")

bags = extract_bags(pos, bag_size=20, max_bags=10, seed=0)
print(f"\n{len(bags)} bags of 20 from {pos.n_regions} regions; first bag ids: {bags[0].region_ids[:6]} ...")
print("every bag is co-registered:", all(b.instances[1].shape == b.instances[2].shape for b in bags))

train, val, test = split_dataset(slides, seed=0)
print("split sizes:", len(train), len(val), len(test))

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
export_corpus(slides, out)
print(f"exported patches and manifest to {out}")
