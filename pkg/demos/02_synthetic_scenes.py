"""Generate captioned scenes and look at what is in them.

Run:  python3 demos/02_synthetic_scenes.py [out_dir]
"""

import sys

import numpy as np

from semvis.data import generate_dataset, write_dataset

dataset = generate_dataset(6, seed=42)

for scene in dataset.scenes[:3]:
    print(f"scene {scene.scene_id}:")
    for obj in scene.objects:
        print(f"  {obj.color:8s} {obj.shape:9s} at bbox {obj.bbox}")
    for cap in scene.captions:
        print(f"    caption: {cap!r}")

print("\nvocabulary:", dataset.vocab.tokens)

# Crude ASCII render of the first scene (dominant channel per 2x2 block).
scene = dataset.scenes[0]
glyphs = {0: "r", 1: "g", 2: "b"}
print(f"\nscene {scene.scene_id} as ASCII (r/g/b = dominant channel):")
img = scene.image.astype(int)
for y in range(0, 64, 2):
    row = ""
    for x in range(0, 64, 2):
        block = img[:, y:y + 2, x:x + 2].sum(axis=(1, 2))
        row += glyphs[int(np.argmax(block))] if block.sum() > 0 else "."
    print(row)

if len(sys.argv) > 1:
    write_dataset(dataset, sys.argv[1])
    print(f"\nwrote dataset to {sys.argv[1]} (manifest.jsonl + images/*.ppm + vocab.txt)")
