"""Patchify, the model presets, and the checkpoint format.

Run: python demos/03_vit_and_checkpoints.py
"""

import tempfile
from pathlib import Path

import numpy as np

from seqnorm_vit import PRESETS, Checkpoint, ViT, parameter_count, patchify, preset, transfer_weights

img = np.zeros((224, 224, 3), np.float32)
print("224x224x3 image, 16x16 patches ->", patchify(img, (16, 16)).shape)
vol = np.zeros((32, 256, 256, 1), np.float32)
print("32x256x256 volume, 4x16x16 patches ->", patchify(vol, (4, 16, 16)).shape)

for name in sorted(PRESETS):
    counts = {m: parameter_count(preset(name, m)) for m in ("vanilla", "seqnorm", "sima")}
    print(f"{name:7s}", ", ".join(f"{m} {c:,}" for m, c in counts.items()))

model = ViT(preset("toy", "vanilla"), seed=0)
logits = model(np.random.default_rng(0).standard_normal((2, 64, 64, 1)).astype(np.float32))
print("toy forward ->", logits.shape)

with tempfile.TemporaryDirectory() as tmp:
    path = Checkpoint.from_model(model, note="demo").save(Path(tmp) / "vanilla.ckpt")
    raw = path.read_bytes()
    print("checkpoint", len(raw), "bytes, magic", raw[:8], "sha256", Checkpoint.load(path).sha256()[:16], "...")
    back = Checkpoint.load(path).build()
    same = all(a.data.tobytes() == b.data.tobytes() for a, b in zip(model.parameters(), back.parameters()))
    print("round trip bit-exact:", same)

    # Vanilla -> seqnorm: everything is copied except the new affine vectors.
    target = ViT(preset("toy", "seqnorm"), seed=0)
    report = transfer_weights(path, target)
    print(f"transfer: {len(report.copied)} copied, {len(report.fresh)} fresh, e.g. {report.fresh[:3]}")
