"""Train vanilla and seqnorm toy models, then transfer vanilla into seqnorm.

A shortened version of the toy experiment (fewer samples and epochs); takes
about a minute on one CPU core.

Run: python demos/05_train_and_transfer.py
"""

from seqnorm_vit import SyntheticDatasetSpec, TrainConfig, ViT, generate, preset, train, transfer_weights

data = generate(SyntheticDatasetSpec(image_size=(64, 64), num_samples=1000, noise_std=1.0, amplitude=2.0, seed=0))
cfg = TrainConfig(epochs=4, lr=1e-3, seed=0)

results = {}
for mech in ("vanilla", "seqnorm"):
    results[mech] = train(ViT(preset("toy", mech), seed=0), data, cfg)
    aurocs = ", ".join(f"{r.val_auroc:.3f}" for r in results[mech].history)
    print(f"{mech:8s} val AUROC per epoch: {aurocs}")

model = ViT(preset("toy", "seqnorm"), seed=0)
report = transfer_weights(results["vanilla"].best, model)
print(f"transfer: {len(report.copied)} tensors copied, {len(report.fresh)} fresh affine vectors")
moved = train(model, data, cfg)
print(f"seqnorm from vanilla: best {moved.best_auroc:.3f} vs from scratch {results['seqnorm'].best_auroc:.3f}")
