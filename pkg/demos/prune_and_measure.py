"""Train a small capsule network on synthetic glyphs, sparsify it and compare routing entropy.

Run from the repository root:  python3 demos/prune_and_measure.py
Takes about half a minute on one core.
"""
from capsrem import rem
from capsrem.capsnet import CapsNetConfig
from capsrem.data import split, split_counts, synth_shapes
from capsrem.training import LobsterConfig, TrainConfig, evaluate, prune_to_sparsity, sparsity_of, train

K = 11

data = synth_shapes(1200, classes=4, size=20, seed=0)
pool, test = split_counts(data, 1000, 200, seed=0)
train_set, val_set = split(pool, 0.1, seed=0)
model_config = CapsNetConfig(image_height=20, image_width=20, conv1_channels=32, conv1_kernel=5,
                             primary_kernel=5, num_types=2, num_classes=4)

base = train(TrainConfig(max_epochs=20, lr=0.003, r=3), (train_set, val_set), model_config=model_config)
r = base.r_star
base_acc = evaluate(base.model, test, r).accuracy
base_h = rem.entropy_report(rem.build_dictionary(base.model, test, K, r=r), K).mean
print(f"dense : accuracy {base_acc:.3f}  mean entropy {base_h:.3f} bits")

# the transformation matrices hold a third of the weights here and keep strong gradients,
# so sparsity levels off near 40%
cfg = TrainConfig(lr=0.001, lobster=LobsterConfig(enabled=True, lam=5e-3, threshold=1e-2))
pruned = prune_to_sparsity(cfg, (train_set, val_set), base.model, r, target=0.3,
                           max_prune_epochs=60)
acc = evaluate(pruned.model, test, r).accuracy
h = rem.entropy_report(rem.build_dictionary(pruned.model, test, K, r=r), K).mean
print(f"sparse: accuracy {acc:.3f}  mean entropy {h:.3f} bits  sparsity {sparsity_of(pruned.model):.2f}")
