"""Compare the embedding-only baseline with the full graph-matching model."""

# %%
from vsgmn.data import generate_synthetic_dataset
from vsgmn.train import ABLATIONS, TrainConfig, train_and_evaluate

print("ablation rows:", ", ".join(ABLATIONS))

# %% Same seed for data and training, three seeds.
for seed in (7, 8, 9):
    ds = generate_synthetic_dataset(seed=seed)
    line = [f"seed {seed}"]
    for name in ("baseline", "full"):
        _, czsl, gzsl = train_and_evaluate(ds, TrainConfig(seed=seed).with_ablation(name))
        line.append(f"{name}: acc {czsl.acc_czsl:.3f} H {gzsl.H:.3f}")
    print("  ".join(line))
