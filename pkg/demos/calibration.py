"""How the calibration offset gamma trades seen accuracy for unseen accuracy."""

# %%
import numpy as np

from vsgmn.data import generate_synthetic_dataset
from vsgmn.train import TrainConfig, evaluate, predict_dataset, train

ds = generate_synthetic_dataset(seed=7)
model = train(ds, TrainConfig(max_iter=30)).model

# %% gamma is added to unseen-class scores in the generalized setting only.
for gamma in np.linspace(-2.0, 4.0, 7):
    m = evaluate(predict_dataset(model, ds, "gzsl", gamma=gamma), ds, "gzsl")
    c = evaluate(predict_dataset(model, ds, "czsl", gamma=gamma), ds, "czsl")
    print(f"gamma {gamma:+.1f}  U {m.U:.3f}  S {m.S:.3f}  H {m.H:.3f}  czsl {c.acc_czsl:.3f}")
