"""Finite-difference check of every parameter group, and what a broken kernel looks like."""

# %%
from vsgmn import autodiff as ad
from vsgmn.gradcheck import ToyModelConfig, model_gradcheck

toy = ToyModelConfig()
for variant in ("attention", "propagation"):
    for group, err in model_gradcheck(variant, toy).items():
        print(f"{variant:12} {group:28} {err:.2e}")

# %% Scaling one kernel's backward pass shows up as a large relative error.
with ad.inject_fault("log_softmax"):
    worst = max(model_gradcheck("attention", toy).values())
print(f"with a faulty log_softmax: worst relative error {worst:.2e}")
