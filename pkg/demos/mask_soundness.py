"""Virtual unseen rows cannot leak into seen visual nodes when the mask is on."""

# %%
import numpy as np

from vsgmn.gbn import build_graphs
from vsgmn.gmn import init_layers, run_gmn

rng = np.random.default_rng(0)
n_seen, n_virtual, k = 6, 3, 8
h_v = rng.standard_normal((n_seen + n_virtual, k))
h_s = rng.standard_normal((n_seen + n_virtual, k))
layers = init_layers("attention", 2, k, rng)


def seen_nodes(visual, mask):
    state = run_gmn(build_graphs(visual, h_s, n_virtual=n_virtual), layers, mask=mask)
    return state.visual_nodes[-1].data[:n_seen]


# %% Perturb only the virtual rows and compare the seen visual nodes.
moved = h_v.copy()
moved[n_seen:] += 5.0 * rng.standard_normal((n_virtual, k))
for mask in (True, False):
    diff = np.abs(seen_nodes(h_v, mask) - seen_nodes(moved, mask)).max()
    print(f"mask {mask!s:5}  max change in seen visual nodes {diff:.3g}")
