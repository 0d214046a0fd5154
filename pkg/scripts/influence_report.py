"""Compare observed-node coverage of the physical graph against the
constructed kernel, for each bundled feeder and a range of kernel widths."""
from __future__ import annotations

import numpy as np

from ppgn.adjacency import build_A
from ppgn.feeder import bundled, shortest_paths
from ppgn.influence import fd_jacobian_blocks, influence_norms, invisible_nodes, transition
from ppgn.stage1 import Stage1Config, init_theta1, local_aggregate_layer

for name in ("fig3", "feeder13", "feeder36"):
    g = bundled(name)
    phys = transition(g.adjacency())
    D = shortest_paths(g)
    for layers in (1, 2, 3):
        blind = invisible_nodes(phys, g.observed, layers)
        row = [f"{name:<9} K={layers} physical {len(blind):2d}"]
        for k in (1, 2, 3, 5):
            A = build_A(D, min(k, g.n - 1)).a_tilde
            row.append(f"k={k}: {len(invisible_nodes(A, g.observed, layers)):2d}")
        print("  ".join(row), " (nodes with no observed influence)")
    print(f"{'':<9} observed fraction {len(g.observed) / g.n:.2f}", np.asarray(g.node_ids)[list(g.observed)])

# The ReLU network's Jacobian is not a walk probability. Report how its
# influence pattern lines up with the K-step reach of A instead.
g = bundled("feeder36")
A = build_A(shortest_paths(g), 3)
P = A.propagation()
rng = np.random.default_rng(0)
for layers in (1, 2, 3):
    params = init_theta1(g.n, g.n_classes, Stage1Config(layers=layers, width=8), rng).params

    def local(H0):
        H = H0[None]
        for k in range(1, layers + 1):
            H = local_aggregate_layer(H, P, params[f"W{k}"])
        return H.data[0]

    norms = influence_norms(fd_jacobian_blocks(local, rng.normal(size=(g.n, 6))))
    reach = np.linalg.matrix_power(np.eye(g.n) + (A.a_tilde > 0), layers) > 0
    walk = np.linalg.matrix_power(A.a_tilde, layers)
    outside = norms[~reach].sum() / norms.sum()
    corr = np.corrcoef(norms[reach], walk[reach])[0, 1]
    print(f"ReLU net K={layers}: jacobian mass outside K-hop reach {outside:.1e}, "
          f"corr with A^K on reach {corr:.2f}")
