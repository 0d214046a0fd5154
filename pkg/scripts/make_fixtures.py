"""Regenerate the bundled feeder fixtures in src/ppgn/data/.

    python scripts/make_fixtures.py

The fixtures are committed; rerunning this script must reproduce them
byte for byte.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "ppgn" / "data"
PHASES = "abc"
V_LN = 2401.8  # 4.16 kV line-to-line
A = np.exp(-2j * np.pi / 3)
BALANCED = np.array([1.0, A, A.conjugate()])

Z_SELF = 0.30 + 0.62j  # ohm per unit length
Z_MUTUAL = 0.09 + 0.24j


def cplx(z: complex) -> list[float]:
    return [round(float(z.real), 9), round(float(z.imag), 9)]


def line_block(length: float, phases: str, z_self=Z_SELF, z_mut=Z_MUTUAL) -> np.ndarray:
    """Admittance block of a line section carrying ``phases``."""
    live = [PHASES.index(p) for p in phases]
    z = np.full((3, 3), z_mut * length, dtype=complex)
    np.fill_diagonal(z, z_self * length)
    y = np.zeros((3, 3), dtype=complex)
    y[np.ix_(live, live)] = np.linalg.inv(z[np.ix_(live, live)])
    return y


def build(name, nodes, branches, switches, observed, slack, rng, merge=(), load_scale=1.0):
    """nodes: {id: phases}; branches: list of (from, to, length[, kind])."""
    doc_branches = []
    for br in branches:
        f, t, length = br[:3]
        kind = br[3] if len(br) > 3 else "line"
        ph = "".join(p for p in PHASES if p in nodes[f] and p in nodes[t])
        if kind == "source":
            y = line_block(length, ph, 0.02 + 0.25j, 0.0)
        else:
            y = line_block(length, ph)
        doc_branches.append(
            {"from": f, "to": t, "y": [[cplx(v) for v in row] for row in y]}
        )
    loads = []
    for nid, ph in nodes.items():
        if nid == slack:
            continue
        mag = rng.uniform(6.0, 24.0, size=3) * load_scale
        pf = rng.uniform(0.85, 0.97, size=3)
        cur = []
        for p in range(3):
            if PHASES[p] in ph:
                cur.append(mag[p] * np.exp(-1j * np.arccos(pf[p])) * BALANCED[p])
            else:
                cur.append(0j)
        loads.append({"node": nid, "current": [cplx(c) for c in cur]})
    return {
        "format": "ppgn-feeder-v1",
        "name": name,
        "nodes": [{"id": nid, "phases": ph} for nid, ph in nodes.items()],
        "branches": doc_branches,
        "switches": [{"branch": b, "state": s} for b, s in switches],
        "observed": list(observed),
        "slack": {"node": slack, "voltage": [cplx(V_LN * v) for v in BALANCED]},
        "loads": loads,
        "merge": [list(m) for m in merge],
    }


def feeder13(rng):
    ids = [650, 632, 633, 634, 645, 646, 671, 680, 684, 611, 652, 692, 675]
    nodes = {i: "abc" for i in ids}
    nodes[646] = "bc"
    branches = [
        (650, 632, 1.0, "source"),
        (632, 633, 0.5),
        (633, 634, 0.3),
        (632, 645, 0.5),
        (645, 646, 0.3),
        (632, 671, 2.0),
        (671, 680, 1.0),
        (671, 684, 0.3),
        (684, 611, 0.3),
        (684, 652, 0.8),
        (671, 692, 0.05),
        (692, 675, 0.5),
    ]
    switches = [(10, "closed")]
    return build("synthetic-13", nodes, branches, switches, [632, 671, 675, 634], 650, rng)


def feeder36(rng):
    nodes = {i: "abc" for i in range(1, 37)}
    tree = [
        (1, 2, 1.0, "source"),
        (2, 3, 0.05),  # regulator; 2 and 3 share a label
        (3, 4, 0.6), (4, 5, 0.5), (5, 6, 0.6), (6, 7, 0.5), (7, 8, 0.6),
        (3, 9, 0.4), (9, 10, 0.5), (10, 11, 0.4), (11, 12, 0.5),
        (5, 13, 0.4), (13, 14, 0.5), (14, 15, 0.4), (15, 16, 0.5), (14, 17, 0.6),
        (7, 18, 0.5), (18, 19, 0.4), (19, 20, 0.5), (20, 21, 0.4),
        (8, 22, 0.5), (22, 23, 0.4), (23, 24, 0.5),
        (8, 25, 0.4), (25, 26, 0.5), (26, 27, 0.4),
        (4, 28, 0.5), (28, 29, 0.4), (29, 30, 0.5),
        (6, 31, 0.4), (31, 32, 0.5), (32, 33, 0.4), (33, 34, 0.5),
        (6, 35, 0.5), (35, 36, 0.4),
    ]
    loops = [(12, 16, 0.8), (21, 24, 0.8), (30, 10, 0.9)]
    ties = [(34, 27, 1.0), (36, 17, 1.0)]
    branches = tree + loops + ties
    first = len(tree)
    switches = [(first + k, "closed") for k in range(len(loops))]
    switches += [(first + len(loops) + k, "open") for k in range(len(ties))]
    observed = [2, 4, 6, 8, 10, 12, 14, 16, 19, 21, 23, 26, 29, 32, 35]
    return build("synthetic-36", nodes, branches, switches, observed, 1, rng, merge=[(2, 3)])


def fig3(rng):
    # void node 1 hangs off void node 2; 3 and 4 are measured
    nodes = {i: "abc" for i in range(1, 6)}
    branches = [(5, 3, 0.5, "source"), (1, 2, 0.5), (2, 3, 0.5), (2, 4, 0.5)]
    return build("fig3-chain", nodes, branches, [], [3, 4], 5, rng)


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    for maker in (feeder13, feeder36, fig3):
        doc = maker(np.random.default_rng(20230101))
        path = OUT / f"{maker.__name__}.json"
        path.write_text(json.dumps(doc, indent=1) + "\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
