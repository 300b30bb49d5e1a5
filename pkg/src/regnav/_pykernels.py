"""Pure-Python reference kernels.

Same algorithms, argument conventions and iteration order as the compiled
``_ckernels`` module; used when the extension is unavailable and as the
cross-check in the test suite.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np


def bfs_field(passable: np.ndarray, r0: int, c0: int) -> np.ndarray:
    """4-connected BFS step counts from (r0, c0); -1 marks walls/unreachable."""
    rows, cols = passable.shape
    dist = np.full((rows, cols), -1, dtype=np.int32)
    if not passable[r0, c0]:
        return dist
    dist[r0, c0] = 0
    queue = deque([(r0, c0)])
    while queue:
        r, c = queue.popleft()
        d = dist[r, c] + 1
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < rows and 0 <= cc < cols and passable[rr, cc] and dist[rr, cc] < 0:
                dist[rr, cc] = d
                queue.append((rr, cc))
    return dist


def cast_rays(
    passable: np.ndarray,
    x: float,
    y: float,
    angles_deg: np.ndarray,
    cell: float,
    max_dist: float,
    step: float,
) -> np.ndarray:
    """Distance (m) along each ray until the first blocked cell, capped at max_dist."""
    rows, cols = passable.shape
    out = np.empty(len(angles_deg), dtype=np.float64)
    n_steps = int(max_dist / step)
    for k in range(len(angles_deg)):
        rad = angles_deg[k] * (math.pi / 180.0)
        dx = math.cos(rad)
        dy = math.sin(rad)
        hit = max_dist
        for i in range(1, n_steps + 1):
            d = i * step
            c = int(math.floor((x + d * dx) / cell))
            r = int(math.floor((y + d * dy) / cell))
            if r < 0 or r >= rows or c < 0 or c >= cols or not passable[r, c]:
                hit = d
                break
        out[k] = hit
    return out


def _plogp(x: float) -> float:
    return x * math.log2(x) if x > 0.0 else 0.0


def move_nodes(
    indptr: np.ndarray,
    indices: np.ndarray,
    weights: np.ndarray,
    node_flow: np.ndarray,
    node_exit: np.ndarray,
    module: np.ndarray,
    order: np.ndarray,
    module_flow: np.ndarray,
    module_exit: np.ndarray,
    module_size: np.ndarray,
    max_sweeps: int,
) -> int:
    """Greedy two-level map-equation node moves, in place.

    ``weights`` are normalized undirected edge flows without self loops;
    ``module_*`` arrays are indexed by module id in [0, n) and updated in
    place together with ``module``. Returns the number of moves made.
    """
    n = len(node_flow)
    total_exit = float(module_exit.sum())
    free = [m for m in range(n - 1, -1, -1) if module_size[m] == 0]
    moves = 0
    for _ in range(max_sweeps):
        moved = 0
        for alpha in order:
            a = int(module[alpha])
            links: dict[int, float] = {}
            for k in range(indptr[alpha], indptr[alpha + 1]):
                m = int(module[indices[k]])
                links[m] = links.get(m, 0.0) + weights[k]
            p = node_flow[alpha]
            e = node_exit[alpha]
            qa_old = module_exit[a]
            fa_old = module_flow[a]
            qa_new = qa_old - e + 2.0 * links.get(a, 0.0)
            fa_new = fa_old - p
            candidates = [m for m in links if m != a]
            if module_size[a] > 1 and free:
                candidates.append(free[-1])
            best_delta = -1e-10
            best = -1
            best_qb = 0.0
            for b in candidates:
                qb_old = module_exit[b]
                fb_old = module_flow[b]
                qb_new = qb_old + e - 2.0 * links.get(b, 0.0)
                fb_new = fb_old + p
                new_total = total_exit - qa_old - qb_old + qa_new + qb_new
                delta = (
                    _plogp(new_total)
                    - _plogp(total_exit)
                    - 2.0 * (_plogp(qa_new) + _plogp(qb_new) - _plogp(qa_old) - _plogp(qb_old))
                    + _plogp(qa_new + fa_new)
                    + _plogp(qb_new + fb_new)
                    - _plogp(qa_old + fa_old)
                    - _plogp(qb_old + fb_old)
                )
                if delta < best_delta:
                    best_delta = delta
                    best = b
                    best_qb = qb_new
            if best < 0:
                continue
            b = best
            if module_size[b] == 0:
                free.pop()
            total_exit = total_exit - qa_old - module_exit[b] + qa_new + best_qb
            module_exit[a] = qa_new
            module_flow[a] = fa_new
            module_size[a] -= 1
            if module_size[a] == 0:
                total_exit -= module_exit[a]
                module_exit[a] = 0.0
                module_flow[a] = 0.0
                free.append(a)
            module_exit[b] = best_qb
            module_flow[b] += p
            module_size[b] += 1
            module[alpha] = b
            moved += 1
        moves += moved
        if moved == 0:
            break
    return moves
