"""Hopcroft-Karp maximum-cardinality matching on bipartite graphs.

Left vertices are 0..n_left-1, right vertices 0..n_right-1; ``adj[u]`` lists
the right neighbours of u.
"""
from __future__ import annotations

from collections import deque

_INF = float("inf")


def hopcroft_karp(adj: list[list[int]], n_right: int) -> list[int]:
    """Return ``match_left`` with the matched right vertex of each left vertex, or -1."""
    n_left = len(adj)
    match_l = [-1] * n_left
    match_r = [-1] * n_right
    dist = [0.0] * n_left

    def bfs() -> bool:
        q = deque()
        for u in range(n_left):
            if match_l[u] == -1:
                dist[u] = 0
                q.append(u)
            else:
                dist[u] = _INF
        found = False
        while q:
            u = q.popleft()
            for v in adj[u]:
                w = match_r[v]
                if w == -1:
                    found = True
                elif dist[w] == _INF:
                    dist[w] = dist[u] + 1
                    q.append(w)
        return found

    def dfs(root: int) -> bool:
        # iterative layered DFS for one augmenting path from root
        stack = [(root, iter(adj[root]))]
        path = []
        while stack:
            u, it = stack[-1]
            advanced = False
            for v in it:
                w = match_r[v]
                if w == -1:
                    path.append((u, v))
                    for pu, pv in reversed(path):
                        match_l[pu] = pv
                        match_r[pv] = pu
                    return True
                if dist[w] == dist[u] + 1:
                    path.append((u, v))
                    stack.append((w, iter(adj[w])))
                    advanced = True
                    break
            if not advanced:
                dist[u] = _INF
                stack.pop()
                if path:
                    path.pop()
        return False

    while bfs():
        for u in range(n_left):
            if match_l[u] == -1:
                dfs(u)
    return match_l


def matching_size(match_left: list[int]) -> int:
    return sum(1 for v in match_left if v != -1)
