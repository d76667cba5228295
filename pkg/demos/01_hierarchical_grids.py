"""Build a hierarchical block grid, refine a region, and spread it over ranks.

Every tree node carries a data block of s_x x s_y x s_z cells; leaves hold the
live solution. Blocks are ordered along a space-filling curve and handed out
to ranks in contiguous chunks, which keeps curve neighbours on nearby ranks.
"""

import numpy as np

from steerflow import Box, GridGeometry, build_tree, distribute, lebesgue_key

domain = Box((0.0, 0.0, 0.0), (1.0, 1.0, 0.25))
geom = GridGeometry(r=(2, 2, 1), s=(8, 8, 1), d_max=4, domain_box=domain)

# refine the lower-left quarter two levels deeper than the rest
tree = build_tree(geom, [
    (domain, 2),
    (Box((0.0, 0.0, 0.0), (0.25, 0.25, 0.25)), 4),
])
leaves = tree.leaves()
print(f"grids total: {len(tree.nodes)}, leaves: {len(leaves)}")
depths = {}
for n in leaves:
    depths[n.uid.depth] = depths.get(n.uid.depth, 0) + 1
print("leaves per depth:", dict(sorted(depths.items())))

# distribute to 4 ranks: contiguous chunks along the curve, root on rank 0
tree = distribute(tree, 4)
print("root uid:", hex(tree.root.uid.value), "-> rank", tree.root.uid.rank)
per_rank = {}
for n in tree.leaves():
    per_rank[n.uid.rank] = per_rank.get(n.uid.rank, 0) + 1
print("leaves per rank:", dict(sorted(per_rank.items())))

# the curve order is a depth-first Z pattern: print the first few leaf paths
order = [n.uid.path for n in tree.leaves()[:8]]
print("first leaves along the curve:", order)

# ASCII sketch of leaf depths over the domain (finest = darkest)
chars = " .:#@"
nx = ny = 32
grid = np.zeros((nx, ny), dtype=int)
for n in tree.leaves():
    x0, y0, _ = n.bbox.lo
    x1, y1, _ = n.bbox.hi
    i0, i1 = int(x0 * nx), max(int(x1 * nx), int(x0 * nx) + 1)
    j0, j1 = int(y0 * ny), max(int(y1 * ny), int(y0 * ny) + 1)
    grid[i0:i1, j0:j1] = n.uid.depth
print("\nleaf depth map:")
for j in reversed(range(ny)):
    print("".join(chars[min(grid[i, j], 4)] for i in range(nx)))
