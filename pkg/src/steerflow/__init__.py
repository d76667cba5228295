"""Desk-scale steerable CFD on hierarchical block grids.

The package couples an incompressible Navier-Stokes solver over a space-tree
of fixed-size data blocks with a shared-file HDF5 checkpoint kernel, an
online/offline sliding-window selector, and time-reversible steering through
branching checkpoint files.
"""

from .ckptio import CheckpointFile, CommonParams, Hyperslab, SnapshotSource, \
    compute_hyperslab, content_hash
from .fields import CellCode, CellType, DomainState
from .geometry import Box, GridGeometry
from .runtime import BoundaryItem, Communicator, RunSetup, Simulation, \
    simulation_from_file
from .solver import ConvergenceError, FlowSolver, FluidProperties, SolverParams
from .spacetree import SpaceTree, Uid, build_tree, distribute, lebesgue_key, \
    partition, uid_decode, uid_encode
from .steering import BranchPoint, CommandKind, Session, SteeringCommand
from .topology import TopologyRepo, WindowQuery, WindowSelection

__version__ = "0.1.0"

__all__ = [
    "Box", "BoundaryItem", "BranchPoint", "CellCode", "CellType",
    "CheckpointFile", "CommandKind", "CommonParams", "Communicator",
    "ConvergenceError", "DomainState", "FlowSolver", "FluidProperties",
    "GridGeometry", "Hyperslab", "RunSetup", "Session", "Simulation",
    "SnapshotSource", "SolverParams", "SpaceTree", "SteeringCommand",
    "TopologyRepo", "Uid", "WindowQuery", "WindowSelection",
    "build_tree", "compute_hyperslab", "content_hash", "distribute",
    "lebesgue_key", "partition", "simulation_from_file", "uid_decode",
    "uid_encode",
]
