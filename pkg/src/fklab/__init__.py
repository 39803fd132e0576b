"""fklab: finite-volume random-cluster (q=2) laboratory."""

from .lattice import Box, BondSets, SlabPartition, boundary_sites, build_box, enumerate_bonds, slab_partition
from .model import CouplingKernel, IntensityTable, bond_intensity, boundary_intensity, field_from_intensity
from .fkcore import (
    GHOST,
    BondConfig,
    BoundaryCondition,
    ClusterPartition,
    FKGraph,
    build_clusters,
    exact_distribution,
    finite_cluster_count,
    fk_weight,
)
from .kernels import BACKEND

__version__ = "0.1.0"
