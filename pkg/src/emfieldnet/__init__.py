"""Physics-augmented 3D U-Net surrogates for time-harmonic E/B fields on voxel grids."""
from .fieldgrid import (
    C0, EPS0, MU0, TARGET_CHANNELS, CoilExcitation, GridGeom, MaterialVolume, SampleRecord,
    ScalarGrid, SubjectMask, VectorPhasorField, build_input_stack, pack_targets,
    subject_mask_from_materials, unpack_targets,
)
from .container import read_container, write_container
from .unet import ArchSpec, UNetParams, backward, forward, init_params
from .training import LossSpec, OptimSpec, composite_loss, train, zero_baseline

__version__ = "0.1.0"
