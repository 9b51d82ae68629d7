//! Deterministic toy proton transport used to generate training pairs:
//! phantoms, water-equivalent depth, an analytic Bragg curve with a
//! depth-dependent lateral Gaussian, and optional pseudo-MC noise.

mod dataset;
mod phantom;
mod transport;

pub use dataset::{
    dose_file_name, generate_dataset, generate_sample, geometry_file_name, sample_energy,
    zero_below_fraction, DatasetSpec, GeneratedSample, DATASET_FILE, INDEX_FILE,
    NOISE_MASK_FRACTION,
};
pub use phantom::{generate_phantom, water_phantom, Material, PhantomLayout, PhantomSpec};
pub use transport::{
    add_pseudo_mc_noise, bragg_depth_dose, bragg_voxel_dose, csda_range, radiological_depth,
    simulate_dose, BeamSpec, ENERGY_RANGE, PEAK_WIDTH_FRACTION, RANGE_ALPHA, RANGE_EXPONENT,
    SIGMA_GROWTH,
};
