//! Synthetic light-field microscope: lenslet geometry, depth-dependent PSFs,
//! projection, Richardson-Lucy deconvolution and data generators.

mod centers;
mod dataset;
mod layout;
mod phantom;
mod psf;

pub use centers::find_lenslet_centers;
pub use layout::{make_layout, LensletLayout};
pub use phantom::{
    gen_beads, gen_sequence, held_out_frames, train_frames, BeadConfig, DatasetKind, NoiseConfig, OpticsConfig,
    PhantomConfig, SequenceDataset, VolumeSource, BEAD_DENSITY_PRESETS,
};
pub use psf::{back_project, forward_project, poisson_nll, richardson_lucy, synth_psf, PSFStack, PsfConfig};
