//! Synthetic patients, slice windows, normalization and volume bundles.

mod io;
mod phantom;
mod slicing;
mod volume;

pub use io::{read_bundles, read_volume, write_volume};
pub use phantom::{generate_phantom, PhantomParams};
pub use slicing::{reassemble, slice_volume, split_patients, PatientSplit, SliceBatch};
pub use volume::{
    denormalize_dose, normalize_ct, normalize_dose, PatientVolume, BODY_THRESHOLD_HU, CHANNEL_ORDER, CT_WINDOW_HU,
    DOSE_CAP_FACTOR, OAR_NAMES,
};
