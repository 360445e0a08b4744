//! Synthetic CT-like volumes, nodule annotations, file formats, and network
//! input assembly.

mod augment;
mod input;
pub(crate) mod io;
mod synth;
mod volume;

pub use augment::{augment, AugmentDraw, Crop, GtNodule, MAX_SHIFT};
pub use input::{
    crop_3d, denormalize_hu, make_input_25d, make_input_3d, normalize_hu, pad_value, window_25d,
    HU_MAX, HU_MIN,
};
pub use io::{
    load_annotations, load_volume, save_annotations, save_volume, Dataset, VolumeHeader,
    ANNOTATIONS_FILE,
};
pub use synth::{synth_dataset, synth_volume, SynthSpec, PARENCHYMA_HU, WALL_HU};
pub use volume::{Category, NoduleAnnotation, SizeBin, Volume};
