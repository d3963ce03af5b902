//! Synthetic distraction scenes, augmentation and dataset files.

mod augment;
mod io;
mod scene;

pub use augment::{
    apply_augment, augment_train, crop_box, crop_chw, five_crop_eval, flip_chw, full_view, resize_chw, AugmentChoice,
    AugmentConfig, AugmentedSample, CropPosition,
};
pub use io::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, index_text, load_dataset, save_dataset, write_pgm, Dataset,
    INDEX_HEADER,
};
pub use scene::{
    generate_samples, generate_scene, hide_labels, pattern_pixels, sample_seed, BoundingBox, SceneMeta, SceneSpec,
    SyntheticSample, ATTRIBUTE_NAMES, MAX_ATTRIBUTES,
};
