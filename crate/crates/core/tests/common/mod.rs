#![allow(dead_code)]

pub mod gradcheck;

use std::path::Path;

use cofor_core::dataset::{split_manifest, synth_generate, ManifestRecord, SynthSpec};
use cofor_core::model::{ArchConfig, Head, Scale};

/// A network small enough to train in well under a second per epoch.
pub fn tiny_arch(depth: usize, head: Head) -> ArchConfig {
    ArchConfig {
        input_depth: depth,
        stem_widths: vec![4, 4],
        stem_strides: vec![4, 4],
        entry_widths: vec![6],
        middle_blocks: 1,
        middle_width: 6,
        exit_widths: vec![8],
        head,
        scale: Scale::Custom,
    }
}

/// Synthetic corpus with the first `classes` textures, split 50/25/25 by group.
pub fn small_corpus(dir: &Path, classes: usize, per_class: usize, size: usize) -> Vec<ManifestRecord> {
    let mut spec = if classes == 2 { SynthSpec::detection() } else { SynthSpec::attribution() };
    spec.classes.truncate(classes);
    spec.images_per_class = per_class;
    spec.image_size = size;
    let records = synth_generate(&spec, dir).unwrap();
    split_manifest(&records, (0.5, 0.25, 0.25), 0).unwrap()
}
