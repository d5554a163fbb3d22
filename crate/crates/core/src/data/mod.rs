//! Data model: activity labels, time-interval annotations, fixed-window clip
//! extraction with the 50% activation rule, frame resampling, on-disk clip
//! format and train/test splitting.

mod annotations;
mod clips;
mod labels;
mod manifest;
mod serialize;
mod split;

pub use annotations::{parse_annotations, parse_annotations_str, write_annotations, AnnotationTrack};
pub use clips::{
    covered_frames, extract_clips, extract_labeled_windows, resample_clip, resample_indices,
    resize_bilinear, ExtractOptions, ExtractionReport, FrameSource, LabeledWindow, MemorySource,
    VideoClip, WindowConflict,
};
pub use labels::{Activity, LabelVector, NUM_CLASSES};
pub use manifest::{ClipRecord, DatasetManifest};
pub use serialize::{decode_frames, encode_frames, read_frames_file, write_frames_file};
pub use split::{split_dataset, DatasetSplit};
