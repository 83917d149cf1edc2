pub mod bicubic;
pub mod image;
pub mod pipeline;

pub use bicubic::{bicubic_resize, bicubic_resize_to};
pub use image::{ColorSpace, ImagePlane};
pub use pipeline::{lr_schedule, make_batch, sample_scale, BatchSource, BatchSpec, PatchBatch};
