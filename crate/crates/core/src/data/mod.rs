//! Synthetic datasets and on-disk formats.

mod defects;
mod manifest;
mod pgm;
mod tensor_io;
mod toy;

pub use defects::{gen_defect_images, texture, DefectImageSet, DefectKind, DEFECT_SHIFT, TEXTURE_MEAN, TEXTURE_STD};
pub use manifest::{format_manifest, parse_manifest, read_manifest, write_manifest, ManifestRecord};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, to_gray, write_pgm, GrayImage};
pub(crate) use tensor_io::{decode_from, Reader};
pub use tensor_io::{decode_tensor, encode_tensor, read_tensor, write_tensor, Dtype, TENSOR_MAGIC};
pub use toy::{gen_toy, ToyBenchmark, ANOMALY_QUANTILE, PAPER_POINTS};
