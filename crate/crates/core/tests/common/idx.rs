//! Handcrafted IDX fixtures.

use triage_core::data::{IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

pub fn images(magic: u32, dims: [u32; 3], pixels: &[u8]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    for d in dims {
        v.extend(d.to_be_bytes());
    }
    v.extend(pixels);
    v
}

pub fn labels(magic: u32, count: u32, values: &[u8]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    v.extend(count.to_be_bytes());
    v.extend(values);
    v
}

/// Two 2x3 images whose bytes cover 0, 255 and values in between.
pub const PIXELS: [u8; 12] = [0, 1, 2, 127, 128, 255, 255, 254, 64, 32, 16, 8];

pub fn valid_pair() -> (Vec<u8>, Vec<u8>) {
    (
        images(IDX_IMAGES_MAGIC, [2, 2, 3], &PIXELS),
        labels(IDX_LABELS_MAGIC, 2, &[7, 3]),
    )
}
