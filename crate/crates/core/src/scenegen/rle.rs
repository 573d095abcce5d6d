//! Run-length encoding of binary masks over row-major bits.
//!
//! Counts alternate 0-runs and 1-runs, always starting with the 0-run (which
//! may be empty), the same convention COCO uses for uncompressed RLE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// Mask height and width; bits run row-major.
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(bits: &[bool], h: usize, w: usize) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Scene(format!(
                "rle encode: {} bits for {h}x{w} mask",
                bits.len()
            )));
        }
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for b in bits {
            if *b == current {
                run += 1;
            } else {
                counts.push(run);
                current = *b;
                run = 1;
            }
        }
        counts.push(run);
        Ok(Self { size: [h, w], counts })
    }

    pub fn decode(&self) -> Result<Vec<bool>> {
        let numel = self.size[0] * self.size[1];
        let total: u64 = self.counts.iter().map(|c| *c as u64).sum();
        if total != numel as u64 {
            return Err(Error::Scene(format!(
                "rle decode: runs sum to {total}, mask is {}x{}",
                self.size[0], self.size[1]
            )));
        }
        let mut bits = Vec::with_capacity(numel);
        let mut value = false;
        for c in &self.counts {
            bits.extend(std::iter::repeat(value).take(*c as usize));
            value = !value;
        }
        Ok(bits)
    }
}
