//! Padded mini-batches.

use crate::error::{Result, WrdError};
use crate::numerics::SeqLayout;
use crate::textdata::PAD;

/// Token ids of several sentences padded with `PAD` to the longest one.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub layout: SeqLayout,
}

impl Batch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(WrdError::Input("empty batch".into()));
        }
        let layout = SeqLayout::new(seqs.iter().map(|s| s.as_ref().len()).collect())?;
        let mut ids = Vec::with_capacity(layout.rows());
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, layout.max_len - s.len()));
        }
        Ok(Batch { ids, layout })
    }

    pub fn single(ids: &[usize]) -> Result<Self> {
        Self::new(&[ids])
    }

    pub fn size(&self) -> usize {
        self.layout.batch()
    }

    /// Position of each row within its sentence.
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.layout.rows()).map(|r| r % self.layout.max_len)
    }
}
