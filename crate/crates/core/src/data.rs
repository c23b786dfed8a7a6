//! Byte-level token windows over a plain-bytes corpus (vocab 256).

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TokenDataset {
    windows: Vec<Vec<u8>>,
    window_len: usize,
}

impl TokenDataset {
    /// Cuts contiguous, non-overlapping windows of `window_len + 1` bytes
    /// (the +1 supplies next-token targets), starting at `start_window`.
    pub fn from_bytes(
        corpus: &[u8],
        window_len: usize,
        start_window: usize,
        max_windows: usize,
    ) -> Result<Self> {
        if window_len == 0 {
            return Err(Error::InvalidArgument("window_len must be >= 1".into()));
        }
        let stride = window_len + 1;
        let available = corpus.len() / stride;
        if start_window >= available {
            return Err(Error::InvalidArgument(format!(
                "corpus of {} bytes holds {} windows of {} bytes; start {} out of range",
                corpus.len(),
                available,
                stride,
                start_window
            )));
        }
        let end = (start_window + max_windows).min(available);
        let windows = (start_window..end)
            .map(|w| corpus[w * stride..(w + 1) * stride].to_vec())
            .collect();
        Ok(TokenDataset { windows, window_len })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// (inputs, targets) for window `i`: targets are inputs shifted by one.
    pub fn window(&self, i: usize) -> (Vec<usize>, Vec<usize>) {
        let w = &self.windows[i];
        let inputs = w[..self.window_len].iter().map(|&b| b as usize).collect();
        let targets = w[1..].iter().map(|&b| b as usize).collect();
        (inputs, targets)
    }
}
