use crate::data::CHANNELS;
use crate::tensor::rdft_bins;

use super::ModelError;

/// Architecture hyperparameters.
///
/// Defaults: 4 tokens of width 1, three blocks per tower, a two-layer
/// decoder, 128-day lookback and horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HidformerConfig {
    /// Number of input tokens (segments).
    pub n_t: usize,
    /// Token embedding width.
    pub n_e: usize,
    /// Blocks per tower.
    pub n_b: usize,
    /// Decoder layers.
    pub n_d: usize,
    pub t_x: usize,
    pub t_y: usize,
    /// Hidden width of each block's feed-forward sublayer.
    pub d_ff: usize,
    /// Adjacent tokens fused by each merge.
    pub merge_factor: usize,
    pub seed: u64,
}

impl Default for HidformerConfig {
    fn default() -> Self {
        Self {
            n_t: 4,
            n_e: 1,
            n_b: 3,
            n_d: 2,
            t_x: 128,
            t_y: 128,
            d_ff: 4,
            merge_factor: 2,
            seed: 0,
        }
    }
}

impl HidformerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_t", self.n_t),
            ("n_e", self.n_e),
            ("n_b", self.n_b),
            ("n_d", self.n_d),
            ("t_x", self.t_x),
            ("t_y", self.t_y),
            ("d_ff", self.d_ff),
            ("merge_factor", self.merge_factor),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !self.t_x.is_multiple_of(self.n_t) {
            return Err(ModelError::Config(format!(
                "n_t = {} does not divide t_x = {}",
                self.n_t, self.t_x
            )));
        }
        Ok(())
    }

    /// Time steps per token.
    pub fn segment_len(&self) -> usize {
        self.t_x / self.n_t
    }

    /// Flattened width of one raw segment.
    pub fn time_features(&self) -> usize {
        self.segment_len() * CHANNELS
    }

    /// Width of one segment's packed spectra across all channels.
    pub fn freq_features(&self) -> usize {
        2 * rdft_bins(self.segment_len()) * CHANNELS
    }

    /// Token count leaving each block after its merge.
    pub fn block_tokens(&self) -> Vec<usize> {
        let mut n = self.n_t;
        (0..self.n_b)
            .map(|_| {
                if n > 1 {
                    n = n.div_ceil(self.merge_factor);
                }
                n
            })
            .collect()
    }

    /// Length of one tower's concatenated block outputs.
    pub fn tower_output_len(&self) -> usize {
        self.block_tokens().iter().sum::<usize>() * self.n_e
    }

    pub fn decoder_input(&self) -> usize {
        2 * self.tower_output_len()
    }

    pub fn decoder_hidden(&self) -> usize {
        (2 * self.t_y).max(64)
    }
}
