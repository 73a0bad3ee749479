//! Channel tokenization: two-significant-digit quantization, the channel
//! vocabulary, and assembly of multi-domain sequences.

mod features;
mod sequence;
mod vocab;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub use features::FeatureMap;
pub use sequence::{assemble_sequence, SequenceExample, SequenceLayout, TokenGrid};
pub use vocab::{build_vocabulary, VocabEntry, Vocabulary};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;

/// Number of reserved ids preceding the channel entries.
pub const NUM_SPECIAL: usize = 5;

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

/// Rounds one real to two significant decimal digits, ties to even.
///
/// Formatting rounds the exact binary value, so the result is the nearest
/// double to the shortest two-digit decimal.
pub fn quantize_component(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let s = format!("{x:.1e}");
    s.parse().expect("formatted float parses")
}

/// Quantizes real and imaginary parts independently.
pub fn quantize(value: Complex64) -> Result<Complex64> {
    if !value.re.is_finite() || !value.im.is_finite() {
        return Err(Error::NonFinite(format!("cannot quantize {value}")));
    }
    Ok(Complex64::new(quantize_component(value.re), quantize_component(value.im)))
}
