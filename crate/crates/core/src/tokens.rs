//! Reserved token ids shared by the policy vocabulary and the task encoders.
//!
//! The first four ids are reserved in every vocabulary: padding, begin/end of
//! sequence, and the answer delimiter that separates reasoning tokens from the
//! answer span a verifier grades.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Answer delimiter: the verifier grades the span between the last `ANS`
/// and the following `EOS`.
pub const ANS: usize = 3;

/// Decimal digits occupy ids `DIGIT_BASE..DIGIT_BASE + 10`.
pub const DIGIT_BASE: usize = 4;
pub const PLUS: usize = 14;
pub const MOD: usize = 15;
/// Task marker: digit-sum prompts.
pub const DSUM: usize = 16;
/// Task marker: reversal prompts.
pub const REV: usize = 17;

/// Smallest vocabulary that can express every task encoding.
pub const MIN_TASK_VOCAB: usize = 18;

/// Token id for a single decimal digit.
pub fn digit(d: u32) -> usize {
    debug_assert!(d < 10);
    DIGIT_BASE + d as usize
}

/// Encode a non-negative integer as decimal digit tokens, most significant first.
pub fn encode_number(mut n: u64) -> Vec<usize> {
    if n == 0 {
        return vec![digit(0)];
    }
    let mut digits = Vec::new();
    while n > 0 {
        digits.push(digit((n % 10) as u32));
        n /= 10;
    }
    digits.reverse();
    digits
}
