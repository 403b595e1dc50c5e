//! Line-aware tokenization, vocabulary, length caps and segment arithmetic.

mod encode;
mod tokenizer;
mod vocab;

pub use encode::{
    check_m_len, correspondence_apply, detokenize, encode, segment, segment_ranges, EncodedSample, MAX_STATEMENTS,
    SEGMENT_LEN,
};
pub use tokenizer::{tokenize_line, CTokenizer, LineTokenizer};
pub use vocab::{Vocab, BOS, CLS, EOS, MASK, NUM_RESERVED, PAD, RESERVED, UNK};
