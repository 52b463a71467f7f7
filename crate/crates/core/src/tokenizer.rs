//! Fixed character vocabulary: three specials followed by 67 printable symbols.

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

const PRINTABLE: &str = "\n =>:0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
const FIRST_PRINTABLE: u32 = 3;

pub const VOCAB_SIZE: usize = 70;

/// Character-level vocabulary: PAD, BOS, EOS, then the printable symbols in order.
#[derive(Clone, Debug)]
pub struct Vocab {
    to_id: [Option<u32>; 128],
    symbols: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let symbols: Vec<char> = PRINTABLE.chars().collect();
        debug_assert_eq!(symbols.len() + FIRST_PRINTABLE as usize, VOCAB_SIZE);
        let mut to_id = [None; 128];
        for (i, &c) in symbols.iter().enumerate() {
            to_id[c as usize] = Some(FIRST_PRINTABLE + i as u32);
        }
        Vocab { to_id, symbols }
    }

    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        self.to_id.get(c as usize).copied().flatten()
    }

    pub fn symbol(&self, id: u32) -> Option<char> {
        id.checked_sub(FIRST_PRINTABLE)
            .and_then(|i| self.symbols.get(i as usize).copied())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.char_indices()
            .map(|(offset, ch)| self.id_of(ch).ok_or(Error::UnknownChar { ch, offset }))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        ids.iter()
            .map(|&id| self.symbol(id).ok_or(Error::InvalidToken(id)))
            .collect()
    }
}
