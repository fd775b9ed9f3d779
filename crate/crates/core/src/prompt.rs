//! Token layout shared by training and evaluation.
//!
//! An instance becomes `<bos>`, then each segment in order (text words, or
//! `<img>` followed by that image's prompt slots), then `<inst>`, the task
//! instruction and `<resp>`. The response follows and ends with `<eos>`.

use serde::{Deserialize, Serialize};

use crate::decoder::{MixedSequence, Segment};
use crate::tokenizer::{Vocab, BOS, EOS, IMG, INST, RESP};

pub const DIFFERENCE_INSTRUCTION: &str = "describe the difference between the two images";
pub const CAPTION_INSTRUCTION: &str = "write a short caption for this image";

/// One piece of a task instance before tokenisation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Piece {
    Text(String),
    /// Index into the instance's image list.
    Image(usize),
}

pub fn instruction_sequence(vocab: &Vocab, pieces: &[Piece], instruction: &str) -> MixedSequence {
    let mut seq = MixedSequence::default();
    seq.push_text(&[vocab.special(BOS)]);
    for p in pieces {
        match p {
            Piece::Text(t) => seq.push_text(&vocab.encode(t)),
            Piece::Image(j) => {
                seq.push_text(&[vocab.special(IMG)]);
                seq.segments.push(Segment::Image(*j));
            }
        }
    }
    let mut tail = vec![vocab.special(INST)];
    tail.extend(vocab.encode(instruction));
    tail.push(vocab.special(RESP));
    seq.push_text(&tail);
    seq
}

/// Response ids with the closing `<eos>`.
pub fn response_ids(vocab: &Vocab, text: &str) -> Vec<usize> {
    let mut ids = vocab.encode(text);
    ids.push(vocab.special(EOS));
    ids
}

/// Pieces for `n` images with nothing between them.
pub fn images_only(n: usize) -> Vec<Piece> {
    (0..n).map(Piece::Image).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_of_a_two_image_instruction() {
        let v = Vocab::default_vocab();
        let seq = instruction_sequence(&v, &images_only(2), DIFFERENCE_INSTRUCTION);
        assert_eq!(seq.images(), vec![0, 1]);
        assert_eq!(seq.segments.len(), 5);
        assert_eq!(seq.text_len(), 1 + 2 + 1 + 7 + 1);
        match seq.segments.last().unwrap() {
            Segment::Text(t) => assert_eq!(*t.last().unwrap(), v.special(RESP)),
            Segment::Image(_) => panic!("ends with text"),
        }
    }
}
