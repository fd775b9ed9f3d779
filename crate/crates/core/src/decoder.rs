//! Causal transformer decoder over interleaved text and visual prompts,
//! with a split point between any two layers.

use std::sync::atomic::{AtomicUsize, Ordering};

use numkit::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention, prefixed, prefixed_mut, FeedForward, Linear, Module, Norm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab: usize,
    /// Visual prompts per image.
    pub prompts: usize,
    /// Layer boundary where the completion module reads and writes; `None`
    /// means `layers / 2`.
    pub insert_layer: Option<usize>,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            width: 64,
            heads: 4,
            vocab: 0,
            prompts: 8,
            insert_layer: None,
            max_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn insert_layer(&self) -> Result<usize> {
        let l = match self.insert_layer {
            Some(l) => l,
            None if self.layers % 2 == 0 => self.layers / 2,
            None => {
                return Err(Error::Config(format!(
                    "default insert layer needs an even layer count, got {}",
                    self.layers
                )))
            }
        };
        if l == 0 || l >= self.layers {
            return Err(Error::Layer {
                layer: l,
                reason: format!("insert layer must lie in 1..{}", self.layers),
            });
        }
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.vocab == 0 || self.prompts == 0 || self.max_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible into {} heads",
                self.width, self.heads
            )));
        }
        self.insert_layer().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Text(Vec<usize>),
    Image(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedSequence {
    pub segments: Vec<Segment>,
}

impl MixedSequence {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn text_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => t.len(),
                Segment::Image(_) => 0,
            })
            .sum()
    }

    /// Image indices in segment order.
    pub fn images(&self) -> Vec<usize> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Image(i) => Some(*i),
                Segment::Text(_) => None,
            })
            .collect()
    }

    /// Assembled length with `k` prompts per image.
    pub fn len(&self, k: usize) -> usize {
        self.text_len() + k * self.images().len()
    }

    /// Appends text tokens, merging with a trailing text segment.
    pub fn push_text(&mut self, ids: &[usize]) {
        if let Some(Segment::Text(t)) = self.segments.last_mut() {
            t.extend_from_slice(ids);
        } else {
            self.segments.push(Segment::Text(ids.to_vec()));
        }
    }
}

/// What occupies each assembled position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    Token(usize),
    Slot { image: usize, k: usize },
}

/// Where each image's prompts sit in the assembled sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotMap {
    /// `(image index, first row, row count)` in segment order.
    pub ranges: Vec<(usize, usize, usize)>,
    pub len: usize,
}

impl SlotMap {
    pub fn range(&self, image: usize) -> Option<(usize, usize)> {
        self.ranges.iter().find(|r| r.0 == image).map(|r| (r.1, r.2))
    }

    pub fn is_slot(&self, row: usize) -> bool {
        self.ranges.iter().any(|&(_, s, n)| row >= s && row < s + n)
    }

    /// Checks that ranges are in bounds and pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut spans: Vec<(usize, usize)> = self.ranges.iter().map(|r| (r.1, r.1 + r.2)).collect();
        spans.sort_unstable();
        for (i, &(s, e)) in spans.iter().enumerate() {
            if e > self.len || s >= e {
                return Err(Error::Sequence(format!("slot range {s}..{e} outside 0..{}", self.len)));
            }
            if i > 0 && spans[i - 1].1 > s {
                return Err(Error::Sequence(format!("slot ranges overlap at row {s}")));
            }
        }
        Ok(())
    }
}

pub struct Assembled {
    pub hidden: Var,
    pub slots: SlotMap,
    pub layout: Vec<Position>,
}

/// Hidden states after `layer` decoder blocks.
#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    pub layer: usize,
    pub hidden: Var,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm_attn: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm_ff: Norm,
    pub ff: FeedForward,
}

impl Block {
    fn new<R: Rng + ?Sized>(d: usize, layers: usize, rng: &mut R) -> Self {
        let out_gain = 1.0 / (2.0 * layers as f64).sqrt();
        Self {
            norm_attn: Norm::new(d),
            qkv: Linear::new(d, 3 * d, rng),
            proj: Linear::scaled(d, d, out_gain, rng),
            norm_ff: Norm::new(d),
            ff: FeedForward::new(d, 4 * d, out_gain, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
        let d = tape.shape(x)[1];
        let n = self.norm_attn.forward(tape, x)?;
        let qkv = self.qkv.forward(tape, n)?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, d)?;
        let v = tape.slice_cols(qkv, 2 * d, d)?;
        let (a, _) = attention(tape, q, k, v, heads, true)?;
        let a = self.proj.forward(tape, a)?;
        let x = tape.add(x, a)?;
        let n = self.norm_ff.forward(tape, x)?;
        let f = self.ff.forward(tape, n)?;
        Ok(tape.add(x, f)?)
    }
}

impl Module for Block {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("norm_attn", self.norm_attn.params());
        v.extend(prefixed("qkv", self.qkv.params()));
        v.extend(prefixed("proj", self.proj.params()));
        v.extend(prefixed("norm_ff", self.norm_ff.params()));
        v.extend(prefixed("ff", self.ff.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("norm_attn", self.norm_attn.params_mut());
        v.extend(prefixed_mut("qkv", self.qkv.params_mut()));
        v.extend(prefixed_mut("proj", self.proj.params_mut()));
        v.extend(prefixed_mut("norm_ff", self.norm_ff.params_mut()));
        v.extend(prefixed_mut("ff", self.ff.params_mut()));
        v
    }
}

/// How many times each block has executed.
#[derive(Debug, Default)]
pub struct LayerCounters(Vec<AtomicUsize>);

impl LayerCounters {
    fn new(n: usize) -> Self {
        Self((0..n).map(|_| AtomicUsize::new(0)).collect())
    }

    pub fn get(&self) -> Vec<usize> {
        self.0.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset(&self) {
        self.0.iter().for_each(|c| c.store(0, Ordering::Relaxed));
    }

    fn bump(&self, layer: usize) {
        self.0[layer].fetch_add(1, Ordering::Relaxed);
    }
}

impl Clone for LayerCounters {
    fn clone(&self) -> Self {
        Self(self.0.iter().map(|c| AtomicUsize::new(c.load(Ordering::Relaxed))).collect())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: ModelConfig,
    pub tokens: Tensor,
    pub positions: Tensor,
    pub blocks: Vec<Block>,
    pub norm_out: Norm,
    pub head: Linear,
    pub counters: LayerCounters,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        Ok(Self {
            tokens: Tensor::randn(&[config.vocab, d], 1.0, rng),
            positions: Tensor::randn(&[config.max_len, d], 0.1, rng),
            blocks: (0..config.layers).map(|_| Block::new(d, config.layers, rng)).collect(),
            norm_out: Norm::new(d),
            head: Linear::new(d, config.vocab, rng),
            counters: LayerCounters::new(config.layers),
            config,
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Builds `H⁰`: token embeddings and image prompts in segment order,
    /// plus learned position codes on every row.
    ///
    /// `prompts[j]` holds the `[K, d]` prompts for image index `j`.
    pub fn assemble(&self, tape: &mut Tape, seq: &MixedSequence, prompts: &[Var]) -> Result<Assembled> {
        let k = self.config.prompts;
        let d = self.config.width;
        let mut parts = Vec::with_capacity(seq.segments.len());
        let mut layout = Vec::new();
        let mut ranges = Vec::new();
        let table = tape.param(&self.tokens);
        for seg in &seq.segments {
            match seg {
                Segment::Text(ids) if ids.is_empty() => {}
                Segment::Text(ids) => {
                    if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab) {
                        return Err(Error::Sequence(format!("token id {bad} outside vocabulary")));
                    }
                    parts.push(tape.gather_rows(table, ids)?);
                    layout.extend(ids.iter().map(|&t| Position::Token(t)));
                }
                Segment::Image(j) => {
                    let p = *prompts
                        .get(*j)
                        .ok_or_else(|| Error::Sequence(format!("no prompts for image {j}")))?;
                    let shape = tape.shape(p);
                    if shape != [k, d] {
                        return Err(Error::Sequence(format!(
                            "image {j} prompts have shape {shape:?}, expected [{k}, {d}]"
                        )));
                    }
                    if ranges.iter().any(|r: &(usize, usize, usize)| r.0 == *j) {
                        return Err(Error::Sequence(format!("image {j} appears twice")));
                    }
                    ranges.push((*j, layout.len(), k));
                    layout.extend((0..k).map(|k| Position::Slot { image: *j, k }));
                    parts.push(p);
                }
            }
        }
        let n = layout.len();
        if n == 0 {
            return Err(Error::Sequence("empty sequence".into()));
        }
        if n > self.config.max_len {
            return Err(Error::Sequence(format!(
                "sequence of {n} exceeds max length {}",
                self.config.max_len
            )));
        }
        let body = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let pos_table = tape.param(&self.positions);
        let pos = tape.slice_rows(pos_table, 0, n)?;
        let hidden = tape.add(body, pos)?;
        Ok(Assembled {
            hidden,
            slots: SlotMap { ranges, len: n },
            layout,
        })
    }

    /// Runs blocks `from..to` on `state`.
    pub fn forward_range(&self, tape: &mut Tape, state: LayerState, to: usize) -> Result<LayerState> {
        if to > self.layers() || to < state.layer {
            return Err(Error::Layer {
                layer: to,
                reason: format!("cannot run from layer {} to {to} of {}", state.layer, self.layers()),
            });
        }
        let mut h = state.hidden;
        for l in state.layer..to {
            self.counters.bump(l);
            h = self.blocks[l].forward(tape, h, self.config.heads)?;
        }
        Ok(LayerState { layer: to, hidden: h })
    }

    pub fn forward_to(&self, tape: &mut Tape, h0: Var, layer: usize) -> Result<LayerState> {
        self.forward_range(tape, LayerState { layer: 0, hidden: h0 }, layer)
    }

    /// Remaining blocks, final norm and vocabulary head.
    pub fn forward_from(&self, tape: &mut Tape, state: LayerState, start: usize) -> Result<Var> {
        if state.layer != start {
            return Err(Error::Layer {
                layer: start,
                reason: format!("state is at layer {}", state.layer),
            });
        }
        let top = self.forward_range(tape, state, self.layers())?;
        self.readout(tape, top.hidden)
    }

    pub fn readout(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let h = self.norm_out.forward(tape, hidden)?;
        self.head.forward(tape, h)
    }

    pub fn forward(&self, tape: &mut Tape, h0: Var) -> Result<Var> {
        let s = self.forward_to(tape, h0, 0)?;
        self.forward_from(tape, s, 0)
    }
}

impl Module for Decoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("tokens".to_string(), &self.tokens), ("positions".to_string(), &self.positions)];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("block{i}"), b.params()));
        }
        v.extend(prefixed("norm_out", self.norm_out.params()));
        v.extend(prefixed("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![
            ("tokens".to_string(), &mut self.tokens),
            ("positions".to_string(), &mut self.positions),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("block{i}"), b.params_mut()));
        }
        v.extend(prefixed_mut("norm_out", self.norm_out.params_mut()));
        v.extend(prefixed_mut("head", self.head.params_mut()));
        v
    }
}

/// Mean next-token cross-entropy over rows where `mask` is set.
pub fn lm_loss(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    Ok(tape.cross_entropy(logits, targets, mask)?)
}
