//! Frozen visual prompt generators: a patch encoder feeding either a
//! query resampler or a per-cell linear projector.

use numkit::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention, prefixed, prefixed_mut, FeedForward, Linear, Module, Norm};
use crate::scene::Raster;

/// Image features on a `P×P` patch grid, one row per cell in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub side: usize,
    pub features: Tensor,
}

impl FeatureGrid {
    pub fn new(side: usize, features: Tensor) -> Result<Self> {
        let (r, _) = features.dims2()?;
        if r != side * side {
            return Err(Error::Invalid(format!("{r} feature rows for a {side}x{side} grid")));
        }
        Ok(Self { side, features })
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }
}

/// Frozen linear patch embedding plus a fixed 2-D sinusoidal position code.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub patch: u32,
    pub side: usize,
    pub proj: Tensor,
    pub pos: Tensor,
}

impl PatchEncoder {
    pub fn new<R: Rng + ?Sized>(image: u32, patch: u32, width: usize, rng: &mut R) -> Result<Self> {
        if patch == 0 || image % patch != 0 {
            return Err(Error::PatchMismatch {
                width: image,
                height: image,
                patch,
            });
        }
        let side = (image / patch) as usize;
        let d_in = 3 * (patch * patch) as usize;
        let proj = Tensor::randn(&[d_in, width], 2.0 / (d_in as f64).sqrt(), rng);
        Ok(Self {
            patch,
            side,
            proj,
            pos: position_code(side, width),
        })
    }

    /// Patch pixels are scaled to `[-0.5, 0.5]` before projection.
    pub fn encode(&self, raster: &Raster) -> Result<FeatureGrid> {
        let p = self.patch;
        let side = self.side as u32;
        if raster.width != p * side || raster.height != p * side {
            return Err(Error::PatchMismatch {
                width: raster.width,
                height: raster.height,
                patch: p,
            });
        }
        let d_in = self.proj.shape()[0];
        let mut patches = Vec::with_capacity(self.side * self.side * d_in);
        for gy in 0..side {
            for gx in 0..side {
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        patches.extend(raster.pixel(x, y).iter().map(|&c| c as f64 / 255.0 - 0.5));
                    }
                }
            }
        }
        let patches = Tensor::new(vec![self.side * self.side, d_in], patches)?;
        let mut tape = Tape::new();
        let x = tape.constant(patches);
        let w = tape.constant(self.proj.clone());
        let pos = tape.constant(self.pos.clone());
        let f = tape.matmul(x, w)?;
        let f = tape.add(f, pos)?;
        FeatureGrid::new(self.side, tape.tensor(f))
    }
}

impl Module for PatchEncoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("proj".into(), &self.proj), ("pos".into(), &self.pos)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("proj".into(), &mut self.proj), ("pos".into(), &mut self.pos)]
    }
}

/// Half the channels encode the row, half the column, each with
/// sin/cos pairs at geometric frequencies.
fn position_code(side: usize, width: usize) -> Tensor {
    let half = width / 2;
    let pairs = (half / 2).max(1);
    let mut data = vec![0.0; side * side * width];
    for gy in 0..side {
        for gx in 0..side {
            let row = &mut data[(gy * side + gx) * width..][..width];
            for (axis, coord) in [(0, gy), (1, gx)] {
                for i in 0..pairs {
                    let freq = 1.0 / 10f64.powf(i as f64 / pairs as f64);
                    let a = coord as f64 * freq;
                    let base = axis * half + 2 * i;
                    if base < width {
                        row[base] = 0.5 * a.sin();
                    }
                    if base + 1 < width {
                        row[base + 1] = 0.5 * a.cos();
                    }
                }
            }
        }
    }
    Tensor::new(vec![side * side, width], data).expect("shape matches")
}

/// Per cross-attention layer, each query's weights over the grid cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub side: usize,
    pub queries: usize,
    /// `maps[layer]` is `[queries × side²]`, row-major.
    pub maps: Vec<Vec<f64>>,
}

impl AttentionTrace {
    pub fn layers(&self) -> usize {
        self.maps.len()
    }

    pub fn map(&self, layer: usize, query: usize) -> &[f64] {
        let cells = self.side * self.side;
        &self.maps[layer][query * cells..(query + 1) * cells]
    }
}

/// Attention averaged over layers and queries, `side²` values summing to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalMap {
    pub side: usize,
    pub values: Vec<f64>,
}

impl GlobalMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }
}

pub fn avg_attention(trace: &AttentionTrace) -> Result<GlobalMap> {
    let cells = trace.side * trace.side;
    let n = trace.layers() * trace.queries;
    if n == 0 {
        return Err(Error::Invalid("empty attention trace".into()));
    }
    let mut values = vec![0.0; cells];
    for layer in &trace.maps {
        for (i, w) in layer.iter().enumerate() {
            values[i % cells] += w;
        }
    }
    values.iter_mut().for_each(|v| *v /= n as f64);
    Ok(GlobalMap { side: trace.side, values })
}

#[derive(Clone, Debug)]
pub struct ResamplerBlock {
    pub norm_q: Norm,
    pub norm_kv: Norm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm_self: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm_ff: Norm,
    pub ff: FeedForward,
}

impl ResamplerBlock {
    fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            norm_q: Norm::new(d),
            norm_kv: Norm::new(d),
            wq: Linear::new(d, d, rng),
            wk: Linear::new(d, d, rng),
            wv: Linear::new(d, d, rng),
            wo: Linear::scaled(d, d, 0.5, rng),
            norm_self: Norm::new(d),
            qkv: Linear::new(d, 3 * d, rng),
            proj: Linear::scaled(d, d, 0.5, rng),
            norm_ff: Norm::new(d),
            ff: FeedForward::new(d, 2 * d, 0.5, rng),
        }
    }
}

impl Module for ResamplerBlock {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("norm_q", self.norm_q.params());
        v.extend(prefixed("norm_kv", self.norm_kv.params()));
        v.extend(prefixed("wq", self.wq.params()));
        v.extend(prefixed("wk", self.wk.params()));
        v.extend(prefixed("wv", self.wv.params()));
        v.extend(prefixed("wo", self.wo.params()));
        v.extend(prefixed("norm_self", self.norm_self.params()));
        v.extend(prefixed("qkv", self.qkv.params()));
        v.extend(prefixed("proj", self.proj.params()));
        v.extend(prefixed("norm_ff", self.norm_ff.params()));
        v.extend(prefixed("ff", self.ff.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("norm_q", self.norm_q.params_mut());
        v.extend(prefixed_mut("norm_kv", self.norm_kv.params_mut()));
        v.extend(prefixed_mut("wq", self.wq.params_mut()));
        v.extend(prefixed_mut("wk", self.wk.params_mut()));
        v.extend(prefixed_mut("wv", self.wv.params_mut()));
        v.extend(prefixed_mut("wo", self.wo.params_mut()));
        v.extend(prefixed_mut("norm_self", self.norm_self.params_mut()));
        v.extend(prefixed_mut("qkv", self.qkv.params_mut()));
        v.extend(prefixed_mut("proj", self.proj.params_mut()));
        v.extend(prefixed_mut("norm_ff", self.norm_ff.params_mut()));
        v.extend(prefixed_mut("ff", self.ff.params_mut()));
        v
    }
}

/// Learned queries refined by alternating cross-attention over the grid,
/// self-attention among queries and a feed-forward layer.
#[derive(Clone, Debug)]
pub struct Resampler {
    pub queries: Tensor,
    pub blocks: Vec<ResamplerBlock>,
    pub heads: usize,
    pub norm_out: Norm,
    pub out: Linear,
}

/// Output of one resampler pass on the tape.
pub struct Resampled {
    pub prompts: Var,
    /// Head-averaged cross-attention per block, `[K, side²]`.
    pub cross: Vec<Var>,
}

impl Resampler {
    pub fn new<R: Rng + ?Sized>(k: usize, d: usize, blocks: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if k == 0 {
            return Err(Error::Invalid("resampler needs at least one query".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible into {heads} heads")));
        }
        Ok(Self {
            queries: Tensor::randn(&[k, d], 1.0, rng),
            blocks: (0..blocks).map(|_| ResamplerBlock::new(d, rng)).collect(),
            heads,
            norm_out: Norm::new(d),
            out: Linear::new(d, d, rng),
        })
    }

    pub fn num_queries(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.queries.shape()[1]
    }

    /// Runs the resampler on `grid` starting from the query rows `queries`.
    pub fn forward(&self, tape: &mut Tape, grid: Var, queries: Var) -> Result<Resampled> {
        let qs = tape.shape(queries).to_vec();
        if qs.len() != 2 {
            return Err(Error::Invalid("queries must be a [K, d] matrix".into()));
        }
        let d = self.width();
        if qs[1] != d {
            return Err(Error::Width {
                op: "resample",
                expected: d,
                got: qs[1],
            });
        }
        let gw = tape.shape(grid)[1];
        if gw != d {
            return Err(Error::Width {
                op: "resample",
                expected: d,
                got: gw,
            });
        }
        let mut h = queries;
        let mut cross = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let qn = b.norm_q.forward(tape, h)?;
            let kv = b.norm_kv.forward(tape, grid)?;
            let q = b.wq.forward(tape, qn)?;
            let k = b.wk.forward(tape, kv)?;
            let v = b.wv.forward(tape, kv)?;
            let (a, probs) = attention(tape, q, k, v, self.heads, false)?;
            cross.push(mean_heads(tape, &probs)?);
            let a = b.wo.forward(tape, a)?;
            h = tape.add(h, a)?;

            let sn = b.norm_self.forward(tape, h)?;
            let qkv = b.qkv.forward(tape, sn)?;
            let sq = tape.slice_cols(qkv, 0, d)?;
            let sk = tape.slice_cols(qkv, d, d)?;
            let sv = tape.slice_cols(qkv, 2 * d, d)?;
            let (s, _) = attention(tape, sq, sk, sv, self.heads, false)?;
            let s = b.proj.forward(tape, s)?;
            h = tape.add(h, s)?;

            let fnorm = b.norm_ff.forward(tape, h)?;
            let f = b.ff.forward(tape, fnorm)?;
            h = tape.add(h, f)?;
        }
        let h = self.norm_out.forward(tape, h)?;
        let prompts = self.out.forward(tape, h)?;
        Ok(Resampled { prompts, cross })
    }

    /// Tape-free pass with the resampler's own queries.
    pub fn resample(&self, grid: &FeatureGrid) -> Result<(Tensor, AttentionTrace)> {
        self.resample_with(grid, &self.queries)
    }

    pub fn resample_with(&self, grid: &FeatureGrid, queries: &Tensor) -> Result<(Tensor, AttentionTrace)> {
        let mut tape = Tape::new();
        let g = tape.constant(grid.features.clone());
        let q = tape.constant(queries.clone());
        let out = self.forward(&mut tape, g, q)?;
        let trace = trace_of(&tape, &out, grid.side);
        Ok((tape.tensor(out.prompts), trace))
    }
}

/// Reads the cross-attention maps recorded during a forward pass.
pub fn trace_of(tape: &Tape, out: &Resampled, side: usize) -> AttentionTrace {
    let queries = out.cross.first().map(|&v| tape.shape(v)[0]).unwrap_or(0);
    AttentionTrace {
        side,
        queries,
        maps: out.cross.iter().map(|&v| tape.value(v).to_vec()).collect(),
    }
}

fn mean_heads(tape: &mut Tape, probs: &[Var]) -> Result<Var> {
    if probs.len() == 1 {
        return Ok(probs[0]);
    }
    let mut acc = probs[0];
    for &p in &probs[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, 1.0 / probs.len() as f64))
}

impl Module for Resampler {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("queries".to_string(), &self.queries)];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("block{i}"), b.params()));
        }
        v.extend(prefixed("norm_out", self.norm_out.params()));
        v.extend(prefixed("out", self.out.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("queries".to_string(), &mut self.queries)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("block{i}"), b.params_mut()));
        }
        v.extend(prefixed_mut("norm_out", self.norm_out.params_mut()));
        v.extend(prefixed_mut("out", self.out.params_mut()));
        v
    }
}

/// One prompt per grid cell: a linear map of that cell's feature.
#[derive(Clone, Debug)]
pub struct LinearVpg {
    pub proj: Linear,
}

impl LinearVpg {
    pub fn new<R: Rng + ?Sized>(d_v: usize, d: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(d_v, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, grid: Var) -> Result<Var> {
        let w = tape.shape(grid)[1];
        if w != self.proj.d_in() {
            return Err(Error::Width {
                op: "linear_vpg",
                expected: self.proj.d_in(),
                got: w,
            });
        }
        self.proj.forward(tape, grid)
    }

    pub fn prompts(&self, grid: &FeatureGrid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = tape.constant(grid.features.clone());
        let out = self.forward(&mut tape, g)?;
        Ok(tape.tensor(out))
    }
}

impl Module for LinearVpg {
    fn params(&self) -> Vec<(String, &Tensor)> {
        prefixed("proj", self.proj.params())
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("proj", self.proj.params_mut())
    }
}

/// The generator the backbone was built with.
#[derive(Clone, Debug)]
pub enum Vpg {
    Resampler(Resampler),
    Linear(LinearVpg),
}

impl Vpg {
    /// Prompts per image.
    pub fn prompts_per_image(&self, cells: usize) -> usize {
        match self {
            Vpg::Resampler(r) => r.num_queries(),
            Vpg::Linear(_) => cells,
        }
    }

    /// Visual prompts for one grid, plus the attention trace when the
    /// generator has one.
    pub fn forward(&self, tape: &mut Tape, grid: Var) -> Result<(Var, Option<Vec<Var>>)> {
        match self {
            Vpg::Resampler(r) => {
                let q = tape.param(&r.queries);
                let out = r.forward(tape, grid, q)?;
                Ok((out.prompts, Some(out.cross)))
            }
            Vpg::Linear(l) => Ok((l.forward(tape, grid)?, None)),
        }
    }

    pub fn as_resampler(&self) -> Option<&Resampler> {
        match self {
            Vpg::Resampler(r) => Some(r),
            Vpg::Linear(_) => None,
        }
    }
}

impl Module for Vpg {
    fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Vpg::Resampler(r) => prefixed("resampler", r.params()),
            Vpg::Linear(l) => prefixed("linear_vpg", l.params()),
        }
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Vpg::Resampler(r) => prefixed_mut("resampler", r.params_mut()),
            Vpg::Linear(l) => prefixed_mut("linear_vpg", l.params_mut()),
        }
    }
}
