//! Visual prompt completion: read the decoder mid-stack, steer a second
//! pass of the frozen generator, and add what it finds back onto the image
//! slots through a zero-initialised projection.

use numkit::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, LayerState, MixedSequence, ModelConfig, SlotMap};
use crate::error::{Error, Result};
use crate::nn::{prefixed, prefixed_mut, Linear, Module};
use crate::vpg::{avg_attention, FeatureGrid, GlobalMap, LinearVpg, PatchEncoder, Resampler, Vpg};

/// Which generator the backbone uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VpgKind {
    Qformer,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub model: ModelConfig,
    pub vpg: VpgKind,
    pub image_size: u32,
    pub patch: u32,
    pub resampler_blocks: usize,
    pub resampler_heads: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            vpg: VpgKind::Qformer,
            image_size: 64,
            patch: 8,
            resampler_blocks: 2,
            resampler_heads: 1,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn grid_side(&self) -> usize {
        (self.image_size / self.patch.max(1)) as usize
    }

    /// Prompts per image implied by the generator choice.
    pub fn prompts_per_image(&self) -> usize {
        match self.vpg {
            VpgKind::Qformer => self.model.prompts,
            VpgKind::Linear => self.grid_side() * self.grid_side(),
        }
    }
}

/// Encoder, generator and decoder: everything that stays frozen while the
/// completion module trains.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub encoder: PatchEncoder,
    pub vpg: Vpg,
    pub decoder: Decoder,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.model.width;
        let encoder = PatchEncoder::new(config.image_size, config.patch, d, &mut rng)?;
        let vpg = match config.vpg {
            VpgKind::Qformer => Vpg::Resampler(Resampler::new(
                config.model.prompts,
                d,
                config.resampler_blocks,
                config.resampler_heads,
                &mut rng,
            )?),
            VpgKind::Linear => Vpg::Linear(LinearVpg::new(d, d, &mut rng)),
        };
        let mut model = config.model.clone();
        model.prompts = config.prompts_per_image();
        let decoder = Decoder::new(model, &mut rng)?;
        let mut b = Self {
            config,
            encoder,
            vpg,
            decoder,
        };
        b.set_trainable(false);
        Ok(b)
    }

    pub fn encode(&self, raster: &crate::scene::Raster) -> Result<FeatureGrid> {
        self.encoder.encode(raster)
    }

    pub fn insert_layer(&self) -> Result<usize> {
        self.decoder.config.insert_layer()
    }

    pub fn resampler(&self) -> Result<&Resampler> {
        self.vpg
            .as_resampler()
            .ok_or_else(|| Error::Config("backbone has no resampler".into()))
    }

    /// Global attention map of the generator's own pass over `grid`.
    pub fn global_map(&self, grid: &FeatureGrid) -> Result<GlobalMap> {
        let (_, trace) = self.resampler()?.resample(grid)?;
        avg_attention(&trace)
    }

    /// Tensors of the generator and decoder that may be unfrozen for
    /// backbone training; the patch encoder is never trained.
    pub fn trainable_parts_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.vpg.params_mut();
        v.extend(prefixed_mut("decoder", self.decoder.params_mut()));
        v
    }
}

impl Module for Backbone {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("encoder", self.encoder.params());
        v.extend(self.vpg.params());
        v.extend(prefixed("decoder", self.decoder.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("encoder", self.encoder.params_mut());
        v.extend(self.vpg.params_mut());
        v.extend(prefixed_mut("decoder", self.decoder.params_mut()));
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Qformer,
    Linear,
    Heuristic,
    Off,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Qformer, Variant::Linear, Variant::Heuristic, Variant::Off];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Qformer => "qformer",
            Variant::Linear => "linear",
            Variant::Heuristic => "heuristic",
            Variant::Off => "off",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Generator the variant runs on.
    pub fn backbone_vpg(self) -> VpgKind {
        match self {
            Variant::Linear => VpgKind::Linear,
            _ => VpgKind::Qformer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionConfig {
    pub variant: Variant,
    /// Zero the guidance projection as well as the reintegration one.
    pub zero_init_both: bool,
    /// Share of least-attended cells pooled by the heuristic variant.
    pub bottom_fraction: f64,
    /// Std of the noise added to the copied query bank.
    pub query_noise: f64,
    pub seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Qformer,
            zero_init_both: true,
            bottom_fraction: 0.25,
            query_noise: 0.01,
            seed: 1,
        }
    }
}

/// Trainable state of the query-based completion.
#[derive(Clone, Debug)]
pub struct VpgcWeights {
    pub queries: Tensor,
    pub guide: Linear,
    pub reintegrate: Linear,
}

impl VpgcWeights {
    pub fn new<R: Rng + ?Sized>(resampler: &Resampler, zero_init_both: bool, noise: f64, rng: &mut R) -> Self {
        let d = resampler.width();
        let mut queries = resampler.queries.clone();
        let k = queries.shape()[0];
        let jitter = Tensor::randn(&[k, d], noise, rng);
        queries.data_mut().iter_mut().zip(jitter.data()).for_each(|(q, j)| *q += j);
        let guide = if zero_init_both { Linear::zeros(d, d) } else { Linear::new(d, d, rng) };
        let mut w = Self {
            queries,
            guide,
            reintegrate: Linear::zeros(d, d),
        };
        w.set_trainable(true);
        w
    }

    /// `K·d + 2(d² + d)`.
    pub fn expected_count(k: usize, d: usize) -> usize {
        k * d + 2 * (d * d + d)
    }
}

impl Module for VpgcWeights {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("queries".to_string(), &self.queries)];
        v.extend(prefixed("guide", self.guide.params()));
        v.extend(prefixed("reintegrate", self.reintegrate.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("queries".to_string(), &mut self.queries)];
        v.extend(prefixed_mut("guide", self.guide.params_mut()));
        v.extend(prefixed_mut("reintegrate", self.reintegrate.params_mut()));
        v
    }
}

/// Completion for a per-cell linear generator: the projected guidance
/// gates a second projection of the raw features.
#[derive(Clone, Debug)]
pub struct LinearCompletion {
    pub guide: Linear,
    pub gate: Linear,
    pub features: Linear,
    pub reintegrate: Linear,
}

impl LinearCompletion {
    pub fn new<R: Rng + ?Sized>(d_v: usize, d: usize, zero_init_both: bool, rng: &mut R) -> Self {
        let guide = if zero_init_both { Linear::zeros(d, d) } else { Linear::new(d, d, rng) };
        let mut gate = Linear::new(d, d, rng);
        // A unit gate bias keeps the product alive while the guidance is zero.
        gate.bias = Tensor::ones(&[d]);
        let mut c = Self {
            guide,
            gate,
            features: Linear::new(d_v, d, rng),
            reintegrate: Linear::zeros(d, d),
        };
        c.set_trainable(true);
        c
    }
}

impl Module for LinearCompletion {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("guide", self.guide.params());
        v.extend(prefixed("gate", self.gate.params()));
        v.extend(prefixed("features", self.features.params()));
        v.extend(prefixed("reintegrate", self.reintegrate.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("guide", self.guide.params_mut());
        v.extend(prefixed_mut("gate", self.gate.params_mut()));
        v.extend(prefixed_mut("features", self.features.params_mut()));
        v.extend(prefixed_mut("reintegrate", self.reintegrate.params_mut()));
        v
    }
}

/// Pools the least-attended cells and projects them onto the image slots.
#[derive(Clone, Debug)]
pub struct HeuristicCompletion {
    pub proj: Linear,
    pub bottom_fraction: f64,
}

impl Module for HeuristicCompletion {
    fn params(&self) -> Vec<(String, &Tensor)> {
        prefixed("proj", self.proj.params())
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("proj", self.proj.params_mut())
    }
}

#[derive(Clone, Debug)]
pub enum Completion {
    Qformer(VpgcWeights),
    Linear(LinearCompletion),
    Heuristic(HeuristicCompletion),
    Off,
}

impl Completion {
    pub fn new(backbone: &Backbone, config: &CompletionConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = backbone.config.model.width;
        Ok(match config.variant {
            Variant::Qformer => Completion::Qformer(VpgcWeights::new(
                backbone.resampler()?,
                config.zero_init_both,
                config.query_noise,
                &mut rng,
            )),
            Variant::Linear => {
                if !matches!(backbone.vpg, Vpg::Linear(_)) {
                    return Err(Error::Config("the linear variant needs a linear-generator backbone".into()));
                }
                Completion::Linear(LinearCompletion::new(d, d, config.zero_init_both, &mut rng))
            }
            Variant::Heuristic => {
                backbone.resampler()?;
                if !(config.bottom_fraction > 0.0 && config.bottom_fraction <= 1.0) {
                    return Err(Error::Config(format!(
                        "bottom_fraction must lie in (0, 1], got {}",
                        config.bottom_fraction
                    )));
                }
                let mut proj = Linear::zeros(d, d);
                proj.set_trainable(true);
                Completion::Heuristic(HeuristicCompletion {
                    proj,
                    bottom_fraction: config.bottom_fraction,
                })
            }
            Variant::Off => Completion::Off,
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            Completion::Qformer(_) => Variant::Qformer,
            Completion::Linear(_) => Variant::Linear,
            Completion::Heuristic(_) => Variant::Heuristic,
            Completion::Off => Variant::Off,
        }
    }
}

impl Module for Completion {
    fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Completion::Qformer(w) => w.params(),
            Completion::Linear(w) => w.params(),
            Completion::Heuristic(w) => w.params(),
            Completion::Off => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Completion::Qformer(w) => w.params_mut(),
            Completion::Linear(w) => w.params_mut(),
            Completion::Heuristic(w) => w.params_mut(),
            Completion::Off => vec![],
        }
    }
}

/// `g = W_g h_N + b_g` from row `row` of a state at `expected_layer`.
pub fn extract_guidance(tape: &mut Tape, guide: &Linear, state: LayerState, expected_layer: usize, row: usize) -> Result<Var> {
    if state.layer != expected_layer {
        return Err(Error::Layer {
            layer: state.layer,
            reason: format!("guidance is read at layer {expected_layer}"),
        });
    }
    let n = tape.shape(state.hidden)[0];
    if row >= n {
        return Err(Error::Sequence(format!("guidance row {row} outside {n} rows")));
    }
    let h = tape.slice_rows(state.hidden, row, 1)?;
    guide.forward(tape, h)
}

/// Adds `g` to every query row.
pub fn condition_queries(tape: &mut Tape, g: Var, queries: Var) -> Result<Var> {
    let (gw, qw) = (tape.shape(g)[tape.shape(g).len() - 1], tape.shape(queries)[1]);
    if tape.value(g).len() != qw {
        return Err(Error::Width {
            op: "condition_queries",
            expected: qw,
            got: gw,
        });
    }
    Ok(tape.add_row(queries, g)?)
}

/// Re-runs the frozen resampler on every grid with the same conditioned
/// queries.
pub fn complete_details(tape: &mut Tape, resampler: &Resampler, grids: &[Var], queries: Var) -> Result<Vec<Var>> {
    grids
        .iter()
        .map(|&g| Ok(resampler.forward(tape, g, queries)?.prompts))
        .collect()
}

/// Adds `W_r·V̄_j + b_r` onto image `j`'s slot rows. Other rows are copied
/// unchanged.
pub fn reintegrate(
    tape: &mut Tape,
    state: LayerState,
    slots: &SlotMap,
    details: &[(usize, Var)],
    proj: &Linear,
) -> Result<LayerState> {
    slots.validate()?;
    let n = tape.shape(state.hidden)[0];
    if slots.len != n {
        return Err(Error::Sequence(format!("slot map covers {} rows, state has {n}", slots.len)));
    }
    let mut rows = Vec::new();
    let mut updates = Vec::with_capacity(details.len());
    for &(image, v) in details {
        let (start, len) = slots
            .range(image)
            .ok_or_else(|| Error::Sequence(format!("image {image} has no slots")))?;
        let u = proj.forward(tape, v)?;
        let ur = tape.shape(u)[0];
        let u = if ur == len {
            u
        } else if ur == 1 {
            tape.gather_rows(u, &vec![0; len])?
        } else {
            return Err(Error::Sequence(format!("{ur} detail rows for {len} slots of image {image}")));
        };
        rows.extend(start..start + len);
        updates.push(u);
    }
    if updates.is_empty() {
        return Ok(state);
    }
    let update = if updates.len() == 1 { updates[0] } else { tape.concat_rows(&updates)? };
    let hidden = tape.scatter_add_rows(state.hidden, &rows, update)?;
    Ok(LayerState {
        layer: state.layer,
        hidden,
    })
}

/// Cells chosen by the heuristic: the `⌈fraction·P²⌉` smallest entries of
/// the global map, ties in row-major order.
pub fn least_attended(map: &GlobalMap, fraction: f64) -> Vec<usize> {
    let cells = map.values.len();
    let take = ((fraction * cells as f64).ceil() as usize).clamp(1, cells);
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| map.values[a].total_cmp(&map.values[b]).then(a.cmp(&b)));
    order.truncate(take);
    order
}

/// Mean feature of the least-attended cells, projected through `proj`.
pub fn heuristic_details(tape: &mut Tape, map: &GlobalMap, grid: &FeatureGrid, fraction: f64, proj: &Linear) -> Result<Var> {
    let cells = least_attended(map, fraction);
    let g = tape.constant(grid.features.clone());
    let picked = tape.gather_rows(g, &cells)?;
    let pooled = tape.mean_rows(picked)?;
    proj.forward(tape, pooled)
}

/// `V̄ = (W₁ g) ⊙ (W₂ X)`, one row per grid cell.
pub fn linear_completion(tape: &mut Tape, c: &LinearCompletion, g: Var, grid: Var) -> Result<Var> {
    let gw = tape.value(g).len();
    if gw != c.gate.d_in() {
        return Err(Error::Width {
            op: "linear_completion",
            expected: c.gate.d_in(),
            got: gw,
        });
    }
    let gate = c.gate.forward(tape, g)?;
    let x = c.features.forward(tape, grid)?;
    Ok(tape.mul_row(x, gate)?)
}

pub struct ForwardOut {
    pub logits: Var,
    pub slots: SlotMap,
    /// Row whose hidden state produced the guidance.
    pub guidance_row: usize,
    pub guidance: Option<Var>,
    /// Per image, the generator's own trace when it has one.
    pub base_cross: Vec<Option<Vec<Var>>>,
}

/// End-to-end logits for `instruction` followed by `continuation`, with
/// the decoder run exactly once and split at the insert layer.
pub fn vpgc_forward(
    tape: &mut Tape,
    backbone: &Backbone,
    completion: &Completion,
    instruction: &MixedSequence,
    continuation: &[usize],
    grids: &[FeatureGrid],
) -> Result<ForwardOut> {
    let images = instruction.images();
    if let Some(&bad) = images.iter().find(|&&j| j >= grids.len()) {
        return Err(Error::Sequence(format!("image {bad} has no grid")));
    }
    let grid_vars: Vec<Var> = grids.iter().map(|g| tape.constant(g.features.clone())).collect();
    let mut prompts = Vec::with_capacity(grids.len());
    let mut base_cross = Vec::with_capacity(grids.len());
    for &g in &grid_vars {
        let (p, cross) = backbone.vpg.forward(tape, g)?;
        prompts.push(p);
        base_cross.push(cross);
    }
    let mut seq = instruction.clone();
    seq.push_text(continuation);
    let dec = &backbone.decoder;
    let asm = dec.assemble(tape, &seq, &prompts)?;
    let guidance_row = instruction.len(dec.config.prompts).checked_sub(1).ok_or_else(|| {
        Error::Sequence("empty instruction".into())
    })?;
    let layer = dec.config.insert_layer()?;

    let (state, guidance) = match completion {
        Completion::Off => (dec.forward_to(tape, asm.hidden, layer)?, None),
        Completion::Qformer(w) => {
            let mid = dec.forward_to(tape, asm.hidden, layer)?;
            let g = extract_guidance(tape, &w.guide, mid, layer, guidance_row)?;
            let q = tape.param(&w.queries);
            let cond = condition_queries(tape, g, q)?;
            let used: Vec<Var> = images.iter().map(|&j| grid_vars[j]).collect();
            let details = complete_details(tape, backbone.resampler()?, &used, cond)?;
            let pairs: Vec<(usize, Var)> = images.iter().copied().zip(details).collect();
            (reintegrate(tape, mid, &asm.slots, &pairs, &w.reintegrate)?, Some(g))
        }
        Completion::Linear(c) => {
            let mid = dec.forward_to(tape, asm.hidden, layer)?;
            let g = extract_guidance(tape, &c.guide, mid, layer, guidance_row)?;
            let mut pairs = Vec::with_capacity(images.len());
            for &j in &images {
                pairs.push((j, linear_completion(tape, c, g, grid_vars[j])?));
            }
            (reintegrate(tape, mid, &asm.slots, &pairs, &c.reintegrate)?, Some(g))
        }
        Completion::Heuristic(h) => {
            let mid = dec.forward_to(tape, asm.hidden, layer)?;
            let mut rows = Vec::new();
            let mut updates = Vec::new();
            for &j in &images {
                let cross = base_cross[j]
                    .as_ref()
                    .ok_or_else(|| Error::Config("heuristic variant needs attention maps".into()))?;
                let map = global_map_of(tape, cross, grids[j].side)?;
                let u = heuristic_details(tape, &map, &grids[j], h.bottom_fraction, &h.proj)?;
                let (start, len) = asm.slots.range(j).expect("assembled image has slots");
                rows.extend(start..start + len);
                updates.push(tape.gather_rows(u, &vec![0; len])?);
            }
            let state = if updates.is_empty() {
                mid
            } else {
                let update = tape.concat_rows(&updates)?;
                LayerState {
                    layer,
                    hidden: tape.scatter_add_rows(mid.hidden, &rows, update)?,
                }
            };
            (state, None)
        }
    };
    let logits = dec.forward_from(tape, state, layer)?;
    Ok(ForwardOut {
        logits,
        slots: asm.slots,
        guidance_row,
        guidance,
        base_cross,
    })
}

fn global_map_of(tape: &Tape, cross: &[Var], side: usize) -> Result<GlobalMap> {
    let trace = crate::vpg::AttentionTrace {
        side,
        queries: cross.first().map(|&v| tape.shape(v)[0]).unwrap_or(0),
        maps: cross.iter().map(|&v| tape.value(v).to_vec()).collect(),
    };
    avg_attention(&trace)
}

/// Greedy decoding until `eos` or `max_tokens`.
pub fn generate(
    backbone: &Backbone,
    completion: &Completion,
    instruction: &MixedSequence,
    grids: &[FeatureGrid],
    eos: usize,
    max_tokens: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let mut tape = Tape::new();
        let f = vpgc_forward(&mut tape, backbone, completion, instruction, &out, grids)?;
        let v = tape.shape(f.logits)[1];
        let last = &tape.value(f.logits)[tape.value(f.logits).len() - v..];
        let next = argmax(last);
        if next == eos {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>) -> GlobalMap {
        let side = (values.len() as f64).sqrt() as usize;
        GlobalMap { side, values }
    }

    #[test]
    fn uniform_map_selects_row_major() {
        assert_eq!(least_attended(&map(vec![0.25; 4]), 0.5), vec![0, 1]);
    }

    #[test]
    fn dominant_cell_is_excluded() {
        let m = map(vec![0.1, 0.1, 0.7, 0.1]);
        let picked = least_attended(&m, 3.0 / 4.0);
        assert_eq!(picked, vec![0, 1, 3]);
    }

    #[test]
    fn full_fraction_takes_every_cell() {
        assert_eq!(least_attended(&map(vec![0.4, 0.1, 0.2, 0.3]), 1.0).len(), 4);
    }

    #[test]
    fn guidance_hand_case() {
        let mut tape = Tape::new();
        let guide = Linear {
            // Stored [in, out], so this is Wᵀ for W = [[1, 2], [0, 1]].
            weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 2.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let h = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let s = LayerState { layer: 2, hidden: h };
        let g = extract_guidance(&mut tape, &guide, s, 2, 0).unwrap();
        assert_eq!(tape.value(g), &[3.0, 1.0]);
        assert!(extract_guidance(&mut tape, &guide, s, 3, 0).is_err());
    }

    #[test]
    fn condition_hand_case() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let g = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let c = condition_queries(&mut tape, g, q).unwrap();
        assert_eq!(tape.value(c), &[2.0, 1.0, 1.0, 2.0]);
        let bad = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(condition_queries(&mut tape, bad, q).is_err());
    }

    #[test]
    fn linear_completion_hand_case() {
        let mut tape = Tape::new();
        let c = LinearCompletion {
            guide: Linear::identity(2),
            gate: Linear::identity(2),
            features: Linear::identity(2),
            reintegrate: Linear::zeros(2, 2),
        };
        let g = tape.constant(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let v = linear_completion(&mut tape, &c, g, x).unwrap();
        assert_eq!(tape.value(v), &[2.0, 3.0]);
    }

    #[test]
    fn trainable_count_closed_form() {
        assert_eq!(VpgcWeights::expected_count(8, 64), 8832);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
