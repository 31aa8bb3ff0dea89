//! The part-discovery network: a 3-D convolutional encoder with positional
//! embedding, a slot bottleneck, a decoder shared across slots and two
//! per-slot heads (affordance logits and cuboid parameters).

mod config;

pub use config::{Bottleneck, ModelConfig, DECODER_STAGES};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};
use crate::geometry::{compute_center, voxel_positions, Cuboid, Vec3};
use crate::tensor::{Graph, GruWeights, ParamStore, Tensor, Var};

/// Added to attention weights before renormalizing over inputs.
pub const ATTENTION_EPS: f64 = 1e-8;
/// Lower bound on every predicted half-extent, in voxels.
pub const MIN_SCALE: f64 = 0.25;
const QUAT_EPS: f64 = 1e-12;

/// Differentiable outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Per-slot reconstructions `[M, N]`, in `(0, 1)`.
    pub values: Var,
    /// Masks `[M, N]`, softmax-normalized across slots.
    pub masks: Var,
    /// `sum_m masks * values`, `[N]`.
    pub combined: Var,
    /// Affordance logits `[M, K]`.
    pub logits: Var,
    /// Cuboid half-extents `[M, 3]`.
    pub scales: Var,
    /// Unit quaternions `[M, 4]`.
    pub rotations: Var,
    /// Final slot vectors `[M, D]`.
    pub slots: Var,
    /// Attention `[N_tokens, M]` after the slot softmax, one per iteration.
    pub attention: Vec<Var>,
}

/// Plain-value view of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub slots: usize,
    pub values: Vec<f64>,
    pub masks: Vec<f64>,
    pub combined: Vec<f64>,
    pub logits: Vec<f64>,
    pub classes: usize,
    pub cuboids: Vec<Cuboid>,
    /// Slots whose cuboid center fell back to the grid center.
    pub degenerate: Vec<bool>,
    /// `[N_tokens, M]` maps, one per iteration.
    pub attention: Vec<Vec<f64>>,
}

impl Prediction {
    pub fn voxels(&self) -> usize {
        self.combined.len()
    }

    /// Arg-max head class of every slot (ties go to the lowest class).
    pub fn slot_classes(&self) -> Vec<usize> {
        self.logits
            .chunks(self.classes)
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Normalized distances of each token center to the six faces of the token
/// grid, `[t^3, 6]`.
pub fn face_distances(t: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * t * t * 6);
    for x in 0..t {
        for y in 0..t {
            for z in 0..t {
                let p = [x, y, z].map(|i| (i as f64 + 0.5) / t as f64);
                data.extend_from_slice(&[p[0], p[1], p[2], 1.0 - p[0], 1.0 - p[1], 1.0 - p[2]]);
            }
        }
    }
    Tensor::new(&[t * t * t, 6], data).expect("finite")
}

/// `[t'^3, t^3]` matrix averaging `f x f x f` token blocks, `t' = t / f`.
fn pooling_matrix(t: usize, f: usize) -> Tensor {
    let tp = t / f;
    let mut data = vec![0.0; tp.pow(3) * t.pow(3)];
    let w = 1.0 / (f * f * f) as f64;
    for x in 0..t {
        for y in 0..t {
            for z in 0..t {
                let row = ((x / f) * tp + y / f) * tp + z / f;
                data[row * t.pow(3) + (x * t + y) * t + z] = w;
            }
        }
    }
    Tensor::new(&[tp.pow(3), t.pow(3)], data).expect("finite")
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.store.add(name, Tensor::new(shape, data)?)?;
        Ok(())
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<()> {
        self.store.add(name, Tensor::full(shape, v))?;
        Ok(())
    }

    /// Glorot-uniform weight `[i, o]` and zero bias `[o]`.
    fn linear(&mut self, name: &str, i: usize, o: usize) -> Result<()> {
        self.uniform(&format!("{name}.weight"), &[i, o], (6.0 / (i + o) as f64).sqrt())?;
        self.constant(&format!("{name}.bias"), &[o], 0.0)
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<()> {
        self.constant(&format!("{name}.gain"), &[d], 1.0)?;
        self.constant(&format!("{name}.bias"), &[d], 0.0)
    }

    /// He-uniform kernel with `fan_in` inputs per output and zero bias.
    fn conv(&mut self, name: &str, shape: [usize; 5], fan_in: usize, bias: usize) -> Result<()> {
        self.uniform(&format!("{name}.weight"), &shape, (6.0 / fan_in as f64).sqrt())?;
        self.constant(&format!("{name}.bias"), &[bias], 0.0)
    }
}

/// Parameters loaded into one graph.
struct Loader<'a> {
    store: &'a ParamStore,
}

impl Loader<'_> {
    fn get(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(self.store, self.store.id(name)?))
    }

    fn linear(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let w = self.get(g, &format!("{name}.weight"))?;
        let b = self.get(g, &format!("{name}.bias"))?;
        g.linear(x, w, Some(b))
    }

    fn norm(&self, g: &mut Graph, name: &str, x: Var, axis: usize) -> Result<Var> {
        let gain = self.get(g, &format!("{name}.gain"))?;
        let bias = self.get(g, &format!("{name}.bias"))?;
        g.layer_norm(x, axis, gain, bias)
    }

    fn mlp2(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, &format!("{name}.fc1"), x)?;
        let h = g.relu(h)?;
        self.linear(g, &format!("{name}.fc2"), h)
    }
}

/// The network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl SlotModel {
    /// Builds a model with parameters drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let c = &config;
        let d = c.width;

        let mut c_in = 1;
        for (i, &c_out) in c.encoder_channels.iter().enumerate() {
            init.conv(&format!("enc.conv{i}"), [c_out, c_in, 3, 3, 3], c_in * 27, c_out)?;
            c_in = c_out;
        }
        init.linear("enc.pos", 6, d)?;

        match c.bottleneck {
            Bottleneck::SlotAttention | Bottleneck::SoftKmeans => {
                init.norm("sa.norm_in", d)?;
                let b = (6.0 / (2 * d) as f64).sqrt();
                init.uniform("sa.k", &[d, d], b)?;
                init.uniform("sa.q", &[d, d], b)?;
                let b = (6.0 / (1 + d) as f64).sqrt();
                init.uniform("sa.mu", &[1, d], b)?;
                init.uniform("sa.log_sigma", &[1, d], b)?;
                if c.bottleneck == Bottleneck::SlotAttention {
                    init.uniform("sa.v", &[d, d], (6.0 / (2 * d) as f64).sqrt())?;
                    init.norm("sa.norm_slots", d)?;
                    for gate in ["z", "r", "h"] {
                        init.uniform(&format!("sa.gru.w_{gate}"), &[2 * d, d], (6.0 / (3 * d) as f64).sqrt())?;
                        init.constant(&format!("sa.gru.b_{gate}"), &[d], 0.0)?;
                    }
                    if c.residual_mlp {
                        init.norm("sa.norm_mlp", d)?;
                        init.linear("sa.mlp.fc1", d, d)?;
                        init.linear("sa.mlp.fc2", d, d)?;
                    }
                }
            }
            Bottleneck::SlotMlp => {
                let pooled = c.token_res().min(4).pow(3);
                init.linear("smlp.fc1", pooled * d, c.slot_mlp_hidden)?;
                init.linear("smlp.fc2", c.slot_mlp_hidden, c.slots * d)?;
            }
        }

        let [c0, c1, c2] = c.decoder_channels;
        if c.spatial_broadcast {
            init.linear("dec.pos", 6, d)?;
            init.linear("dec.broadcast", d, c0)?;
        } else {
            init.linear("dec.broadcast", d, c0 * c.broadcast_res().pow(3))?;
        }
        // each output voxel of a k4 s2 transposed convolution sees 2^3 taps per input channel
        init.conv("dec.up1", [c0, c1, 4, 4, 4], c0 * 8, c1)?;
        init.conv("dec.up2", [c1, c2, 4, 4, 4], c1 * 8, c2)?;
        init.conv("dec.up3", [c2, c2, 4, 4, 4], c2 * 8, c2)?;
        init.uniform("dec.out.weight", &[2, c2, 1, 1, 1], (6.0 / (c2 + 2) as f64).sqrt())?;
        init.constant("dec.out.bias", &[2], 0.0)?;

        init.linear("aff.fc1", d, d)?;
        init.linear("aff.fc2", d, c.classes)?;
        init.linear("cub.fc1", d, d)?;
        init.uniform("cub.fc2.weight", &[d, 7], (6.0 / (d + 7) as f64).sqrt())?;
        let s0 = inv_softplus(c.broadcast_res().max(1) as f64 - MIN_SCALE);
        init.store.add("cub.fc2.bias", Tensor::new(&[7], vec![s0, s0, s0, 1.0, 0.0, 0.0, 0.0])?)?;

        Ok(Self { config, params })
    }

    /// Standard-normal slot initialization noise `[M, D]`, or `None` for the
    /// deterministic slot-MLP bottleneck.
    pub fn sample_noise(&self, rng: &mut impl Rng) -> Option<Tensor> {
        if self.config.bottleneck == Bottleneck::SlotMlp {
            return None;
        }
        let (m, d) = (self.config.slots, self.config.width);
        let data = (0..m * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Some(Tensor::new(&[m, d], data).expect("finite noise"))
    }

    pub fn forward(&self, g: &mut Graph, occupancy: &[f64], noise: Option<&Tensor>) -> Result<ModelOutput> {
        self.forward_with(&self.params, g, occupancy, noise)
    }

    /// Forward pass reading parameters from `store` (same layout as
    /// `self.params`).
    pub fn forward_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        occupancy: &[f64],
        noise: Option<&Tensor>,
    ) -> Result<ModelOutput> {
        let p = Loader { store };
        let tokens = self.encode(&p, g, occupancy)?;
        let (slots, attention) = match self.config.bottleneck {
            Bottleneck::SlotMlp => (self.slot_mlp(&p, g, tokens)?, Vec::new()),
            _ => {
                let noise = noise.ok_or_else(|| shape_err("forward", "slot attention needs init noise"))?;
                let init = self.initial_slots(&p, g, noise)?;
                self.slot_attention(&p, g, tokens, init)?
            }
        };
        let (values, masks, combined) = self.decode(&p, g, slots)?;
        let logits = p.mlp2(g, "aff", slots)?;
        let (scales, rotations) = self.cuboid_head(&p, g, slots)?;
        Ok(ModelOutput {
            values,
            masks,
            combined,
            logits,
            scales,
            rotations,
            slots,
            attention,
        })
    }

    /// Encoder tokens `[t^3, D]` with the positional term added.
    pub fn encode_features(&self, g: &mut Graph, occupancy: &[f64]) -> Result<Var> {
        self.encode(&Loader { store: &self.params }, g, occupancy)
    }

    fn encode(&self, p: &Loader, g: &mut Graph, occupancy: &[f64]) -> Result<Var> {
        let c = &self.config;
        let r = c.res;
        if occupancy.len() != c.voxels() {
            return Err(shape_err("encode", format!("{} voxels for res {r}", occupancy.len())));
        }
        let mut x = g.constant(Tensor::new(&[1, r, r, r], occupancy.to_vec())?);
        for (i, &s) in c.encoder_strides.iter().enumerate() {
            let w = p.get(g, &format!("enc.conv{i}.weight"))?;
            let b = p.get(g, &format!("enc.conv{i}.bias"))?;
            x = g.conv3d(x, w, Some(b), s, 1)?;
            if i + 1 < c.encoder_strides.len() {
                x = g.relu(x)?;
            }
        }
        let n = c.tokens();
        let x = g.reshape(x, &[c.width, n])?;
        let x = g.transpose(x)?;
        let faces = g.constant(face_distances(c.token_res()));
        let pos = p.linear(g, "enc.pos", faces)?;
        g.add(x, pos)
    }

    fn initial_slots(&self, p: &Loader, g: &mut Graph, noise: &Tensor) -> Result<Var> {
        let (m, d) = (self.config.slots, self.config.width);
        if noise.shape() != [m, d] {
            return Err(shape_err("slot init", format!("noise {:?} for [{m}, {d}]", noise.shape())));
        }
        let mu = p.get(g, "sa.mu")?;
        let log_sigma = p.get(g, "sa.log_sigma")?;
        let sigma = g.exp(log_sigma)?;
        let eps = g.constant(noise.clone());
        let spread = g.mul(eps, sigma)?;
        g.add(spread, mu)
    }

    /// Runs the attention bottleneck from explicit initial slots `[M, D]`.
    /// Returns the final slots and the `[N, M]` attention of every iteration.
    pub fn run_slot_attention(&self, g: &mut Graph, tokens: Var, init: Var) -> Result<(Var, Vec<Var>)> {
        self.slot_attention(&Loader { store: &self.params }, g, tokens, init)
    }

    fn slot_attention(&self, p: &Loader, g: &mut Graph, tokens: Var, init: Var) -> Result<(Var, Vec<Var>)> {
        let c = &self.config;
        let kmeans = c.bottleneck == Bottleneck::SoftKmeans;
        let scale = 1.0 / (c.width as f64).sqrt();
        let inputs = p.norm(g, "sa.norm_in", tokens, 1)?;
        let wk = p.get(g, "sa.k")?;
        let k = g.matmul(inputs, wk)?;
        let v = if kmeans {
            inputs
        } else {
            let wv = p.get(g, "sa.v")?;
            g.matmul(inputs, wv)?
        };
        let wq = p.get(g, "sa.q")?;
        let gru = if kmeans {
            None
        } else {
            let mut w = |gate: &str, kind: &str| p.get(g, &format!("sa.gru.{kind}_{gate}"));
            Some(GruWeights {
                w_z: w("z", "w")?,
                b_z: w("z", "b")?,
                w_r: w("r", "w")?,
                b_r: w("r", "b")?,
                w_h: w("h", "w")?,
                b_h: w("h", "b")?,
            })
        };

        let mut slots = init;
        let mut history = Vec::with_capacity(c.iters);
        for _ in 0..c.iters {
            let prev = slots;
            let qin = if kmeans { slots } else { p.norm(g, "sa.norm_slots", slots, 1)? };
            let q = g.matmul(qin, wq)?;
            let qt = g.transpose(q)?;
            let logits = g.matmul(k, qt)?;
            let logits = g.scale(logits, scale)?;
            let attn = g.softmax_along(logits, 1)?;
            history.push(attn);
            let w = g.offset(attn, ATTENTION_EPS)?;
            let total = g.reduce_sum_axis(w, 0)?;
            let w = g.div(w, total)?;
            let wt = g.transpose(w)?;
            let updates = g.matmul(wt, v)?;
            slots = match &gru {
                None => updates,
                Some(weights) => {
                    let mut s = g.gru_cell(updates, prev, weights)?;
                    if c.residual_mlp {
                        let h = p.norm(g, "sa.norm_mlp", s, 1)?;
                        let h = p.mlp2(g, "sa.mlp", h)?;
                        s = g.add(s, h)?;
                    }
                    s
                }
            };
        }
        Ok((slots, history))
    }

    fn slot_mlp(&self, p: &Loader, g: &mut Graph, tokens: Var) -> Result<Var> {
        let c = &self.config;
        let t = c.token_res();
        let pooled = if t > 4 {
            let pool = g.constant(pooling_matrix(t, t / 4));
            g.matmul(pool, tokens)?
        } else {
            tokens
        };
        let n = g.value(pooled).len();
        let flat = g.reshape(pooled, &[1, n])?;
        let h = p.linear(g, "smlp.fc1", flat)?;
        let h = g.relu(h)?;
        let s = p.linear(g, "smlp.fc2", h)?;
        g.reshape(s, &[c.slots, c.width])
    }

    /// Shared decoder applied to `slots: [M, D]`; returns `(values, masks,
    /// combined)`.
    pub fn decode_parts(&self, g: &mut Graph, slots: Var) -> Result<(Var, Var, Var)> {
        self.decode(&Loader { store: &self.params }, g, slots)
    }

    fn decode(&self, p: &Loader, g: &mut Graph, slots: Var) -> Result<(Var, Var, Var)> {
        let c = &self.config;
        let m = c.slots;
        let b = c.broadcast_res();
        let [c0, _, c2] = c.decoder_channels;
        let mut x = if c.spatial_broadcast {
            let cells = b * b * b;
            let faces = g.constant(face_distances(b));
            let pos = p.linear(g, "dec.pos", faces)?;
            let s = g.reshape(slots, &[m, 1, c.width])?;
            let tiled = g.add(s, pos)?;
            let tiled = g.reshape(tiled, &[m * cells, c.width])?;
            let h = p.linear(g, "dec.broadcast", tiled)?;
            let h = g.relu(h)?;
            let mut per_slot = Vec::with_capacity(m);
            for slot in 0..m {
                let rows = g.slice(h, 0, slot * cells, cells)?;
                per_slot.push(g.transpose(rows)?);
            }
            let x = g.concat(&per_slot, 0)?;
            g.reshape(x, &[m, c0, b, b, b])?
        } else {
            let x = p.linear(g, "dec.broadcast", slots)?;
            g.reshape(x, &[m, c0, b, b, b])?
        };
        for stage in 1..=DECODER_STAGES {
            let w = p.get(g, &format!("dec.up{stage}.weight"))?;
            let bias = p.get(g, &format!("dec.up{stage}.bias"))?;
            x = g.conv_transpose3d(x, w, Some(bias), 2, 1)?;
            x = g.relu(x)?;
        }
        let w = p.get(g, "dec.out.weight")?;
        let bias = p.get(g, "dec.out.bias")?;
        let out = g.conv3d(x, w, Some(bias), 1, 0)?;
        let n = c.voxels();
        debug_assert_eq!(g.shape(x)[1], c2);
        let out = g.reshape(out, &[m, 2, n])?;
        let value_logits = g.slice(out, 1, 0, 1)?;
        let value_logits = g.reshape(value_logits, &[m, n])?;
        let mask_logits = g.slice(out, 1, 1, 1)?;
        let mask_logits = g.reshape(mask_logits, &[m, n])?;
        let values = g.sigmoid(value_logits)?;
        let masks = g.softmax_along(mask_logits, 0)?;
        let weighted = g.mul(values, masks)?;
        let combined = g.reduce_sum_axis(weighted, 0)?;
        Ok((values, masks, combined))
    }

    fn cuboid_head(&self, p: &Loader, g: &mut Graph, slots: Var) -> Result<(Var, Var)> {
        let m = self.config.slots;
        let raw = p.mlp2(g, "cub", slots)?;
        let s = g.slice(raw, 1, 0, 3)?;
        let s = g.softplus(s)?;
        let scales = g.offset(s, MIN_SCALE)?;
        let q = g.slice(raw, 1, 3, 4)?;
        let sq = g.mul(q, q)?;
        let norm2 = g.reduce_sum_axis(sq, 1)?;
        let norm2 = g.offset(norm2, QUAT_EPS)?;
        let norm = g.sqrt(norm2)?;
        let norm = g.reshape(norm, &[m, 1])?;
        let rotations = g.div(q, norm)?;
        Ok((scales, rotations))
    }

    /// Reads the plain values of a forward pass and fits cuboid centers from
    /// the masked slot values.
    pub fn prediction(&self, g: &Graph, out: &ModelOutput) -> Result<Prediction> {
        let c = &self.config;
        let (m, n) = (c.slots, c.voxels());
        let values = g.value(out.values).data().to_vec();
        let masks = g.value(out.masks).data().to_vec();
        let positions: Vec<Vec3> = voxel_positions(c.res);
        let scales = g.value(out.scales).data();
        let rots = g.value(out.rotations).data();
        let mut cuboids = Vec::with_capacity(m);
        let mut degenerate = Vec::with_capacity(m);
        for slot in 0..m {
            let w: Vec<f64> = (0..n).map(|i| values[slot * n + i] * masks[slot * n + i]).collect();
            let (center, deg) = compute_center(&w, &positions, c.res)?;
            let q = [rots[slot * 4], rots[slot * 4 + 1], rots[slot * 4 + 2], rots[slot * 4 + 3]];
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            cuboids.push(Cuboid::new(
                center,
                [scales[slot * 3], scales[slot * 3 + 1], scales[slot * 3 + 2]],
                q.map(|v| v / qn),
            )?);
            degenerate.push(deg);
        }
        Ok(Prediction {
            slots: m,
            values,
            masks,
            combined: g.value(out.combined).data().to_vec(),
            logits: g.value(out.logits).data().to_vec(),
            classes: c.classes,
            cuboids,
            degenerate,
            attention: out.attention.iter().map(|&a| g.value(a).data().to_vec()).collect(),
        })
    }

    /// Forward pass without gradient bookkeeping beyond the graph itself.
    pub fn predict(&self, occupancy: &[f64], noise: Option<&Tensor>) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, occupancy, noise)?;
        self.prediction(&g, &out)
    }
}
