//! Order-agnostic autoregressive conditional sequence model.
//!
//! A sequence is decoded one position at a time along a permutation of its
//! positions. The logits for the next position are produced by a single
//! hidden-layer tanh MLP from
//!
//! ```text
//! [ features[target] | mean_{decoded j} embed[y_j] | mean_{decoded j} features[j] | decoded / L ]
//! ```
//!
//! The context is pooled over the *set* of decoded positions, summed in
//! position order, so the logits depend on which positions are known and
//! never on the order in which they became known.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dot, log_sum_exp, rng_from_seed, softmax_into, tree_sum_vectors, AdamState, Layout, ParamVector,
    Rng,
};

/// Default residue vocabulary: the 20 canonical amino acids, alphabetical by
/// one-letter code.
pub const AMINO_ACIDS: &str = "ACDEFGHIKLMNPQRSTVWY";

/// Temperatures below this decode greedily.
pub const GREEDY_CUTOFF: f64 = 1e-6;

/// Largest length for which exhaustive order enumeration is attempted.
pub const MAX_ENUMERABLE_LEN: usize = 8;

/// Ordered residue vocabulary.
#[derive(Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
    index: HashMap<char, u8>,
}

impl fmt::Debug for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Alphabet({:?})", self.as_string())
    }
}

impl Alphabet {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.len() < 2 || symbols.len() > 256 {
            return Err(Error::contract(format!(
                "alphabet needs between 2 and 256 symbols, got {}",
                symbols.len()
            )));
        }
        let mut index = HashMap::new();
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i as u8).is_some() {
                return Err(Error::contract(format!("duplicate alphabet symbol '{c}'")));
            }
        }
        Ok(Alphabet { symbols, index })
    }

    pub fn amino_acids() -> Self {
        Alphabet::new(AMINO_ACIDS).expect("canonical alphabet is valid")
    }

    /// The first `n` canonical amino acids, for toy-sized models.
    pub fn amino_subset(n: usize) -> Result<Self> {
        if n > AMINO_ACIDS.len() {
            return Err(Error::contract(format!("only 20 amino acids, asked for {n}")));
        }
        Alphabet::new(&AMINO_ACIDS[..n])
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, idx: u8) -> char {
        self.symbols[idx as usize]
    }

    pub fn index_of(&self, c: char) -> Option<u8> {
        self.index.get(&c).copied()
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn encode(&self, s: &str) -> Result<Sequence> {
        s.chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::contract(format!("symbol '{c}' not in alphabet")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Sequence)
    }

    pub fn decode(&self, seq: &Sequence) -> String {
        seq.0.iter().map(|&r| self.symbol(r)).collect()
    }
}

impl Serialize for Alphabet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_string())
    }
}

impl<'de> Deserialize<'de> for Alphabet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Alphabet::new(&s).map_err(serde::de::Error::custom)
    }
}

/// Per-position real feature vectors standing in for a protein backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub id: String,
    pub features: Vec<Vec<f64>>,
}

impl Backbone {
    pub fn new(id: impl Into<String>, features: Vec<Vec<f64>>) -> Result<Self> {
        let id = id.into();
        let Some(first) = features.first() else {
            return Err(Error::contract(format!("backbone '{id}' has no positions")));
        };
        let dim = first.len();
        for (i, f) in features.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::contract(format!(
                    "backbone '{id}' position {i} has {} features, expected {dim}",
                    f.len()
                )));
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(Error::contract(format!(
                    "backbone '{id}' position {i} has non-finite features"
                )));
            }
        }
        Ok(Backbone { id, features })
    }

    /// Standard-normal features.
    pub fn random(id: impl Into<String>, len: usize, feature_dim: usize, rng: &mut Rng) -> Self {
        let features = (0..len)
            .map(|_| (0..feature_dim).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        Backbone::new(id, features).expect("random backbone is valid")
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }
}

/// Backbones addressable by id.
#[derive(Debug, Clone, Default)]
pub struct BackbonePool {
    backbones: Vec<Backbone>,
    by_id: HashMap<String, usize>,
}

impl BackbonePool {
    pub fn new(backbones: Vec<Backbone>) -> Result<Self> {
        let mut by_id = HashMap::new();
        for (i, b) in backbones.iter().enumerate() {
            if by_id.insert(b.id.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate backbone id '{}'", b.id)));
            }
        }
        Ok(BackbonePool { backbones, by_id })
    }

    /// `count` random backbones with ids `{prefix}{index:04}`.
    pub fn random(prefix: &str, count: usize, len: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let backbones = (0..count)
            .map(|i| Backbone::random(format!("{prefix}{i:04}"), len, feature_dim, &mut rng))
            .collect();
        BackbonePool::new(backbones).expect("generated ids are unique")
    }

    pub fn get(&self, id: &str) -> Option<&Backbone> {
        self.by_id.get(id).map(|&i| &self.backbones[i])
    }

    pub fn all(&self) -> &[Backbone] {
        &self.backbones
    }

    pub fn len(&self) -> usize {
        self.backbones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backbones.is_empty()
    }
}

/// Residue indices into an [`Alphabet`]. Ordering is lexicographic.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Sequence(pub Vec<u8>);

impl Sequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn residues(&self) -> &[u8] {
        &self.0
    }
}

/// A decoding order: a bijection on `0..L`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    pub order: Vec<usize>,
    pub seed: u64,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        Permutation {
            order: (0..len).collect(),
            seed: 0,
        }
    }

    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::contract(format!("{order:?} is not a permutation")));
            }
        }
        Ok(Permutation { order, seed: 0 })
    }

    /// Uniformly random order derived from `seed`.
    pub fn random(len: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng_from_seed(seed));
        Permutation { order, seed }
    }

    /// Uniformly random order drawn from a caller RNG.
    pub fn draw(len: usize, rng: &mut Rng) -> Self {
        Permutation::random(len, rng.random())
    }

    /// All `L!` orders in lexicographic order.
    pub fn all(len: usize) -> Vec<Permutation> {
        fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Permutation>) {
            if prefix.len() == used.len() {
                out.push(Permutation {
                    order: prefix.clone(),
                    seed: 0,
                });
                return;
            }
            for i in 0..used.len() {
                if !used[i] {
                    used[i] = true;
                    prefix.push(i);
                    rec(prefix, used, out);
                    prefix.pop();
                    used[i] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::with_capacity(len), &mut vec![false; len], &mut out);
        out
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

pub fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// Architecture hyperparameters of a [`PolicyModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    pub alphabet_size: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            alphabet_size: 20,
            feature_dim: 8,
            embed_dim: 16,
            hidden_dim: 32,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "A={} F={} E={} H={}",
            self.alphabet_size, self.feature_dim, self.embed_dim, self.hidden_dim
        )
    }
}

impl Arch {
    /// Width of the MLP input.
    pub fn input_dim(&self) -> usize {
        2 * self.feature_dim + self.embed_dim + 1
    }

    pub fn layout(&self) -> Layout {
        let (a, e, h, d) = (
            self.alphabet_size,
            self.embed_dim,
            self.hidden_dim,
            self.input_dim(),
        );
        Layout::from_sizes([
            ("embed", a * e),
            ("w1", h * d),
            ("b1", h),
            ("w2", a * h),
            ("b2", a),
        ])
    }

    pub fn num_params(&self) -> usize {
        self.layout().len()
    }
}

/// Anything that assigns a log-likelihood to a sequence under a given
/// decoding order.
pub trait OrderedLikelihood: Sync {
    fn logprob_given_order(&self, backbone: &Backbone, seq: &Sequence, perm: &Permutation) -> f64;
}

/// Parameterised order-agnostic autoregressive conditional distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub arch: Arch,
    pub params: ParamVector,
    pub rng_seed: u64,
}

/// Cached activations of one decoding pass, sufficient for backprop.
#[derive(Debug, Clone)]
pub struct OrderTrace {
    pub logprob: f64,
    inputs: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
    perm: Vec<usize>,
    residues: Vec<u8>,
}

/// Parameter slices in layout order.
struct Views<'a> {
    embed: &'a [f64],
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

struct Buffers {
    u: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    ctx: Vec<f64>,
}

impl Buffers {
    fn new(arch: &Arch) -> Self {
        Buffers {
            u: vec![0.0; arch.input_dim()],
            h: vec![0.0; arch.hidden_dim],
            z: vec![0.0; arch.alphabet_size],
            ctx: vec![0.0; arch.embed_dim + arch.feature_dim],
        }
    }
}

/// Result of [`PolicyModel::sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub sequence: Sequence,
    /// Log-probability of `sequence` along the sampling order at τ = 1.
    pub logprob: f64,
}

impl PolicyModel {
    /// Random initialisation: standard-normal embeddings, fan-in scaled
    /// weights, zero biases.
    pub fn new(arch: Arch, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut params = ParamVector::zeros(arch.layout());
        let mut fill = |name: &str, scale: f64, rng: &mut Rng| {
            for v in params.slice_mut(name) {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * scale;
            }
        };
        fill("embed", 1.0, &mut rng);
        fill("w1", 1.0 / (arch.input_dim() as f64).sqrt(), &mut rng);
        fill("w2", 1.0 / (arch.hidden_dim as f64).sqrt(), &mut rng);
        PolicyModel {
            arch,
            params,
            rng_seed: seed,
        }
    }

    /// Random model whose output layer is scaled by `sharpness`, giving
    /// lower-entropy conditionals for larger values.
    pub fn teacher(arch: Arch, seed: u64, sharpness: f64) -> Self {
        let mut m = PolicyModel::new(arch, seed);
        for v in m.params.slice_mut("w2") {
            *v *= sharpness;
        }
        m
    }

    /// Model with a zero output layer: every conditional is uniform.
    pub fn uniform(arch: Arch, seed: u64) -> Self {
        let mut m = PolicyModel::new(arch, seed);
        m.params.slice_mut("w2").fill(0.0);
        m.params.slice_mut("b2").fill(0.0);
        m
    }

    pub fn with_params(&self, params: ParamVector) -> Self {
        PolicyModel {
            arch: self.arch,
            params,
            rng_seed: self.rng_seed,
        }
    }

    fn views(&self) -> Views<'_> {
        let Arch {
            embed_dim: e,
            hidden_dim: hd,
            alphabet_size: a,
            ..
        } = self.arch;
        let d = self.arch.input_dim();
        let (embed, rest) = self.params.values.split_at(a * e);
        let (w1, rest) = rest.split_at(hd * d);
        let (b1, rest) = rest.split_at(hd);
        let (w2, b2) = rest.split_at(a * hd);
        Views { embed, w1, b1, w2, b2 }
    }

    fn check_inputs(&self, backbone: &Backbone, seq_len: usize, perm_len: usize) {
        assert_eq!(
            backbone.feature_dim(),
            self.arch.feature_dim,
            "backbone feature dim does not match model"
        );
        assert_eq!(seq_len, backbone.len(), "sequence length != backbone length");
        assert_eq!(perm_len, backbone.len(), "permutation length != backbone length");
    }

    /// Forward pass for one target position. `decoded[j]` marks positions
    /// whose residue in `residues` is already known. Leaves logits in `b.z`.
    fn step_forward(
        &self,
        backbone: &Backbone,
        residues: &[u8],
        decoded: &[bool],
        count: usize,
        target: usize,
        b: &mut Buffers,
    ) {
        let Arch {
            feature_dim: f,
            embed_dim: e,
            hidden_dim: hd,
            alphabet_size: a,
        } = self.arch;
        let d = self.arch.input_dim();
        let v = self.views();
        let embed = v.embed;

        b.ctx.fill(0.0);
        for (j, &known) in decoded.iter().enumerate() {
            if known {
                let row = &embed[residues[j] as usize * e..][..e];
                for (c, &x) in b.ctx[..e].iter_mut().zip(row) {
                    *c += x;
                }
                for (c, &x) in b.ctx[e..].iter_mut().zip(&backbone.features[j]) {
                    *c += x;
                }
            }
        }
        b.u[..f].copy_from_slice(&backbone.features[target]);
        if count > 0 {
            let inv = 1.0 / count as f64;
            for (u, &c) in b.u[f..f + e + f].iter_mut().zip(&b.ctx) {
                *u = c * inv;
            }
        } else {
            b.u[f..f + e + f].fill(0.0);
        }
        b.u[d - 1] = count as f64 / backbone.len() as f64;

        for j in 0..hd {
            b.h[j] = (v.b1[j] + dot(&v.w1[j * d..][..d], &b.u)).tanh();
        }
        for k in 0..a {
            b.z[k] = v.b2[k] + dot(&v.w2[k * hd..][..hd], &b.h);
        }
    }

    /// Logits for `target_pos` given the set `partial` of already decoded
    /// `(position, residue)` pairs.
    pub fn step_logits(
        &self,
        backbone: &Backbone,
        partial: &[(usize, u8)],
        target_pos: usize,
    ) -> Result<Vec<f64>> {
        let len = backbone.len();
        if target_pos >= len {
            return Err(Error::contract(format!(
                "target position {target_pos} out of range for length {len}"
            )));
        }
        let mut residues = vec![0u8; len];
        let mut decoded = vec![false; len];
        for &(pos, r) in partial {
            if pos >= len || pos == target_pos || decoded[pos] {
                return Err(Error::contract(format!(
                    "invalid decoded position {pos} (target {target_pos}, length {len})"
                )));
            }
            if r as usize >= self.arch.alphabet_size {
                return Err(Error::contract(format!("residue index {r} out of range")));
            }
            decoded[pos] = true;
            residues[pos] = r;
        }
        let mut b = Buffers::new(&self.arch);
        self.step_forward(backbone, &residues, &decoded, partial.len(), target_pos, &mut b);
        Ok(b.z)
    }

    /// Forward pass along `perm`, caching what backprop needs.
    pub fn trace(&self, backbone: &Backbone, seq: &Sequence, perm: &Permutation) -> OrderTrace {
        self.check_inputs(backbone, seq.len(), perm.len());
        let len = backbone.len();
        let (d, hd, a) = (
            self.arch.input_dim(),
            self.arch.hidden_dim,
            self.arch.alphabet_size,
        );
        let mut b = Buffers::new(&self.arch);
        let mut decoded = vec![false; len];
        let mut inputs = Vec::with_capacity(len * d);
        let mut hidden = Vec::with_capacity(len * hd);
        let mut probs = vec![0.0; len * a];
        let mut logprob = 0.0;
        for (i, &pos) in perm.order.iter().enumerate() {
            self.step_forward(backbone, &seq.0, &decoded, i, pos, &mut b);
            let lse = softmax_into(&b.z, &mut probs[i * a..(i + 1) * a]);
            logprob += b.z[seq.0[pos] as usize] - lse;
            inputs.extend_from_slice(&b.u);
            hidden.extend_from_slice(&b.h);
            decoded[pos] = true;
        }
        OrderTrace {
            logprob,
            inputs,
            hidden,
            probs,
            perm: perm.order.clone(),
            residues: seq.0.clone(),
        }
    }

    /// Adds `scale · ∂ logprob / ∂θ` for the traced pass into `grad`.
    pub fn accumulate_grad(&self, trace: &OrderTrace, scale: f64, grad: &mut [f64]) {
        let Arch {
            feature_dim: f,
            embed_dim: e,
            hidden_dim: hd,
            alphabet_size: a,
        } = self.arch;
        let d = self.arch.input_dim();
        let Views { w1, w2, .. } = self.views();
        let (g_embed, rest) = grad.split_at_mut(a * e);
        let (g_w1, rest) = rest.split_at_mut(hd * d);
        let (g_b1, rest) = rest.split_at_mut(hd);
        let (g_w2, g_b2) = rest.split_at_mut(a * hd);

        let len = trace.perm.len();
        let mut gz = vec![0.0; a];
        let mut dh = vec![0.0; hd];
        // Row i: gradient reaching the mean context embedding at step i,
        // already divided by the context size i.
        let mut du_emb = vec![0.0; len * e];
        for (i, &pos) in trace.perm.iter().enumerate() {
            let u = &trace.inputs[i * d..(i + 1) * d];
            let h = &trace.hidden[i * hd..(i + 1) * hd];
            let p = &trace.probs[i * a..(i + 1) * a];
            let y = trace.residues[pos] as usize;
            for k in 0..a {
                gz[k] = -scale * p[k];
            }
            gz[y] += scale;

            dh.fill(0.0);
            for k in 0..a {
                let g = gz[k];
                g_b2[k] += g;
                let gw = &mut g_w2[k * hd..(k + 1) * hd];
                let wrow = &w2[k * hd..(k + 1) * hd];
                for j in 0..hd {
                    gw[j] += g * h[j];
                    dh[j] += g * wrow[j];
                }
            }
            let de = &mut du_emb[i * e..(i + 1) * e];
            let inv = if i > 0 { 1.0 / i as f64 } else { 0.0 };
            for j in 0..hd {
                let da = dh[j] * (1.0 - h[j] * h[j]);
                g_b1[j] += da;
                for (g, &x) in g_w1[j * d..(j + 1) * d].iter_mut().zip(u) {
                    *g += da * x;
                }
                if i > 0 {
                    let s = da * inv;
                    for (acc, &w) in de.iter_mut().zip(&w1[j * d + f..j * d + f + e]) {
                        *acc += s * w;
                    }
                }
            }
        }
        // The residue decoded at step t sits in the context of every later
        // step, so it receives the suffix sum of rows t+1.. .
        let mut acc = vec![0.0; e];
        for t in (0..len).rev() {
            let r = trace.residues[trace.perm[t]] as usize;
            for (g, &x) in g_embed[r * e..(r + 1) * e].iter_mut().zip(&acc) {
                *g += x;
            }
            for (x, &y) in acc.iter_mut().zip(&du_emb[t * e..(t + 1) * e]) {
                *x += y;
            }
        }
    }

    /// `log π(y | x, σ) = Σ_i log softmax(step_logits)[y_σ(i)]`.
    pub fn logprob_given_order(&self, backbone: &Backbone, seq: &Sequence, perm: &Permutation) -> f64 {
        self.check_inputs(backbone, seq.len(), perm.len());
        let mut b = Buffers::new(&self.arch);
        let mut decoded = vec![false; backbone.len()];
        let mut total = 0.0;
        for (i, &pos) in perm.order.iter().enumerate() {
            self.step_forward(backbone, &seq.0, &decoded, i, pos, &mut b);
            total += b.z[seq.0[pos] as usize] - log_sum_exp(&b.z);
            decoded[pos] = true;
        }
        total
    }

    /// Decodes a sequence along `perm`, drawing each residue from
    /// `softmax(logits / τ)`; argmax when `τ < GREEDY_CUTOFF`.
    pub fn sample(
        &self,
        backbone: &Backbone,
        perm: &Permutation,
        temperature: f64,
        rng: &mut Rng,
    ) -> Result<Sampled> {
        if !(temperature > 0.0) {
            return Err(Error::contract(format!(
                "sampling temperature must be > 0, got {temperature}"
            )));
        }
        self.check_inputs(backbone, backbone.len(), perm.len());
        let a = self.arch.alphabet_size;
        let mut b = Buffers::new(&self.arch);
        let mut residues = vec![0u8; backbone.len()];
        let mut decoded = vec![false; backbone.len()];
        let mut scaled = vec![0.0; a];
        let mut probs = vec![0.0; a];
        let mut logprob = 0.0;
        for (i, &pos) in perm.order.iter().enumerate() {
            self.step_forward(backbone, &residues, &decoded, i, pos, &mut b);
            let pick = if temperature < GREEDY_CUTOFF {
                argmax(&b.z)
            } else {
                for (s, &z) in scaled.iter_mut().zip(&b.z) {
                    *s = z / temperature;
                }
                softmax_into(&scaled, &mut probs);
                categorical(&probs, rng)
            };
            logprob += b.z[pick] - log_sum_exp(&b.z);
            residues[pos] = pick as u8;
            decoded[pos] = true;
        }
        Ok(Sampled {
            sequence: Sequence(residues),
            logprob,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            arch: self.arch,
            rng_seed: self.rng_seed,
            layout: self.params.layout.clone(),
            values: self.params.values.clone(),
        };
        let text = serde_json::to_string(&ckpt)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        if ckpt.layout != ckpt.arch.layout() {
            return Err(Error::Serde(format!(
                "{}: layout does not match architecture {}",
                path.display(),
                ckpt.arch
            )));
        }
        Ok(PolicyModel {
            arch: ckpt.arch,
            params: ParamVector::new(ckpt.values, ckpt.layout)?,
            rng_seed: ckpt.rng_seed,
        })
    }
}

impl OrderedLikelihood for PolicyModel {
    fn logprob_given_order(&self, backbone: &Backbone, seq: &Sequence, perm: &Permutation) -> f64 {
        PolicyModel::logprob_given_order(self, backbone, seq, perm)
    }
}

const CHECKPOINT_FORMAT: &str = "prefalign-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    arch: Arch,
    rng_seed: u64,
    layout: Layout,
    values: Vec<f64>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below 1; take the last positive-mass symbol.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Decoding orders for the shared-order estimator: all `L!` orders when
/// `S ≥ L!` (exhaustive, deduplicated), otherwise `S` i.i.d. uniform draws.
pub fn draw_orders(len: usize, samples: usize, rng: &mut Rng) -> Vec<Permutation> {
    assert!(samples >= 1, "need at least one order sample");
    if len <= MAX_ENUMERABLE_LEN && samples >= factorial(len) {
        Permutation::all(len)
    } else {
        (0..samples).map(|_| Permutation::draw(len, rng)).collect()
    }
}

/// `log( (1/S) Σ_s exp(log π(y | x, σ_s)) )` by log-sum-exp.
pub fn order_average_logprob<M: OrderedLikelihood + ?Sized>(
    model: &M,
    backbone: &Backbone,
    seq: &Sequence,
    orders: &[Permutation],
) -> f64 {
    let lps: Vec<f64> = orders
        .iter()
        .map(|p| model.logprob_given_order(backbone, seq, p))
        .collect();
    log_sum_exp(&lps) - (orders.len() as f64).ln()
}

/// Shared-order likelihood estimates for a policy and its reference.
#[derive(Debug, Clone)]
pub struct SharedOrderEstimate {
    pub logp_policy: f64,
    pub logp_ref: f64,
    pub orders: Vec<Permutation>,
}

impl SharedOrderEstimate {
    pub fn log_ratio(&self) -> f64 {
        self.logp_policy - self.logp_ref
    }
}

/// Estimates `log p̂_θ(y|x)` and `log p̂_ref(y|x)` with the same `S` orders.
pub fn shared_order_logprob<P, R>(
    policy: &P,
    reference: &R,
    backbone: &Backbone,
    seq: &Sequence,
    samples: usize,
    rng: &mut Rng,
) -> Result<SharedOrderEstimate>
where
    P: OrderedLikelihood + ?Sized,
    R: OrderedLikelihood + ?Sized,
{
    if samples == 0 {
        return Err(Error::contract("order sample count S must be >= 1"));
    }
    let orders = draw_orders(backbone.len(), samples, rng);
    Ok(SharedOrderEstimate {
        logp_policy: order_average_logprob(policy, backbone, seq, &orders),
        logp_ref: order_average_logprob(reference, backbone, seq, &orders),
        orders,
    })
}

/// Baseline for the shared-order estimator: policy and reference are each
/// scored under their own `S` independent orders. Returns
/// `(log p̂_θ, log p̂_ref)`.
pub fn independent_order_logprob<P, R>(
    policy: &P,
    reference: &R,
    backbone: &Backbone,
    seq: &Sequence,
    samples: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)>
where
    P: OrderedLikelihood + ?Sized,
    R: OrderedLikelihood + ?Sized,
{
    if samples == 0 {
        return Err(Error::contract("order sample count S must be >= 1"));
    }
    let op = draw_orders(backbone.len(), samples, rng);
    let or = draw_orders(backbone.len(), samples, rng);
    Ok((
        order_average_logprob(policy, backbone, seq, &op),
        order_average_logprob(reference, backbone, seq, &or),
    ))
}

/// Order-averaged log-likelihood of `seq` and its gradient scaled by
/// `scale`, accumulated into `grad`.
pub fn order_average_logprob_grad(
    model: &PolicyModel,
    backbone: &Backbone,
    seq: &Sequence,
    orders: &[Permutation],
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let traces: Vec<OrderTrace> = orders.iter().map(|p| model.trace(backbone, seq, p)).collect();
    let lps: Vec<f64> = traces.iter().map(|t| t.logprob).collect();
    let lse = log_sum_exp(&lps);
    if scale != 0.0 {
        for t in &traces {
            let w = (t.logprob - lse).exp();
            model.accumulate_grad(t, scale * w, grad);
        }
    }
    lse - (orders.len() as f64).ln()
}

/// One teacher-forced example with its decoding order.
#[derive(Debug, Clone, Copy)]
pub struct CeExample<'a> {
    pub backbone: &'a Backbone,
    pub seq: &'a Sequence,
    pub perm: &'a Permutation,
}

/// Mean per-residue cross-entropy of a batch and its gradient.
pub fn ce_loss(model: &PolicyModel, batch: &[CeExample<'_>]) -> (f64, Vec<f64>) {
    let dim = model.params.len();
    let n = batch.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|ex| {
            let mut g = vec![0.0; dim];
            let t = model.trace(ex.backbone, ex.seq, ex.perm);
            let w = 1.0 / (ex.seq.len() as f64 * n);
            model.accumulate_grad(&t, -w, &mut g);
            (-t.logprob * w, g)
        })
        .collect();
    let loss = parts.iter().map(|(l, _)| l).sum();
    let grad = tree_sum_vectors(parts.into_iter().map(|(_, g)| g).collect(), dim);
    (loss, grad)
}

/// Settings for teacher-forced cross-entropy training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for CeConfig {
    fn default() -> Self {
        CeConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Per-epoch mean cross-entropy in nats per residue.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Minimises teacher-forced cross-entropy with a fresh random order per
/// example per epoch. Each epoch's loss is measured before its updates.
pub fn train_ce(
    model: &mut PolicyModel,
    dataset: &[(Backbone, Sequence)],
    cfg: &CeConfig,
    rng: &mut Rng,
) -> Result<TrainLog> {
    if dataset.is_empty() {
        return Err(Error::contract("train_ce needs a nonempty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract("batch size must be >= 1"));
    }
    let mut adam = AdamState::new(model.params.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)?;
    let mut log = TrainLog::default();
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        let perms: Vec<Permutation> = idx
            .iter()
            .map(|&i| Permutation::draw(dataset[i].0.len(), rng))
            .collect();
        let mut epoch_total = 0.0;
        for (chunk, pchunk) in idx.chunks(cfg.batch_size).zip(perms.chunks(cfg.batch_size)) {
            let batch: Vec<CeExample<'_>> = chunk
                .iter()
                .zip(pchunk)
                .map(|(&i, p)| CeExample {
                    backbone: &dataset[i].0,
                    seq: &dataset[i].1,
                    perm: p,
                })
                .collect();
            let (loss, grad) = ce_loss(model, &batch);
            if !loss.is_finite() {
                return Err(Error::numerical("train_ce", format!("loss became {loss}")));
            }
            epoch_total += loss * batch.len() as f64;
            adam.step(&mut model.params, &grad)?;
        }
        log.epoch_losses.push(epoch_total / dataset.len() as f64);
    }
    Ok(log)
}
