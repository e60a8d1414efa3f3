//! Rollouts → per-property preference pairs with precomputed flexible margins,
//! plus the sampler that mixes properties evenly into training batches.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng_from_seed, Rng};
use crate::oracles::{OracleSuite, PropertySpec, Threshold};
use crate::seqmodel::{Alphabet, Sequence};

/// Per-batch score normalisation applied before deltas and margins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    #[default]
    Zscore,
}

/// `n` scored rollouts for one backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub backbone_id: String,
    pub sequences: Vec<Sequence>,
    /// `K × n`, sign-adjusted so that greater is preferred.
    pub scores: Vec<Vec<f64>>,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub backbone_id: String,
    pub winner: Sequence,
    pub loser: Sequence,
    /// Index of the property this pair was ranked under.
    pub property: usize,
    pub margin: f64,
    /// `r_{k'}(winner) − r_{k'}(loser)` for every property `k'`.
    pub deltas: Vec<f64>,
}

impl PreferencePair {
    /// The same comparison with winner and loser exchanged.
    pub fn swapped(&self) -> Self {
        PreferencePair {
            backbone_id: self.backbone_id.clone(),
            winner: self.loser.clone(),
            loser: self.winner.clone(),
            property: self.property,
            margin: -self.margin,
            deltas: self.deltas.iter().map(|d| -d).collect(),
        }
    }
}

/// Per-property pair datasets `D_1 … D_K` from one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDatasetGroup {
    pub properties: Vec<String>,
    pub per_property: Vec<Vec<PreferencePair>>,
    pub iteration: usize,
}

impl PairDatasetGroup {
    pub fn empty(properties: Vec<String>, iteration: usize) -> Self {
        let k = properties.len();
        PairDatasetGroup {
            properties,
            per_property: vec![Vec::new(); k],
            iteration,
        }
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_property.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.per_property.iter().map(Vec::len).sum()
    }

    /// Appends another group's pairs property by property.
    pub fn extend(&mut self, other: PairDatasetGroup) -> Result<()> {
        if other.properties != self.properties {
            return Err(Error::contract(format!(
                "cannot merge pair groups over {:?} and {:?}",
                self.properties, other.properties
            )));
        }
        for (dst, src) in self.per_property.iter_mut().zip(other.per_property) {
            dst.extend(src);
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &PreferencePair> {
        self.per_property.iter().flatten()
    }

    pub fn save(&self, path: &Path, alphabet: &Alphabet) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for p in self.iter() {
            let rec = PairRecord {
                backbone_id: p.backbone_id.clone(),
                winner: alphabet.decode(&p.winner),
                loser: alphabet.decode(&p.loser),
                property: self.properties[p.property].clone(),
                margin: p.margin,
                deltas: p.deltas.clone(),
                iteration: self.iteration,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads a pair file written by [`PairDatasetGroup::save`]. Property names
    /// are resolved against `properties`; an empty file yields an empty group
    /// at iteration 0.
    pub fn load(path: &Path, alphabet: &Alphabet, properties: &[String]) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut group = PairDatasetGroup::empty(properties.to_vec(), 0);
        let mut seen_iteration = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let lineno = i + 1;
            let bad = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg,
            };
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PairRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let property = properties
                .iter()
                .position(|p| *p == rec.property)
                .ok_or_else(|| bad(format!("unknown property '{}'", rec.property)))?;
            match seen_iteration {
                None => seen_iteration = Some(rec.iteration),
                Some(t) if t != rec.iteration => {
                    return Err(bad(format!(
                        "iteration {} differs from earlier records ({t})",
                        rec.iteration
                    )))
                }
                _ => {}
            }
            let winner = alphabet.encode(&rec.winner).map_err(|e| bad(e.to_string()))?;
            let loser = alphabet.encode(&rec.loser).map_err(|e| bad(e.to_string()))?;
            group.per_property[property].push(PreferencePair {
                backbone_id: rec.backbone_id,
                winner,
                loser,
                property,
                margin: rec.margin,
                deltas: rec.deltas,
            });
        }
        group.iteration = seen_iteration.unwrap_or(0);
        Ok(group)
    }
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    backbone_id: String,
    winner: String,
    loser: String,
    property: String,
    margin: f64,
    deltas: Vec<f64>,
    iteration: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-scores with population std; a constant row maps to zeros.
pub fn normalize(row: &[f64], mode: Normalization) -> Vec<f64> {
    match mode {
        Normalization::None => row.to_vec(),
        Normalization::Zscore => {
            let (mean, std) = mean_std(row);
            if std > 0.0 {
                row.iter().map(|x| (x - mean) / std).collect()
            } else {
                vec![0.0; row.len()]
            }
        }
    }
}

/// Candidate `(winner, loser)` index pairs: rank the rollouts by `scores`
/// descending (ties by ascending sequence) and pair rank `i` with rank
/// `n/2 + i`.
pub fn candidate_pairs(scores: &[f64], seqs: &[Sequence]) -> Result<Vec<(usize, usize)>> {
    let n = scores.len();
    if n < 2 || n % 2 != 0 {
        return Err(Error::contract(format!(
            "pairing needs an even number (>= 2) of rollouts, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| seqs[a].cmp(&seqs[b]))
    });
    let half = n / 2;
    Ok((0..half).map(|i| (order[i], order[half + i])).collect())
}

/// `λ · Σ_{k'≠k} w_{k'} · delta_{k'}`.
pub fn flexible_margin(k: usize, deltas: &[f64], weights: &[f64], lambda: f64) -> f64 {
    lambda
        * deltas
            .iter()
            .zip(weights)
            .enumerate()
            .filter(|&(j, _)| j != k)
            .map(|(_, (d, w))| w * d)
            .sum::<f64>()
}

fn check_batch(batch: &RolloutBatch, k: usize) -> Result<usize> {
    let n = batch.sequences.len();
    if n < 2 || n % 2 != 0 {
        return Err(Error::contract(format!(
            "rollout batch for '{}' has {n} sequences; an even count >= 2 is required",
            batch.backbone_id
        )));
    }
    if batch.scores.len() != k || batch.scores.iter().any(|r| r.len() != n) {
        return Err(Error::contract(format!(
            "score matrix for '{}' is not {k} x {n}",
            batch.backbone_id
        )));
    }
    Ok(n)
}

/// Per-property pair datasets with precomputed flexible margins.
pub fn build_pairs_with_specs(
    batch: &RolloutBatch,
    specs: &[PropertySpec],
    lambda: f64,
    normalization: Normalization,
) -> Result<PairDatasetGroup> {
    let k_total = specs.len();
    check_batch(batch, k_total)?;
    let weights: Vec<f64> = specs.iter().map(|s| s.weight).collect();
    let norm: Vec<Vec<f64>> = batch
        .scores
        .iter()
        .map(|row| normalize(row, normalization))
        .collect();
    let mut group = PairDatasetGroup::empty(
        specs.iter().map(|s| s.name.clone()).collect(),
        batch.iteration,
    );
    for (k, spec) in specs.iter().enumerate() {
        let raw = &batch.scores[k];
        let delta_k = spec.threshold.resolve(mean_std(raw).1);
        for (w, l) in candidate_pairs(raw, &batch.sequences)? {
            if !(raw[w] - raw[l] > delta_k) || batch.sequences[w] == batch.sequences[l] {
                continue;
            }
            let deltas: Vec<f64> = norm.iter().map(|row| row[w] - row[l]).collect();
            group.per_property[k].push(PreferencePair {
                backbone_id: batch.backbone_id.clone(),
                winner: batch.sequences[w].clone(),
                loser: batch.sequences[l].clone(),
                property: k,
                margin: flexible_margin(k, &deltas, &weights, lambda),
                deltas,
            });
        }
    }
    Ok(group)
}

pub fn build_pairs(
    batch: &RolloutBatch,
    suite: &OracleSuite,
    lambda: f64,
    normalization: Normalization,
) -> Result<PairDatasetGroup> {
    build_pairs_with_specs(batch, suite.specs(), lambda, normalization)
}

/// Name of the single property of a weighted-score pair group.
pub const WEIGHTED_SCORE: &str = "weighted_score";

/// Aggregate `Σ_k w_k · score_k` (after normalisation) per rollout.
pub fn aggregate_scores(batch: &RolloutBatch, weights: &[f64], normalization: Normalization) -> Vec<f64> {
    let n = batch.sequences.len();
    let mut agg = vec![0.0; n];
    for (row, &w) in batch.scores.iter().zip(weights) {
        for (a, x) in agg.iter_mut().zip(normalize(row, normalization)) {
            *a += w * x;
        }
    }
    agg
}

/// Single-dataset pairs ranked by the weighted aggregate score, for the
/// weighted-score DPO baseline. Margins are zero; deltas still hold the
/// per-property differences.
pub fn build_weighted_pairs(
    batch: &RolloutBatch,
    specs: &[PropertySpec],
    threshold: Threshold,
    normalization: Normalization,
) -> Result<PairDatasetGroup> {
    check_batch(batch, specs.len())?;
    let weights: Vec<f64> = specs.iter().map(|s| s.weight).collect();
    let agg = aggregate_scores(batch, &weights, normalization);
    let norm: Vec<Vec<f64>> = batch
        .scores
        .iter()
        .map(|row| normalize(row, normalization))
        .collect();
    let delta = threshold.resolve(mean_std(&agg).1);
    let mut group = PairDatasetGroup::empty(vec![WEIGHTED_SCORE.to_string()], batch.iteration);
    for (w, l) in candidate_pairs(&agg, &batch.sequences)? {
        if !(agg[w] - agg[l] > delta) || batch.sequences[w] == batch.sequences[l] {
            continue;
        }
        group.per_property[0].push(PreferencePair {
            backbone_id: batch.backbone_id.clone(),
            winner: batch.sequences[w].clone(),
            loser: batch.sequences[l].clone(),
            property: 0,
            margin: 0.0,
            deltas: norm.iter().map(|row| row[w] - row[l]).collect(),
        });
    }
    Ok(group)
}

struct Pool<'a> {
    pairs: Vec<&'a PreferencePair>,
    order: Vec<usize>,
    cursor: usize,
}

/// Infinite stream of batches mixing all nonempty properties evenly.
///
/// Each batch holds `⌊B/K⌋` pairs per nonempty property; the `B mod K`
/// leftover slots rotate across properties from batch to batch. Within a
/// property pairs are drawn without replacement and reshuffled on exhaustion.
pub struct EvenSampler<'a> {
    pools: Vec<Pool<'a>>,
    batch_size: usize,
    batches: usize,
    rng: Rng,
}

impl<'a> EvenSampler<'a> {
    pub fn new(groups: &'a [PairDatasetGroup], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::contract("batch size must be >= 1"));
        }
        let k = groups.first().map_or(0, |g| g.properties.len());
        let mut rng = rng_from_seed(seed);
        let mut pools = Vec::new();
        for prop in 0..k {
            let pairs: Vec<&PreferencePair> = groups
                .iter()
                .flat_map(|g| g.per_property.get(prop).into_iter().flatten())
                .collect();
            if pairs.is_empty() {
                continue;
            }
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut rng);
            pools.push(Pool {
                pairs,
                order,
                cursor: 0,
            });
        }
        if pools.is_empty() {
            return Err(Error::contract("every pair dataset is empty"));
        }
        Ok(EvenSampler {
            pools,
            batch_size,
            batches: 0,
            rng,
        })
    }

    /// Number of nonempty property datasets being mixed.
    pub fn active_properties(&self) -> usize {
        self.pools.len()
    }

    /// Per-pool quota for the next batch, in pool order.
    pub fn next_quota(&self) -> Vec<usize> {
        let k = self.pools.len();
        let base = self.batch_size / k;
        let extra = self.batch_size % k;
        let start = (self.batches * extra) % k;
        (0..k)
            .map(|j| base + usize::from((j + k - start) % k < extra))
            .collect()
    }

    pub fn next_batch(&mut self) -> Vec<&'a PreferencePair> {
        let quota = self.next_quota();
        let mut batch = Vec::with_capacity(self.batch_size);
        for (pool, q) in self.pools.iter_mut().zip(quota) {
            for _ in 0..q {
                if pool.cursor == pool.order.len() {
                    pool.order.shuffle(&mut self.rng);
                    pool.cursor = 0;
                }
                batch.push(pool.pairs[pool.order[pool.cursor]]);
                pool.cursor += 1;
            }
        }
        self.batches += 1;
        batch
    }
}

impl<'a> Iterator for EvenSampler<'a> {
    type Item = Vec<&'a PreferencePair>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::Direction;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn spec(name: &str, weight: f64, threshold: Threshold) -> PropertySpec {
        PropertySpec {
            name: name.into(),
            weight,
            threshold,
            direction: Direction::Maximize,
        }
    }

    fn seqs(n: usize) -> Vec<Sequence> {
        (0..n).map(|i| Sequence(vec![i as u8, 0, 1])).collect()
    }

    #[test]
    fn eight_rollouts_pair_rank_i_with_rank_i_plus_four() {
        let scores = vec![0.1, 0.9, 0.5, 0.3, 0.7, 0.2, 0.8, 0.4];
        let pairs = candidate_pairs(&scores, &seqs(8)).unwrap();
        // Ranked: 1(.9) 6(.8) 4(.7) 2(.5) | 7(.4) 3(.3) 5(.2) 0(.1)
        assert_eq!(pairs, vec![(1, 7), (6, 3), (4, 5), (2, 0)]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let s = vec![
            Sequence(vec![2]),
            Sequence(vec![0]),
            Sequence(vec![1]),
            Sequence(vec![3]),
        ];
        let pairs = candidate_pairs(&[1.0, 1.0, 1.0, 0.0], &s).unwrap();
        assert_eq!(pairs, vec![(1, 0), (2, 3)]);
    }

    #[test]
    fn odd_batch_is_contract_violation() {
        let batch = RolloutBatch {
            backbone_id: "b".into(),
            sequences: seqs(3),
            scores: vec![vec![0.0, 1.0, 2.0]],
            iteration: 0,
        };
        let specs = [spec("p", 1.0, Threshold::default())];
        assert!(matches!(
            build_pairs_with_specs(&batch, &specs, 1.0, Normalization::Zscore),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn identical_rollouts_give_no_pairs() {
        let s = vec![Sequence(vec![1, 2, 3]); 8];
        let batch = RolloutBatch {
            backbone_id: "b".into(),
            sequences: s,
            scores: vec![vec![0.5; 8], vec![-1.0; 8]],
            iteration: 2,
        };
        let specs = [
            spec("a", 0.6, Threshold::default()),
            spec("b", 0.4, Threshold::Absolute(0.0)),
        ];
        let g = build_pairs_with_specs(&batch, &specs, 1.0, Normalization::Zscore).unwrap();
        assert_eq!(g.counts(), vec![0, 0]);
    }

    #[test]
    fn margin_formula_example() {
        let w = [0.6, 0.4];
        let d = [0.5, -0.25];
        assert!((flexible_margin(0, &d, &w, 1.0) - (-0.1)).abs() < 1e-15);
        assert!((flexible_margin(1, &d, &w, 1.0) - 0.3).abs() < 1e-15);
        assert_eq!(flexible_margin(0, &d, &w, 0.0), 0.0);
    }

    #[test]
    fn raw_mode_margins_use_raw_deltas() {
        let batch = RolloutBatch {
            backbone_id: "b".into(),
            sequences: seqs(2),
            scores: vec![vec![1.5, 1.0], vec![0.0, 0.25]],
            iteration: 0,
        };
        let specs = [
            spec("a", 0.6, Threshold::Absolute(0.0)),
            spec("b", 0.4, Threshold::Absolute(0.0)),
        ];
        let g = build_pairs_with_specs(&batch, &specs, 1.0, Normalization::None).unwrap();
        let p = &g.per_property[0][0];
        assert_eq!(p.deltas, vec![0.5, -0.25]);
        assert!((p.margin + 0.1).abs() < 1e-15);
        let q = &g.per_property[1][0];
        assert_eq!(q.deltas, vec![-0.5, 0.25]);
        assert!((q.margin + 0.3).abs() < 1e-15);
    }

    #[test]
    fn weighted_pairs_rank_by_aggregate() {
        let mut rng = rng_from_seed(8);
        let s = seqs(8);
        let scores: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..8).map(|_| rng.random::<f64>()).collect())
            .collect();
        let batch = RolloutBatch {
            backbone_id: "b".into(),
            sequences: s.clone(),
            scores: scores.clone(),
            iteration: 0,
        };
        let specs = [
            spec("a", 0.6, Threshold::default()),
            spec("b", 0.4, Threshold::default()),
        ];
        let g = build_weighted_pairs(&batch, &specs, Threshold::Absolute(-1.0), Normalization::None)
            .unwrap();
        // Independent sort of the raw weighted sums.
        let agg: Vec<f64> = (0..8).map(|i| 0.6 * scores[0][i] + 0.4 * scores[1][i]).collect();
        let mut idx: Vec<usize> = (0..8).collect();
        idx.sort_by(|&a, &b| agg[b].partial_cmp(&agg[a]).unwrap());
        let expect: Vec<(Sequence, Sequence)> = (0..4)
            .map(|i| (s[idx[i]].clone(), s[idx[i + 4]].clone()))
            .collect();
        let got: Vec<(Sequence, Sequence)> = g.per_property[0]
            .iter()
            .map(|p| (p.winner.clone(), p.loser.clone()))
            .collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn weighted_single_property_matches_per_property() {
        let mut rng = rng_from_seed(2);
        let scores = vec![(0..8).map(|_| rng.random::<f64>()).collect::<Vec<_>>()];
        let batch = RolloutBatch {
            backbone_id: "b".into(),
            sequences: seqs(8),
            scores,
            iteration: 0,
        };
        let specs = [spec("a", 1.0, Threshold::default())];
        let a = build_pairs_with_specs(&batch, &specs, 0.0, Normalization::Zscore).unwrap();
        let b =
            build_weighted_pairs(&batch, &specs, Threshold::default(), Normalization::Zscore).unwrap();
        assert_eq!(a.per_property[0], b.per_property[0]);
    }

    fn group_with(counts: &[usize]) -> PairDatasetGroup {
        let names = (0..counts.len()).map(|k| format!("p{k}")).collect();
        let mut g = PairDatasetGroup::empty(names, 1);
        for (k, &c) in counts.iter().enumerate() {
            for i in 0..c {
                g.per_property[k].push(PreferencePair {
                    backbone_id: format!("b{i}"),
                    winner: Sequence(vec![k as u8, i as u8]),
                    loser: Sequence(vec![9, i as u8]),
                    property: k,
                    margin: 0.0,
                    deltas: vec![0.0; counts.len()],
                });
            }
        }
        g
    }

    fn per_property(batch: &[&PreferencePair], k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for p in batch {
            c[p.property] += 1;
        }
        c
    }

    #[test]
    fn even_split_two_properties() {
        let groups = [group_with(&[50, 70])];
        let mut s = EvenSampler::new(&groups, 64, 0).unwrap();
        for _ in 0..5 {
            assert_eq!(per_property(&s.next_batch(), 2), vec![32, 32]);
        }
    }

    #[test]
    fn three_properties_rotate_extra_slot() {
        let groups = [group_with(&[30, 30, 30])];
        let mut s = EvenSampler::new(&groups, 64, 0).unwrap();
        assert_eq!(per_property(&s.next_batch(), 3), vec![22, 21, 21]);
        assert_eq!(per_property(&s.next_batch(), 3), vec![21, 22, 21]);
        assert_eq!(per_property(&s.next_batch(), 3), vec![21, 21, 22]);
        assert_eq!(per_property(&s.next_batch(), 3), vec![22, 21, 21]);
    }

    #[test]
    fn empty_property_is_skipped() {
        let groups = [group_with(&[10, 0, 10])];
        let mut s = EvenSampler::new(&groups, 64, 0).unwrap();
        assert_eq!(per_property(&s.next_batch(), 3), vec![32, 0, 32]);
        let none = [group_with(&[0, 0])];
        assert!(EvenSampler::new(&none, 8, 0).is_err());
    }

    #[test]
    fn sampler_epoch_touches_each_pair_once() {
        let groups = [group_with(&[12, 12])];
        let mut s = EvenSampler::new(&groups, 8, 3).unwrap();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..3 {
            for p in s.next_batch() {
                assert!(seen.insert((p.property, p.winner.clone())), "repeat before epoch end");
            }
        }
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn load_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let al = Alphabet::amino_acids();
        let g = group_with(&[1]);
        g.save(&path, &al).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json}\n");
        std::fs::write(&path, text).unwrap();
        match PairDatasetGroup::load(&path, &al, &["p0".into()]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn roundtrip_small_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let al = Alphabet::amino_acids();
        let names = vec!["p0".to_string(), "p1".to_string()];
        let empty = PairDatasetGroup::empty(names.clone(), 0);
        let path = dir.path().join("empty.jsonl");
        empty.save(&path, &al).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert_eq!(PairDatasetGroup::load(&path, &al, &names).unwrap(), empty);

        let mut one = PairDatasetGroup::empty(names.clone(), 4);
        one.per_property[1].push(PreferencePair {
            backbone_id: "bb0001".into(),
            winner: al.encode("MKV").unwrap(),
            loser: al.encode("MKL").unwrap(),
            property: 1,
            margin: 0.1 + 0.2,
            deltas: vec![1.0 / 3.0, -2.5e-17],
        });
        let path = dir.path().join("one.jsonl");
        one.save(&path, &al).unwrap();
        assert_eq!(PairDatasetGroup::load(&path, &al, &names).unwrap(), one);
    }

    proptest! {
        #[test]
        fn emitted_pairs_respect_threshold_and_count(
            raw in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 8), 2),
            lambda in 0.0f64..2.0,
        ) {
            let batch = RolloutBatch {
                backbone_id: "b".into(),
                sequences: seqs(8),
                scores: raw.clone(),
                iteration: 0,
            };
            let specs = [spec("a", 0.6, Threshold::default()), spec("b", 0.4, Threshold::StdFraction(0.5))];
            let g = build_pairs_with_specs(&batch, &specs, lambda, Normalization::Zscore).unwrap();
            for (k, pairs) in g.per_property.iter().enumerate() {
                prop_assert!(pairs.len() <= 4);
                let delta = specs[k].threshold.resolve(mean_std(&raw[k]).1);
                for p in pairs {
                    let w = p.winner.0[0] as usize;
                    let l = p.loser.0[0] as usize;
                    prop_assert!(raw[k][w] > raw[k][l] + delta);
                    let s = p.swapped();
                    prop_assert_eq!(s.margin, -p.margin);
                    let m = flexible_margin(k, &s.deltas, &[0.6, 0.4], lambda);
                    prop_assert!((m + p.margin).abs() < 1e-12);
                }
            }
            let g0 = build_pairs_with_specs(&batch, &specs, 0.0, Normalization::Zscore).unwrap();
            prop_assert!(g0.iter().all(|p| p.margin == 0.0));
        }
    }
}
