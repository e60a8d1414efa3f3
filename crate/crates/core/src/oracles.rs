//! In-silico property predictors and the weighted suite that bundles them.
//!
//! The composition oracles (hydropathy, net charge, residue categories) only
//! look at which residues occur; designability scores a sequence by its
//! per-residue likelihood under a frozen hidden-teacher model and is the only
//! oracle that depends on the backbone.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng_from_seed;
use crate::seqmodel::{draw_orders, order_average_logprob, Alphabet, Backbone, PolicyModel, Sequence};

/// Whether larger or smaller raw scores are preferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        }
    }
}

/// Pair-admission threshold δ_k.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Threshold {
    /// Fixed gap in the property's (sign-adjusted) units.
    Absolute(f64),
    /// Fraction of the raw score standard deviation within the rollout batch.
    StdFraction(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::StdFraction(0.25)
    }
}

impl Threshold {
    /// Resolves δ_k for a batch whose raw score standard deviation is `std`.
    pub fn resolve(self, std: f64) -> f64 {
        match self {
            Threshold::Absolute(d) => d,
            Threshold::StdFraction(f) => f * std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertySpec {
    pub name: String,
    pub weight: f64,
    #[serde(default)]
    pub threshold: Threshold,
    pub direction: Direction,
}

/// A scoring function `M_k(backbone, sequence) → ℝ`.
pub trait Scorer: Send + Sync {
    fn score(&self, backbone: &Backbone, seq: &Sequence) -> Result<f64>;
}

/// Kyte–Doolittle hydropathy index.
pub fn kyte_doolittle() -> BTreeMap<String, f64> {
    [
        ("A", 1.8),
        ("R", -4.5),
        ("N", -3.5),
        ("D", -3.5),
        ("C", 2.5),
        ("Q", -3.5),
        ("E", -3.5),
        ("G", -0.4),
        ("H", -3.2),
        ("I", 4.5),
        ("L", 3.8),
        ("K", -3.9),
        ("M", 1.9),
        ("F", 2.8),
        ("P", -1.6),
        ("S", -0.8),
        ("T", -0.7),
        ("W", -0.9),
        ("Y", -1.3),
        ("V", 4.2),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Residue charges used by [`net_charge_per_100`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeRule {
    pub positive: String,
    pub negative: String,
    pub histidine: String,
    pub histidine_charge: f64,
}

impl Default for ChargeRule {
    fn default() -> Self {
        ChargeRule {
            positive: "KR".into(),
            negative: "DE".into(),
            histidine: "H".into(),
            histidine_charge: 0.1,
        }
    }
}

/// A group of residues contributing `weight · fraction` to the
/// thermostability category score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidueCategory {
    pub residues: String,
    pub weight: f64,
}

pub fn default_thermo_categories() -> Vec<ResidueCategory> {
    [
        ("KR", 1.0),
        ("DE", 0.3),
        ("NQST", 0.2),
        ("ACGHP", -0.5),
        ("ILMFWYV", 0.2),
    ]
    .into_iter()
    .map(|(r, w)| ResidueCategory {
        residues: r.into(),
        weight: w,
    })
    .collect()
}

/// All composition-oracle tables. Lives in the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleTables {
    pub hydropathy: BTreeMap<String, f64>,
    pub charge: ChargeRule,
    pub thermo_categories: Vec<ResidueCategory>,
}

impl Default for OracleTables {
    fn default() -> Self {
        OracleTables {
            hydropathy: kyte_doolittle(),
            charge: ChargeRule::default(),
            thermo_categories: default_thermo_categories(),
        }
    }
}

fn nonempty(seq: &str, what: &str) -> Result<usize> {
    match seq.chars().count() {
        0 => Err(Error::contract(format!("{what} needs a nonempty sequence"))),
        n => Ok(n),
    }
}

/// Grand average of hydropathy: mean per-residue table value.
pub fn gravy(seq: &str, table: &BTreeMap<String, f64>) -> Result<f64> {
    nonempty(seq, "gravy")?;
    // Running mean, exact when every residue has the same value.
    let mut mean = 0.0;
    for (i, c) in seq.chars().enumerate() {
        let mut key = [0u8; 4];
        let v = *table
            .get(&*c.encode_utf8(&mut key))
            .ok_or_else(|| Error::contract(format!("residue '{c}' has no hydropathy value")))?;
        mean += (v - mean) / (i + 1) as f64;
    }
    Ok(mean)
}

/// `100 · (#positive + h·#histidine − #negative) / L`.
pub fn net_charge_per_100(seq: &str, rule: &ChargeRule) -> Result<f64> {
    let n = nonempty(seq, "net_charge_per_100")?;
    let mut charge = 0.0;
    for c in seq.chars() {
        if rule.positive.contains(c) {
            charge += 1.0;
        } else if rule.negative.contains(c) {
            charge -= 1.0;
        } else if rule.histidine.contains(c) {
            charge += rule.histidine_charge;
        }
    }
    Ok(100.0 * charge / n as f64)
}

/// `Σ_c weight_c · fraction of residues in category c`.
pub fn thermo_category_score(seq: &str, categories: &[ResidueCategory]) -> Result<f64> {
    let n = nonempty(seq, "thermo_category_score")? as f64;
    Ok(categories
        .iter()
        .map(|cat| {
            let count = seq.chars().filter(|&c| cat.residues.contains(c)).count();
            cat.weight * count as f64 / n
        })
        .sum())
}

/// Number of decoding orders the designability oracle averages over.
pub const DESIGNABILITY_ORDERS: usize = 4;

/// Per-residue shared-order log-likelihood of `seq` under the frozen teacher.
pub fn designability(teacher: &PolicyModel, backbone: &Backbone, seq: &Sequence, seed: u64) -> f64 {
    let orders = draw_orders(backbone.len(), DESIGNABILITY_ORDERS, &mut rng_from_seed(seed));
    order_average_logprob(teacher, backbone, seq, &orders) / backbone.len() as f64
}

pub struct GravyScorer {
    pub alphabet: Alphabet,
    pub table: BTreeMap<String, f64>,
}

impl Scorer for GravyScorer {
    fn score(&self, _: &Backbone, seq: &Sequence) -> Result<f64> {
        gravy(&self.alphabet.decode(seq), &self.table)
    }
}

pub struct NetChargeScorer {
    pub alphabet: Alphabet,
    pub rule: ChargeRule,
}

impl Scorer for NetChargeScorer {
    fn score(&self, _: &Backbone, seq: &Sequence) -> Result<f64> {
        net_charge_per_100(&self.alphabet.decode(seq), &self.rule)
    }
}

pub struct ThermoScorer {
    pub alphabet: Alphabet,
    pub categories: Vec<ResidueCategory>,
}

impl Scorer for ThermoScorer {
    fn score(&self, _: &Backbone, seq: &Sequence) -> Result<f64> {
        thermo_category_score(&self.alphabet.decode(seq), &self.categories)
    }
}

pub struct DesignabilityScorer {
    pub teacher: PolicyModel,
    pub seed: u64,
}

impl Scorer for DesignabilityScorer {
    fn score(&self, backbone: &Backbone, seq: &Sequence) -> Result<f64> {
        Ok(designability(&self.teacher, backbone, seq, self.seed))
    }
}

/// Explicit score table, for tiny enumerable instances.
pub struct LookupScorer {
    pub values: HashMap<Sequence, f64>,
}

impl Scorer for LookupScorer {
    fn score(&self, _: &Backbone, seq: &Sequence) -> Result<f64> {
        self.values
            .get(seq)
            .copied()
            .ok_or_else(|| Error::contract(format!("no table entry for {:?}", seq.0)))
    }
}

/// Built-in oracle kinds selectable from the config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Gravy,
    NetCharge,
    Thermo,
    Designability,
}

impl OracleKind {
    pub fn natural_direction(self) -> Direction {
        match self {
            OracleKind::Gravy => Direction::Minimize,
            _ => Direction::Maximize,
        }
    }
}

/// Weighted collection of oracles.
pub struct OracleSuite {
    specs: Vec<PropertySpec>,
    scorers: Vec<Box<dyn Scorer>>,
}

impl fmt::Debug for OracleSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OracleSuite").field("specs", &self.specs).finish()
    }
}

impl OracleSuite {
    pub fn new(entries: Vec<(PropertySpec, Box<dyn Scorer>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::contract("oracle suite needs at least one property"));
        }
        for (spec, _) in &entries {
            if !spec.weight.is_finite() || spec.weight < 0.0 {
                return Err(Error::contract(format!(
                    "property '{}' has invalid weight {}",
                    spec.name, spec.weight
                )));
            }
        }
        let (specs, scorers) = entries.into_iter().unzip();
        Ok(OracleSuite { specs, scorers })
    }

    /// Builds a suite from config-level oracle kinds.
    pub fn from_kinds(
        defs: &[(PropertySpec, OracleKind)],
        tables: &OracleTables,
        alphabet: &Alphabet,
        teacher: Option<&PolicyModel>,
        designability_seed: u64,
    ) -> Result<Self> {
        let mut entries: Vec<(PropertySpec, Box<dyn Scorer>)> = Vec::new();
        for (spec, kind) in defs {
            let scorer: Box<dyn Scorer> = match kind {
                OracleKind::Gravy => Box::new(GravyScorer {
                    alphabet: alphabet.clone(),
                    table: tables.hydropathy.clone(),
                }),
                OracleKind::NetCharge => Box::new(NetChargeScorer {
                    alphabet: alphabet.clone(),
                    rule: tables.charge.clone(),
                }),
                OracleKind::Thermo => Box::new(ThermoScorer {
                    alphabet: alphabet.clone(),
                    categories: tables.thermo_categories.clone(),
                }),
                OracleKind::Designability => Box::new(DesignabilityScorer {
                    teacher: teacher
                        .ok_or_else(|| Error::contract("designability oracle needs a teacher"))?
                        .clone(),
                    seed: designability_seed,
                }),
            };
            entries.push((spec.clone(), scorer));
        }
        OracleSuite::new(entries)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[PropertySpec] {
        &self.specs
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.specs.iter().map(|s| s.weight).collect()
    }

    /// Sign-adjusted score of one property: greater is always preferred.
    pub fn score_one(&self, k: usize, backbone: &Backbone, seq: &Sequence) -> Result<f64> {
        let raw = self.scorers[k].score(backbone, seq)?;
        if !raw.is_finite() {
            return Err(Error::numerical(
                format!("oracle '{}'", self.specs[k].name),
                format!("non-finite score {raw}"),
            ));
        }
        Ok(self.specs[k].direction.sign() * raw)
    }

    /// `K × n` matrix of sign-adjusted scores.
    pub fn score_all(&self, backbone: &Backbone, seqs: &[Sequence]) -> Result<Vec<Vec<f64>>> {
        (0..self.len())
            .map(|k| {
                seqs.par_iter()
                    .enumerate()
                    .map(|(i, s)| {
                        self.score_one(k, backbone, s).map_err(|e| {
                            Error::contract(format!(
                                "property '{}', sequence {i}: {e}",
                                self.specs[k].name
                            ))
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_seed;
    use crate::seqmodel::{Arch, Permutation};
    use proptest::prelude::*;
    use rand::Rng;

    fn kd() -> BTreeMap<String, f64> {
        kyte_doolittle()
    }

    #[test]
    fn gravy_homopolymer_and_concatenation() {
        for (r, v) in kd() {
            assert_eq!(gravy(&r.repeat(13), &kd()).unwrap(), v);
        }
        let s = "MKTAYIAKQRQISFVKSHFSRQ";
        let twice = format!("{s}{s}");
        assert!((gravy(&twice, &kd()).unwrap() - gravy(s, &kd()).unwrap()).abs() < 1e-12);
        assert!(gravy("", &kd()).is_err());
        assert!(gravy("AXA", &kd()).is_err());
    }

    #[test]
    fn gravy_random_50mer_matches_second_mean() {
        let mut rng = rng_from_seed(3);
        let aa: Vec<char> = crate::seqmodel::AMINO_ACIDS.chars().collect();
        let s: String = (0..50).map(|_| aa[rng.random_range(0..20)]).collect();
        let table = kd();
        let mut vals: Vec<f64> = s.chars().map(|c| table[&c.to_string()]).collect();
        vals.reverse();
        let mean = vals.iter().sum::<f64>() / 50.0;
        assert!((gravy(&s, &table).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn net_charge_examples() {
        let rule = ChargeRule::default();
        assert_eq!(net_charge_per_100("GGGGGG", &rule).unwrap(), 0.0);
        assert_eq!(net_charge_per_100("KKDD", &rule).unwrap(), 0.0);
        assert_eq!(net_charge_per_100("KKKKK", &rule).unwrap(), 100.0);
        assert!((net_charge_per_100("HG", &rule).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn thermo_examples() {
        let cats = default_thermo_categories();
        assert_eq!(thermo_category_score(&"K".repeat(9), &cats).unwrap(), 1.0);
        assert_eq!(thermo_category_score(&"G".repeat(9), &cats).unwrap(), -0.5);
        let mixed = format!("{}{}", "K".repeat(10), "G".repeat(10));
        assert!((thermo_category_score(&mixed, &cats).unwrap() - 0.25).abs() < 1e-12);
    }

    fn teacher() -> PolicyModel {
        PolicyModel::teacher(Arch::default(), 77, 3.0)
    }

    #[test]
    fn designability_single_position_and_determinism() {
        let t = teacher();
        let bb = Backbone::random("b", 1, 8, &mut rng_from_seed(1));
        let seq = Sequence(vec![5]);
        let logits = t.step_logits(&bb, &[], 0).unwrap();
        let expect = logits[5] - crate::numerics::log_sum_exp(&logits);
        assert!((designability(&t, &bb, &seq, 9) - expect).abs() < 1e-12);

        let bb = Backbone::random("b", 15, 8, &mut rng_from_seed(2));
        let seq = Sequence((0..15).map(|i| (i * 7 % 20) as u8).collect());
        assert_eq!(designability(&t, &bb, &seq, 4), designability(&t, &bb, &seq, 4));
    }

    #[test]
    fn teacher_greedy_beats_random_designability() {
        let t = teacher();
        let mut rng = rng_from_seed(10);
        let mut wins = 0;
        for i in 0..100 {
            let bb = Backbone::random(format!("b{i}"), 20, 8, &mut rng);
            let greedy = t
                .sample(&bb, &Permutation::draw(20, &mut rng), 1e-9, &mut rng)
                .unwrap()
                .sequence;
            let random = Sequence((0..20).map(|_| rng.random_range(0..20u8)).collect());
            if designability(&t, &bb, &greedy, 1) >= designability(&t, &bb, &random, 1) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "{wins}");
    }

    fn solubility_charge_suite(al: &Alphabet) -> OracleSuite {
        let defs = vec![
            (
                PropertySpec {
                    name: "solubility".into(),
                    weight: 0.4,
                    threshold: Threshold::default(),
                    direction: Direction::Minimize,
                },
                OracleKind::Gravy,
            ),
            (
                PropertySpec {
                    name: "charge".into(),
                    weight: 0.6,
                    threshold: Threshold::default(),
                    direction: Direction::Maximize,
                },
                OracleKind::NetCharge,
            ),
        ];
        OracleSuite::from_kinds(&defs, &OracleTables::default(), al, None, 0).unwrap()
    }

    #[test]
    fn score_all_matches_elementwise_calls() {
        let al = Alphabet::amino_acids();
        let suite = solubility_charge_suite(&al);
        let bb = Backbone::random("b", 12, 8, &mut rng_from_seed(0));
        let mut rng = rng_from_seed(5);
        let seqs: Vec<Sequence> = (0..8)
            .map(|_| Sequence((0..12).map(|_| rng.random_range(0..20u8)).collect()))
            .collect();
        let m = suite.score_all(&bb, &seqs).unwrap();
        assert_eq!(m.len(), 2);
        for (i, s) in seqs.iter().enumerate() {
            let txt = al.decode(s);
            assert_eq!(m[0][i], -gravy(&txt, &kd()).unwrap());
            assert_eq!(m[1][i], net_charge_per_100(&txt, &ChargeRule::default()).unwrap());
        }
        let mut rev = seqs.clone();
        rev.reverse();
        let mr = suite.score_all(&bb, &rev).unwrap();
        for k in 0..2 {
            let mut col = m[k].clone();
            col.reverse();
            assert_eq!(mr[k], col);
        }
    }

    #[test]
    fn score_all_single_entry_and_error_annotation() {
        let al = Alphabet::amino_acids();
        let bb = Backbone::random("b", 3, 8, &mut rng_from_seed(0));
        let spec = PropertySpec {
            name: "table".into(),
            weight: 1.0,
            threshold: Threshold::Absolute(0.0),
            direction: Direction::Minimize,
        };
        let seq = al.encode("ACD").unwrap();
        let lookup = LookupScorer {
            values: [(seq.clone(), 2.5)].into_iter().collect(),
        };
        let suite = OracleSuite::new(vec![(spec, Box::new(lookup))]).unwrap();
        assert_eq!(suite.score_all(&bb, &[seq]).unwrap(), vec![vec![-2.5]]);
        let err = suite
            .score_all(&bb, &[al.encode("AAA").unwrap()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("'table'") && err.contains("sequence 0"), "{err}");
        assert!(OracleSuite::new(Vec::new()).is_err());
    }

    proptest! {
        #[test]
        fn composition_oracles_ignore_order(
            idx in proptest::collection::vec(0usize..20, 1..40),
            seed in any::<u64>(),
        ) {
            let aa: Vec<char> = crate::seqmodel::AMINO_ACIDS.chars().collect();
            let s: String = idx.iter().map(|&i| aa[i]).collect();
            let mut shuffled: Vec<char> = s.chars().collect();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng_from_seed(seed));
            let t: String = shuffled.into_iter().collect();
            let cats = default_thermo_categories();
            let rule = ChargeRule::default();
            prop_assert!((gravy(&s, &kd()).unwrap() - gravy(&t, &kd()).unwrap()).abs() < 1e-12);
            prop_assert!((net_charge_per_100(&s, &rule).unwrap() - net_charge_per_100(&t, &rule).unwrap()).abs() < 1e-9);
            prop_assert!((thermo_category_score(&s, &cats).unwrap() - thermo_category_score(&t, &cats).unwrap()).abs() < 1e-12);
        }
    }
}
