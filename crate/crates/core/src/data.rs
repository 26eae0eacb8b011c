//! Datasets: synthetic domain-shifted generation, embedding files, pair
//! sampling, label normalization, and deterministic splits.
//!
//! The embedding file format is delimiter-separated text with the header
//! `id,domain,age,f0,...,f{D-1}`. The age field may be empty on target
//! rows; `#`-prefixed lines are comments. Writing uses the shortest
//! round-tripping float representation, so save followed by load
//! reproduces a dataset exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::rank_target;

pub const MAX_AGE: f64 = 116.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        match s {
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            _ => None,
        }
    }
}

/// One labeled or unlabeled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub domain: Domain,
    pub features: Vec<f64>,
    /// Age in years. Always present on source examples; may be absent on
    /// target examples (and is never read by training either way).
    pub age: Option<f64>,
}

/// A sampled same-domain pair, stored as indices into the slice it was
/// sampled from. `diff` is `age(a) - age(b)` when both members are
/// labeled, and `rank_target` its ranking target.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub a: usize,
    pub b: usize,
    pub diff: Option<f64>,
    pub rank_target: Option<f64>,
}

/// Settings for the synthetic domain-shift generator.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub shift_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            n_source: 256,
            n_target: 256,
            shift_strength: 1.5,
            noise_std: 0.05,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "synthetic dim must be >= 2, got {}",
                self.dim
            )));
        }
        if self.n_source < 4 || self.n_target < 4 {
            return Err(Error::InvalidConfig(format!(
                "synthetic counts must be >= 4, got source {} target {}",
                self.n_source, self.n_target
            )));
        }
        if !self.shift_strength.is_finite() || self.shift_strength < 0.0 {
            return Err(Error::InvalidConfig("shift_strength must be >= 0".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

const BASIS_DIM: usize = 4;

/// Nonlinear age basis the feature maps act on.
fn age_basis(age: f64) -> [f64; BASIS_DIM] {
    let v = age / 100.0;
    [
        v,
        v * v,
        (std::f64::consts::PI * v).sin(),
        (std::f64::consts::PI * v).cos(),
    ]
}

/// Box-Muller standard normal draw.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates a source domain and a shifted target domain over a shared
/// latent age. Source features are `A_s phi(age) + eps`; target features
/// use `A_s + shift_strength * A_delta`. Target ages are kept on the
/// examples for evaluation only.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut map_source = vec![0.0; cfg.dim * BASIS_DIM];
    for v in &mut map_source {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut map_delta = vec![0.0; cfg.dim * BASIS_DIM];
    for v in &mut map_delta {
        *v = rng.gen_range(-1.0..1.0);
    }
    let map_target: Vec<f64> = map_source
        .iter()
        .zip(&map_delta)
        .map(|(s, d)| s + cfg.shift_strength * d)
        .collect();

    let mut gen_domain = |domain: Domain, map: &[f64], count: usize| -> Vec<Example> {
        (0..count)
            .map(|i| {
                let age = rng.gen_range(0.0..100.0);
                let basis = age_basis(age);
                let features: Vec<f64> = (0..cfg.dim)
                    .map(|row| {
                        let mut v = 0.0;
                        for (k, b) in basis.iter().enumerate() {
                            v += map[row * BASIS_DIM + k] * b;
                        }
                        if cfg.noise_std > 0.0 {
                            v += cfg.noise_std * standard_normal(&mut rng);
                        }
                        v
                    })
                    .collect();
                Example {
                    id: format!("{}{i:05}", if domain == Domain::Source { "s" } else { "t" }),
                    domain,
                    features,
                    age: Some(age),
                }
            })
            .collect()
    };

    let source = gen_domain(Domain::Source, &map_source, cfg.n_source);
    let target = gen_domain(Domain::Target, &map_target, cfg.n_target);
    Ok((source, target))
}

/// Affine label normalization fit on source training labels:
/// `norm(y) = (y - lo) / (hi - lo)`. Age differences are scaled by
/// `hi - lo` only, with no offset, so antisymmetry is preserved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationMap {
    pub lo: f64,
    pub hi: f64,
}

impl NormalizationMap {
    pub fn fit(labels: &[f64]) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &y in labels {
            if !y.is_finite() {
                return Err(Error::NonFinite("normalization labels".into()));
            }
            lo = lo.min(y);
            hi = hi.max(y);
        }
        if labels.len() < 2 || !(hi > lo) {
            return Err(Error::InvalidConfig(
                "normalization needs at least two distinct labels".into(),
            ));
        }
        Ok(Self { lo, hi })
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.lo) / (self.hi - self.lo)
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * (self.hi - self.lo) + self.lo
    }

    pub fn apply_diff(&self, d: f64) -> f64 {
        d / (self.hi - self.lo)
    }

    pub fn invert_diff(&self, v: f64) -> f64 {
        v * (self.hi - self.lo)
    }
}

/// Uniformly samples same-domain pairs without self-pairing. With
/// `require_labels` only labeled examples are candidates, and `diff` /
/// `rank_target` are filled whenever both members carry labels.
pub fn sample_pairs(
    examples: &[Example],
    count: usize,
    seed: u64,
    require_labels: bool,
) -> Result<Vec<PairExample>> {
    let candidates: Vec<usize> = examples
        .iter()
        .enumerate()
        .filter(|(_, e)| !require_labels || e.age.is_some())
        .map(|(i, _)| i)
        .collect();
    let mut by_domain: Vec<(Domain, Vec<usize>)> = Vec::new();
    for &idx in &candidates {
        let d = examples[idx].domain;
        match by_domain.iter_mut().find(|(dom, _)| *dom == d) {
            Some((_, v)) => v.push(idx),
            None => by_domain.push((d, vec![idx])),
        }
    }
    by_domain.retain(|(_, v)| v.len() >= 2);
    if by_domain.is_empty() {
        return Err(Error::InvalidConfig(
            "pair sampling needs at least two (labeled) examples in one domain".into(),
        ));
    }
    let pool: Vec<usize> = by_domain.iter().flat_map(|(_, v)| v.iter().copied()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let a = pool[rng.gen_range(0..pool.len())];
        let group = &by_domain
            .iter()
            .find(|(d, _)| *d == examples[a].domain)
            .expect("candidate domain present")
            .1;
        let mut b = group[rng.gen_range(0..group.len() - 1)];
        if b == a {
            b = group[group.len() - 1];
        }
        let diff = match (examples[a].age, examples[b].age) {
            (Some(ya), Some(yb)) => Some(ya - yb),
            _ => None,
        };
        pairs.push(PairExample {
            a,
            b,
            diff,
            rank_target: diff.map(rank_target),
        });
    }
    Ok(pairs)
}

/// Splits examples into train and validation parts. The split is a pure
/// function of the id set and the seed: ids are sorted before the seeded
/// shuffle, so input order does not matter.
pub fn split_train_val(
    examples: &[Example],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    if examples.len() < 2 {
        return Err(Error::InvalidConfig(
            "split needs at least two examples".into(),
        ));
    }
    if !(0.0..1.0).contains(&val_fraction) || val_fraction <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by(|&a, &b| examples[a].id.cmp(&examples[b].id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_val = ((examples.len() as f64 * val_fraction).round() as usize)
        .clamp(1, examples.len() - 1);
    let val = order[..n_val]
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    let train = order[n_val..]
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    Ok((train, val))
}

/// Renders examples in the embedding file format.
pub fn format_embeddings(examples: &[Example]) -> Result<String> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch("format_embeddings"));
    }
    let dim = examples[0].features.len();
    let mut out = String::from("id,domain,age");
    for k in 0..dim {
        let _ = write!(out, ",f{k}");
    }
    out.push('\n');
    for e in examples {
        if e.features.len() != dim {
            return Err(Error::shape("embedding feature dimension", dim, e.features.len()));
        }
        let _ = write!(out, "{},{},", e.id, e.domain.as_str());
        if let Some(age) = e.age {
            let _ = write!(out, "{age}");
        }
        for f in &e.features {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn save_embeddings(path: &Path, examples: &[Example]) -> Result<()> {
    let text = format_embeddings(examples)?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_embeddings(path: &Path) -> Result<Vec<Example>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_embeddings_str(&text, &path.display().to_string())
}

/// Parses embedding file text. `origin` labels error messages (the file
/// path for [`load_embeddings`]). Rejects malformed rows, dimension
/// mismatches, unknown domains, out-of-range ages, unlabeled source rows,
/// and duplicate ids, each with its line number.
pub fn parse_embeddings_str(text: &str, origin: &str) -> Result<Vec<Example>> {
    let err = |line: usize, message: String| Error::DataFormat {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));

    let (header_line, header) = lines
        .next()
        .ok_or_else(|| err(0, "empty embedding file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "id" || cols[1] != "domain" || cols[2] != "age" {
        return Err(err(
            header_line,
            "header must be id,domain,age,f0,...".into(),
        ));
    }
    let dim = cols.len() - 3;
    for (k, col) in cols[3..].iter().enumerate() {
        if *col != format!("f{k}") {
            return Err(err(
                header_line,
                format!("feature column {} must be named f{k}, got {col}", k + 3),
            ));
        }
    }

    let mut examples: Vec<Example> = Vec::new();
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(err(
                line_no,
                format!("expected {} fields, got {}", dim + 3, fields.len()),
            ));
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(err(line_no, "empty id".into()));
        }
        if examples.iter().any(|e| e.id == id) {
            return Err(err(line_no, format!("duplicate id {id}")));
        }
        let domain = Domain::from_str(fields[1].trim())
            .ok_or_else(|| err(line_no, format!("unknown domain {:?}", fields[1].trim())))?;
        let age_field = fields[2].trim();
        let age = if age_field.is_empty() {
            None
        } else {
            let age: f64 = age_field
                .parse()
                .map_err(|_| err(line_no, format!("unparseable age {age_field:?}")))?;
            if !age.is_finite() || !(0.0..=MAX_AGE).contains(&age) {
                return Err(err(
                    line_no,
                    format!("age {age} outside [0, {MAX_AGE}]"),
                ));
            }
            Some(age)
        };
        if domain == Domain::Source && age.is_none() {
            return Err(err(line_no, "source rows must be labeled".into()));
        }
        let mut features = Vec::with_capacity(dim);
        for raw in &fields[3..] {
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| err(line_no, format!("unparseable feature {raw:?}")))?;
            if !v.is_finite() {
                return Err(err(line_no, format!("non-finite feature {v}")));
            }
            features.push(v);
        }
        examples.push(Example {
            id: id.to_string(),
            domain,
            features,
            age,
        });
    }
    if examples.is_empty() {
        return Err(err(header_line, "no data rows".into()));
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(id: &str, domain: Domain, age: Option<f64>) -> Example {
        Example {
            id: id.into(),
            domain,
            features: vec![0.0, 1.0],
            age,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig::default();
        let (s1, t1) = generate_synthetic(&cfg).unwrap();
        let (s2, t2) = generate_synthetic(&cfg).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        assert_eq!(s1.len(), cfg.n_source);
        assert_eq!(t1.len(), cfg.n_target);
        assert!(s1.iter().all(|e| e.age.is_some() && e.features.len() == cfg.dim));
    }

    #[test]
    fn synthetic_no_shift_no_noise_shares_the_feature_map() {
        let cfg = SyntheticConfig {
            shift_strength: 0.0,
            noise_std: 0.0,
            ..Default::default()
        };
        let (source, target) = generate_synthetic(&cfg).unwrap();
        // With zero shift and zero noise both domains are deterministic
        // images of the same map, so features are a pure function of age.
        // Feature norms then follow the same age->norm curve in both
        // domains; compare their means as a distribution check.
        let mean_norm = |v: &[Example]| {
            v.iter()
                .map(|e| e.features.iter().map(|f| f * f).sum::<f64>().sqrt())
                .sum::<f64>()
                / v.len() as f64
        };
        let diff = (mean_norm(&source) - mean_norm(&target)).abs();
        assert!(diff < 0.2, "no-shift domains differ too much: {diff}");
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        let cfg = SyntheticConfig {
            dim: 1,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
        let cfg = SyntheticConfig {
            n_source: 3,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn normalization_definition_and_round_trip() {
        let map = NormalizationMap::fit(&[0.0, 116.0]).unwrap();
        assert!((map.apply(58.0) - 0.5).abs() < 1e-15);
        assert!((map.apply_diff(29.0) - 0.25).abs() < 1e-15);
        for i in 0..100 {
            let y = i as f64 * 1.16;
            assert!((map.invert(map.apply(y)) - y).abs() < 1e-12);
        }
        assert!(NormalizationMap::fit(&[5.0, 5.0]).is_err());
        assert!(NormalizationMap::fit(&[5.0]).is_err());
    }

    #[test]
    fn sampled_pairs_fill_diff_and_rank() {
        let examples = vec![
            ex("a", Domain::Source, Some(30.0)),
            ex("b", Domain::Source, Some(20.0)),
        ];
        let pairs = sample_pairs(&examples, 8, 1, true).unwrap();
        for p in &pairs {
            let (ya, yb) = (
                examples[p.a].age.unwrap(),
                examples[p.b].age.unwrap(),
            );
            assert_eq!(p.diff.unwrap(), ya - yb);
            assert_eq!(p.rank_target.unwrap(), if ya > yb { 1.0 } else { 0.0 });
            assert_ne!(p.a, p.b);
        }
    }

    #[test]
    fn equal_ages_give_tie_rank_target() {
        let examples = vec![
            ex("a", Domain::Source, Some(25.0)),
            ex("b", Domain::Source, Some(25.0)),
        ];
        let pairs = sample_pairs(&examples, 4, 1, true).unwrap();
        assert!(pairs.iter().all(|p| p.rank_target == Some(0.5)));
    }

    #[test]
    fn pair_sampling_is_deterministic_and_same_domain() {
        let mut examples = Vec::new();
        for i in 0..10 {
            examples.push(ex(&format!("s{i}"), Domain::Source, Some(i as f64)));
            examples.push(ex(&format!("t{i}"), Domain::Target, None));
        }
        let p1 = sample_pairs(&examples, 50, 9, false).unwrap();
        let p2 = sample_pairs(&examples, 50, 9, false).unwrap();
        assert_eq!(p1, p2);
        for p in &p1 {
            assert_eq!(examples[p.a].domain, examples[p.b].domain);
            assert_ne!(p.a, p.b);
        }
    }

    #[test]
    fn pair_sampling_requires_enough_examples() {
        let examples = vec![ex("a", Domain::Source, Some(1.0))];
        assert!(sample_pairs(&examples, 1, 0, false).is_err());
        // two examples in different domains cannot form a pair either
        let examples = vec![
            ex("a", Domain::Source, Some(1.0)),
            ex("b", Domain::Target, Some(2.0)),
        ];
        assert!(sample_pairs(&examples, 1, 0, false).is_err());
    }

    #[test]
    fn split_is_a_pure_function_of_ids_and_seed() {
        let mut examples: Vec<Example> = (0..20)
            .map(|i| ex(&format!("e{i:02}"), Domain::Source, Some(i as f64)))
            .collect();
        let (tr1, va1) = split_train_val(&examples, 0.2, 5).unwrap();
        examples.reverse();
        let (tr2, va2) = split_train_val(&examples, 0.2, 5).unwrap();
        let ids = |v: &[Example]| v.iter().map(|e| e.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&tr1), ids(&tr2));
        assert_eq!(ids(&va1), ids(&va2));
        assert_eq!(tr1.len() + va1.len(), 20);
        assert_eq!(va1.len(), 4);
        // disjoint
        assert!(va1.iter().all(|v| tr1.iter().all(|t| t.id != v.id)));
    }

    #[test]
    fn minimal_embedding_file_parses() {
        let text = "id,domain,age,f0,f1\na,source,30,0.5,-1\nb,target,,1,2\n";
        let examples = parse_embeddings_str(text, "test").unwrap();
        assert_eq!(examples.len(), 2);
        assert_eq!(examples[0].age, Some(30.0));
        assert_eq!(examples[1].age, None);
        assert_eq!(examples[1].features, vec![1.0, 2.0]);
    }

    #[test]
    fn embedding_parser_reports_line_numbers() {
        let text = "# comment\nid,domain,age,f0\na,source,30,1\nb,martian,20,2\n";
        match parse_embeddings_str(text, "test") {
            Err(Error::DataFormat { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("domain"), "{message}");
            }
            other => panic!("expected DataFormat error, got {other:?}"),
        }
    }

    #[test]
    fn embedding_parser_rejects_bad_rows() {
        // wrong field count
        assert!(parse_embeddings_str("id,domain,age,f0\na,source,30\n", "t").is_err());
        // duplicate id
        assert!(parse_embeddings_str(
            "id,domain,age,f0\na,source,30,1\na,source,31,2\n",
            "t"
        )
        .is_err());
        // unlabeled source
        assert!(parse_embeddings_str("id,domain,age,f0\na,source,,1\n", "t").is_err());
        // age out of range
        assert!(parse_embeddings_str("id,domain,age,f0\na,source,200,1\n", "t").is_err());
        // bad header
        assert!(parse_embeddings_str("id,domain,years,f0\na,source,30,1\n", "t").is_err());
        // misnamed feature column
        assert!(parse_embeddings_str("id,domain,age,g0\na,source,30,1\n", "t").is_err());
    }

    #[test]
    fn save_then_load_round_trips_exactly() {
        let cfg = SyntheticConfig {
            n_source: 8,
            n_target: 8,
            ..Default::default()
        };
        let (source, target) = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("source.csv");
        save_embeddings(&path, &source).unwrap();
        let loaded = load_embeddings(&path).unwrap();
        assert_eq!(loaded, source);
        let path = dir.path().join("target.csv");
        save_embeddings(&path, &target).unwrap();
        assert_eq!(load_embeddings(&path).unwrap(), target);
    }

    proptest! {
        #[test]
        fn generated_pair_rank_targets_complement(seed in 0u64..200) {
            let examples = vec![
                ex("a", Domain::Source, Some(30.0)),
                ex("b", Domain::Source, Some(20.0)),
                ex("c", Domain::Source, Some(20.0)),
            ];
            let pairs = sample_pairs(&examples, 16, seed, true).unwrap();
            for p in pairs {
                let d = p.diff.unwrap();
                prop_assert!((rank_target(d) + rank_target(-d) - 1.0).abs() < 1e-15);
                prop_assert_eq!(p.rank_target.unwrap(), rank_target(d));
            }
        }

        #[test]
        fn float_fields_round_trip_through_text(v in proptest::num::f64::NORMAL) {
            let text = format!("id,domain,age,f0\na,source,30,{v}\n");
            let parsed = parse_embeddings_str(&text, "t").unwrap();
            prop_assert_eq!(parsed[0].features[0], v);
        }
    }
}
