//! Synthetic child/adult identities, CSV ingestion and mini-batch sampling.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::math::{norm, Matrix};
use crate::{Error, Result};

/// Lower/upper age in years of each group; the last group is open-ended.
const AGE_GROUPS: [(u32, u32); 8] = [
    (0, 12),
    (13, 18),
    (19, 25),
    (26, 35),
    (36, 45),
    (46, 55),
    (56, 65),
    (66, u32::MAX),
];

/// One of eight age bins; bin 0 (0-12 years) is the child group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgeGroup(u8);

impl AgeGroup {
    pub const CHILD: AgeGroup = AgeGroup(0);

    pub fn new(index: u8) -> Result<Self> {
        if (index as usize) < AGE_GROUPS.len() {
            Ok(AgeGroup(index))
        } else {
            Err(Error::InvalidArgument(format!("age group {index} outside 0..=7")))
        }
    }

    pub fn from_years(years: u32) -> Self {
        let idx = AGE_GROUPS
            .iter()
            .position(|&(lo, hi)| years >= lo && years <= hi)
            .expect("age groups cover every age");
        AgeGroup(idx as u8)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn is_child(self) -> bool {
        self.0 == 0
    }

    /// Inclusive year range; `None` for the open upper bound of the last bin.
    pub fn years(self) -> (u32, Option<u32>) {
        let (lo, hi) = AGE_GROUPS[self.0 as usize];
        (lo, (hi != u32::MAX).then_some(hi))
    }

    pub fn contains(self, years: u32) -> bool {
        AgeGroup::from_years(years) == self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub identity: usize,
    pub age_group: AgeGroup,
    pub age_years: u32,
    pub features: Vec<f64>,
}

impl Sample {
    pub fn is_child(&self) -> bool {
        self.age_group.is_child()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    n_identities: usize,
    dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, n_identities: usize) -> Result<Self> {
        if n_identities < 2 {
            return Err(Error::InvalidArgument(format!(
                "a dataset needs >= 2 identities, got {n_identities}"
            )));
        }
        let dim = samples.first().map_or(0, |s| s.features.len());
        for (k, s) in samples.iter().enumerate() {
            if s.identity >= n_identities {
                return Err(Error::InvalidArgument(format!(
                    "sample {k} has identity {} >= {n_identities}",
                    s.identity
                )));
            }
            if s.features.len() != dim {
                return Err(Error::Shape(format!(
                    "sample {k} has {} features, expected {dim}",
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("features of sample {k}")));
            }
        }
        Ok(Dataset {
            samples,
            n_identities,
            dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_identities(&self) -> usize {
        self.n_identities
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    pub fn child_flags(&self) -> Vec<bool> {
        self.samples.iter().map(Sample::is_child).collect()
    }

    pub fn child_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_child()).count()
    }

    /// `dim x len` matrix, one sample per column.
    pub fn feature_matrix(&self) -> Matrix {
        self.feature_matrix_of(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn feature_matrix_of(&self, indices: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(self.dim, indices.len());
        for (col, &k) in indices.iter().enumerate() {
            m.set_col(col, &self.samples[k].features);
        }
        m
    }

    /// Every sample must be present; identities are re-validated.
    pub fn with_features(&self, features: &Matrix) -> Result<Dataset> {
        if features.cols() != self.len() {
            return Err(Error::Shape(format!(
                "{} feature columns for {} samples",
                features.cols(),
                self.len()
            )));
        }
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(k, s)| Sample {
                features: features.col(k),
                ..s.clone()
            })
            .collect();
        Dataset::new(samples, self.n_identities)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header = vec!["identity".to_string(), "age_group".into(), "age_years".into()];
        header.extend((0..self.dim).map(|k| format!("f{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for s in &self.samples {
            let mut row = vec![
                s.identity.to_string(),
                s.age_group.index().to_string(),
                s.age_years.to_string(),
            ];
            row.extend(s.features.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<csv writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Identities having at least one age-group-0 sample, ascending.
pub fn child_class_index(dataset: &Dataset) -> Vec<usize> {
    dataset
        .samples
        .iter()
        .filter(|s| s.is_child())
        .map(|s| s.identity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Reads `identity,age_group[,age_years],f0,...`.
///
/// Identity tokens are re-indexed densely in first-seen order. When the
/// `age_years` column is absent each sample gets the lower bound of its group.
pub fn load_csv<R: Read>(source: R) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(source);
    let header = reader.headers().map_err(csv_err)?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "identity" || cols[1] != "age_group" {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with `identity,age_group`".into(),
        });
    }
    let has_years = cols[2] == "age_years";
    let first_feature = if has_years { 3 } else { 2 };
    for (k, name) in cols[first_feature..].iter().enumerate() {
        if *name != format!("f{k}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected column `f{k}`, found `{name}`"),
            });
        }
    }
    let dim = cols.len() - first_feature;

    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { line, message };
        if record.len() != cols.len() {
            return Err(bad(format!(
                "expected {} fields, found {}",
                cols.len(),
                record.len()
            )));
        }
        let next = ids.len();
        let identity = *ids.entry(record[0].trim().to_string()).or_insert(next);
        let group: u8 = record[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("age_group `{}` is not an integer", &record[1])))?;
        let age_group = AgeGroup::new(group).map_err(|e| bad(e.to_string()))?;
        let age_years = if has_years {
            let y: u32 = record[2]
                .trim()
                .parse()
                .map_err(|_| bad(format!("age_years `{}` is not an integer", &record[2])))?;
            if !age_group.contains(y) {
                return Err(bad(format!("age {y} is outside age group {group}")));
            }
            y
        } else {
            age_group.years().0
        };
        let features = (first_feature..cols.len())
            .map(|c| {
                let v: f64 = record[c]
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("`{}` in column {} is not a number", &record[c], cols[c])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(bad(format!("non-finite value in column {}", cols[c])))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        debug_assert_eq!(features.len(), dim);
        samples.push(Sample {
            identity,
            age_group,
            age_years,
            features,
        });
    }
    let n = ids.len();
    Dataset::new(samples, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_identities: usize,
    /// Fraction of identities that receive child samples.
    pub child_fraction: f64,
    pub adult_per_identity: usize,
    pub child_per_identity: usize,
    pub input_dim: usize,
    /// 0 puts every child sample on one shared mode, 1 makes them identity-specific.
    pub child_collapse: f64,
    pub noise: f64,
    pub seed: u64,
    /// Independent redraw of samples over the same identities; 0 is the training draw.
    pub draw: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_identities: 40,
            child_fraction: 0.3,
            adult_per_identity: 16,
            child_per_identity: 4,
            input_dim: 64,
            child_collapse: 0.35,
            noise: 0.05,
            seed: 7,
            draw: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn n_child_identities(&self) -> usize {
        (self.child_fraction * self.n_identities as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.child_collapse) {
            return Err(Error::InvalidArgument(format!(
                "child_collapse must lie in [0, 1], got {}",
                self.child_collapse
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.child_fraction) {
            return Err(Error::InvalidArgument(format!(
                "child_fraction must lie in [0, 1], got {}",
                self.child_fraction
            )));
        }
        if self.n_child_identities() < 2 {
            return Err(Error::Precondition(format!(
                "spec yields {} child identities, need >= 2",
                self.n_child_identities()
            )));
        }
        if self.child_per_identity == 0 || self.adult_per_identity == 0 {
            return Err(Error::InvalidArgument(
                "per-identity child and adult sample counts must be positive".into(),
            ));
        }
        if self.input_dim < 2 {
            return Err(Error::InvalidArgument("input_dim must be >= 2".into()));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy(rng: &mut ChaCha8Rng, centre: &[f64], sigma: f64) -> Vec<f64> {
    centre
        .iter()
        .map(|&c| {
            let z: f64 = StandardNormal.sample(rng);
            c + sigma * z
        })
        .collect()
}

/// Draws a dataset whose child samples are pulled toward one shared mode.
///
/// Each identity `i` has a latent unit vector `u_i`; adults are `u_i + noise`
/// and children of child-flagged identities are
/// `normalize(k * u_i + (1 - k) * g) + noise` for a single global mode `g`.
/// Adults are aged uniformly within groups 3-5, children within 0-12 years.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let dim = spec.input_dim;
    let n = spec.n_identities;

    let mut latent_rng = stream(spec.seed, 0);
    let latents: Vec<Vec<f64>> = (0..n).map(|_| unit_gaussian(&mut latent_rng, dim)).collect();
    let global_child = unit_gaussian(&mut stream(spec.seed, 1), dim);

    let mut pick_rng = stream(spec.seed, 2);
    let child_ids: BTreeSet<usize> = index::sample(&mut pick_rng, n, spec.n_child_identities())
        .into_iter()
        .collect();

    let kappa = spec.child_collapse;
    let mut rng = stream(spec.seed, 16 + spec.draw);
    let mut samples = Vec::new();
    for (identity, u) in latents.iter().enumerate() {
        for _ in 0..spec.adult_per_identity {
            let group = AgeGroup(rng.random_range(3..=5));
            let (lo, hi) = group.years();
            let age_years = rng.random_range(lo..=hi.expect("closed bin"));
            samples.push(Sample {
                identity,
                age_group: group,
                age_years,
                features: noisy(&mut rng, u, spec.noise),
            });
        }
        if child_ids.contains(&identity) {
            let mixed: Vec<f64> = u
                .iter()
                .zip(&global_child)
                .map(|(a, g)| kappa * a + (1.0 - kappa) * g)
                .collect();
            let m = norm(&mixed);
            let centre: Vec<f64> = if m > 1e-12 {
                mixed.iter().map(|v| v / m).collect()
            } else {
                global_child.clone()
            };
            for _ in 0..spec.child_per_identity {
                let age_years = rng.random_range(0..=12);
                samples.push(Sample {
                    identity,
                    age_group: AgeGroup::CHILD,
                    age_years,
                    features: noisy(&mut rng, &centre, spec.noise),
                });
            }
        }
    }
    Dataset::new(samples, n)
}

/// Shuffled mini-batches of sample indices, one epoch at a time.
///
/// Without `rho` each epoch is a permutation of the dataset cut into full
/// batches (the incomplete tail is dropped). With `rho` every batch holds
/// `round(batch * rho / (1 + rho))` child samples, drawn cyclically from a
/// reshuffled child pool so they repeat as needed; the rest are adults.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    rho: Option<f64>,
    rng: ChaCha8Rng,
    children: Pool,
    adults: Pool,
}

#[derive(Debug, Clone)]
struct Pool {
    items: Vec<usize>,
    cursor: usize,
}

impl Pool {
    fn new(items: Vec<usize>) -> Self {
        let cursor = items.len();
        Pool { items, cursor }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor == self.items.len() {
            self.items.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.items[self.cursor - 1]
    }
}

impl BatchSampler {
    pub fn new(dataset: &Dataset, batch_size: usize, rho: Option<f64>, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > dataset.len() {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} must be in 1..={}",
                dataset.len()
            )));
        }
        let (children, adults): (Vec<usize>, Vec<usize>) =
            (0..dataset.len()).partition(|&k| dataset.samples[k].is_child());
        if let Some(r) = rho {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::InvalidArgument(format!("rho must be >= 0, got {r}")));
            }
            if children.is_empty() || adults.is_empty() {
                return Err(Error::Precondition(
                    "oversampling needs both child and adult samples".into(),
                ));
            }
        }
        Ok(BatchSampler {
            len: dataset.len(),
            batch_size,
            rho,
            rng: stream(seed, 3),
            children: Pool::new(children),
            adults: Pool::new(adults),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    pub fn dropped_per_epoch(&self) -> usize {
        match self.rho {
            None => self.len % self.batch_size,
            Some(_) => 0,
        }
    }

    pub fn children_per_batch(&self) -> Option<usize> {
        self.rho
            .map(|r| ((self.batch_size as f64 * r / (1.0 + r)).round() as usize).min(self.batch_size))
    }

    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        match self.children_per_batch() {
            None => {
                let mut order: Vec<usize> = (0..self.len).collect();
                order.shuffle(&mut self.rng);
                order
                    .chunks_exact(self.batch_size)
                    .map(<[usize]>::to_vec)
                    .collect()
            }
            Some(n_child) => (0..self.batches_per_epoch())
                .map(|_| {
                    let rng = &mut self.rng;
                    let mut batch = Vec::with_capacity(self.batch_size);
                    for _ in 0..n_child {
                        batch.push(self.children.draw(rng));
                    }
                    for _ in n_child..self.batch_size {
                        batch.push(self.adults.draw(rng));
                    }
                    batch.shuffle(rng);
                    batch
                })
                .collect(),
        }
    }
}

impl Iterator for BatchSampler {
    type Item = Vec<Vec<usize>>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_epoch())
    }
}
