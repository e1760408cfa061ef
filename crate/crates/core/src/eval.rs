//! Similarity analyses and child-adult evaluation protocols.
//!
//! Embeddings are passed as a `d x len(dataset)` matrix whose column `k`
//! belongs to sample `k` of the accompanying [`Dataset`]. Every cosine here is
//! taken between unit-normalised vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::encoder::PrototypeHead;
use crate::math::{cosine, cosine_matrix, dot, l2_normalize_columns, mean_off_diagonal_abs, pca_2d, Matrix};
use crate::parallel::Execution;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleFilter {
    Child,
    Adult,
    All,
}

impl RoleFilter {
    pub fn admits(self, sample: &Sample) -> bool {
        match self {
            RoleFilter::Child => sample.is_child(),
            RoleFilter::Adult => !sample.is_child(),
            RoleFilter::All => true,
        }
    }
}

fn check_embeddings(embeddings: &Matrix, dataset: &Dataset) -> Result<()> {
    if embeddings.cols() != dataset.len() {
        return Err(Error::Shape(format!(
            "{} embedding columns for {} samples",
            embeddings.cols(),
            dataset.len()
        )));
    }
    Ok(())
}

/// Mean of the unit-normalised embeddings of each identity's admitted samples.
fn mean_unit_embeddings(
    embeddings: &Matrix,
    dataset: &Dataset,
    filter: RoleFilter,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let (unit, _) = crate::math::unit_columns(embeddings).map_err(|e| match e {
        Error::ZeroColumn(k) => Error::InvalidArgument(format!("embedding of sample {k} has zero norm")),
        other => other,
    })?;
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (k, s) in dataset.samples().iter().enumerate() {
        if !filter.admits(s) {
            continue;
        }
        let entry = sums
            .entry(s.identity)
            .or_insert_with(|| (vec![0.0; embeddings.rows()], 0));
        for (acc, i) in entry.0.iter_mut().zip(0..) {
            *acc += unit[(i, k)];
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(id, (sum, count))| (id, sum.into_iter().map(|v| v / count as f64).collect()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraReport {
    pub identities: Vec<usize>,
    pub values: Vec<f64>,
    /// Identities with no admitted sample.
    pub excluded: Vec<usize>,
    pub filter: RoleFilter,
}

/// Per identity, the mean cosine between its admitted samples and its prototype.
pub fn intra_class_similarity(
    embeddings: &Matrix,
    prototypes: &Matrix,
    dataset: &Dataset,
    filter: RoleFilter,
) -> Result<IntraReport> {
    check_embeddings(embeddings, dataset)?;
    if prototypes.rows() != embeddings.rows() || prototypes.cols() != dataset.n_identities() {
        return Err(Error::Shape(format!(
            "prototypes {:?} vs embedding dim {} and {} identities",
            prototypes.shape(),
            embeddings.rows(),
            dataset.n_identities()
        )));
    }
    let means = mean_unit_embeddings(embeddings, dataset, filter)?;
    let (w_unit, _) = crate::math::unit_columns(prototypes)?;
    let mut identities = Vec::new();
    let mut values = Vec::new();
    let mut excluded = Vec::new();
    for id in 0..dataset.n_identities() {
        match means.get(&id) {
            Some(mean) => {
                identities.push(id);
                values.push(dot(mean, &w_unit.col(id)));
            }
            None => excluded.push(id),
        }
    }
    Ok(IntraReport {
        identities,
        values,
        excluded,
        filter,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterMatrix {
    pub row_identities: Vec<usize>,
    pub col_identities: Vec<usize>,
    pub matrix: Matrix,
}

/// Mean pairwise cosine between the admitted samples of every two identities.
///
/// The diagonal is left at 0; see [`SimilarityReport::rendered`] for the
/// combined view with intra-class values on the diagonal.
pub fn inter_class_similarity(
    embeddings: &Matrix,
    dataset: &Dataset,
    filter: RoleFilter,
) -> Result<InterMatrix> {
    check_embeddings(embeddings, dataset)?;
    let means = mean_unit_embeddings(embeddings, dataset, filter)?;
    if means.len() < 2 {
        return Err(Error::Precondition(format!(
            "need >= 2 identities with {filter:?} samples, found {}",
            means.len()
        )));
    }
    let ids: Vec<usize> = means.keys().copied().collect();
    let vecs: Vec<&Vec<f64>> = means.values().collect();
    let k = ids.len();
    let mut matrix = Matrix::zeros(k, k);
    for a in 0..k {
        for b in (a + 1)..k {
            let v = dot(vecs[a], vecs[b]);
            matrix[(a, b)] = v;
            matrix[(b, a)] = v;
        }
    }
    Ok(InterMatrix {
        row_identities: ids.clone(),
        col_identities: ids,
        matrix,
    })
}

/// Mean cosine between `rows`-role samples of identity `i` and `cols`-role
/// samples of identity `j`, including `i == j`, over identities having both.
pub fn cross_role_similarity(
    embeddings: &Matrix,
    dataset: &Dataset,
    rows: RoleFilter,
    cols: RoleFilter,
) -> Result<InterMatrix> {
    check_embeddings(embeddings, dataset)?;
    let row_means = mean_unit_embeddings(embeddings, dataset, rows)?;
    let col_means = mean_unit_embeddings(embeddings, dataset, cols)?;
    let ids: Vec<usize> = row_means
        .keys()
        .filter(|id| col_means.contains_key(id))
        .copied()
        .collect();
    if ids.is_empty() {
        return Err(Error::Precondition("no identity has samples in both roles".into()));
    }
    let mut matrix = Matrix::zeros(ids.len(), ids.len());
    for (a, ia) in ids.iter().enumerate() {
        for (b, ib) in ids.iter().enumerate() {
            matrix[(a, b)] = dot(&row_means[ia], &col_means[ib]);
        }
    }
    Ok(InterMatrix {
        row_identities: ids.clone(),
        col_identities: ids,
        matrix,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub identities: Vec<usize>,
    pub intra: Vec<f64>,
    pub inter: Matrix,
    pub filter: RoleFilter,
}

impl SimilarityReport {
    pub fn build(
        embeddings: &Matrix,
        prototypes: &Matrix,
        dataset: &Dataset,
        filter: RoleFilter,
    ) -> Result<Self> {
        let intra = intra_class_similarity(embeddings, prototypes, dataset, filter)?;
        let inter = inter_class_similarity(embeddings, dataset, filter)?;
        debug_assert_eq!(intra.identities, inter.row_identities);
        Ok(SimilarityReport {
            identities: intra.identities,
            intra: intra.values,
            inter: inter.matrix,
            filter,
        })
    }

    /// Inter-class matrix with the intra-class values written on the diagonal.
    pub fn rendered(&self) -> Matrix {
        let mut m = self.inter.clone();
        for (i, &v) in self.intra.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSimilarity {
    pub matrix: Matrix,
    pub mean_abs_off_diagonal: f64,
}

pub fn prototype_similarity(head: &PrototypeHead, subset: &[usize]) -> Result<PrototypeSimilarity> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("prototype subset is empty".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&j| j >= head.weights.cols()) {
        return Err(Error::InvalidArgument(format!("prototype {bad} out of range")));
    }
    let sub = head.weights.select_columns(subset);
    let matrix = cosine_matrix(&sub, &sub)?;
    let mean_abs_off_diagonal = mean_off_diagonal_abs(&matrix);
    Ok(PrototypeSimilarity {
        matrix,
        mean_abs_off_diagonal,
    })
}

/// Minimum age difference between the child and adult image of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGap {
    Unconstrained,
    /// Adult age minus child age must be strictly greater than this many years.
    MoreThan(u32),
}

impl AgeGap {
    pub fn admits(self, child_age: u32, adult_age: u32) -> bool {
        match self {
            AgeGap::Unconstrained => true,
            AgeGap::MoreThan(g) => adult_age > child_age && adult_age - child_age > g,
        }
    }
}

impl fmt::Display for AgeGap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgeGap::Unconstrained => f.write_str("none"),
            AgeGap::MoreThan(g) => write!(f, "{g}"),
        }
    }
}

impl std::str::FromStr for AgeGap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(AgeGap::Unconstrained),
            t => t
                .parse()
                .map(AgeGap::MoreThan)
                .map_err(|_| Error::InvalidArgument(format!("age gap `{t}` is neither `none` nor an integer"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    /// The child sample.
    pub identity_a: usize,
    pub sample_a: usize,
    /// The adult sample.
    pub identity_b: usize,
    pub sample_b: usize,
    pub same: bool,
    pub age_a: u32,
    pub age_b: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
    pub gap: AgeGap,
}

/// Samples `count` same-identity and `count` cross-identity child-adult pairs.
///
/// Every pair puts a child sample first and an adult sample second, and the
/// adult must be more than `gap` years older.
pub fn build_verification_pairs(
    dataset: &Dataset,
    gap: AgeGap,
    count: usize,
    seed: u64,
) -> Result<PairSet> {
    let samples = dataset.samples();
    let children: Vec<usize> = (0..samples.len()).filter(|&k| samples[k].is_child()).collect();
    let adults: Vec<usize> = (0..samples.len()).filter(|&k| !samples[k].is_child()).collect();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for &c in &children {
        for &a in &adults {
            let (sc, sa) = (&samples[c], &samples[a]);
            if !gap.admits(sc.age_years, sa.age_years) {
                continue;
            }
            let pair = Pair {
                identity_a: sc.identity,
                sample_a: c,
                identity_b: sa.identity,
                sample_b: a,
                same: sc.identity == sa.identity,
                age_a: sc.age_years,
                age_b: sa.age_years,
            };
            if pair.same {
                positives.push(pair);
            } else {
                negatives.push(pair);
            }
        }
    }
    let achievable = positives.len().min(negatives.len());
    if count == 0 || count > achievable {
        return Err(Error::Precondition(format!(
            "requested {count} pairs per class with gap {gap}, at most {achievable} available"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<Pair> = index::sample(&mut rng, positives.len(), count)
        .into_iter()
        .map(|i| positives[i])
        .chain(
            index::sample(&mut rng, negatives.len(), count)
                .into_iter()
                .map(|i| negatives[i]),
        )
        .collect();
    pairs.shuffle(&mut rng);
    Ok(PairSet { pairs, gap })
}

const PAIR_HEADER: &str = "identity_a,sample_a,identity_b,sample_b,label,age_a,age_b";

pub fn write_pairs_csv<W: Write>(pairs: &PairSet, mut out: W) -> std::io::Result<()> {
    match pairs.gap {
        AgeGap::Unconstrained => writeln!(out, "# age gap: unconstrained")?,
        AgeGap::MoreThan(g) => writeln!(out, "# age gap: adult age - child age > {g} years (strict)")?,
    }
    writeln!(out, "{PAIR_HEADER}")?;
    for p in &pairs.pairs {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.identity_a,
            p.sample_a,
            p.identity_b,
            p.sample_b,
            if p.same { "same" } else { "different" },
            p.age_a,
            p.age_b
        )?;
    }
    Ok(())
}

pub fn read_pairs_csv(text: &str) -> Result<PairSet> {
    let mut gap = AgeGap::Unconstrained;
    let mut pairs = Vec::new();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let bad = |message: String| Error::Parse { line: lineno, message };
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(rest) = comment.trim().strip_prefix("age gap: adult age - child age > ") {
                let years = rest.split_whitespace().next().unwrap_or("");
                gap = AgeGap::MoreThan(years.parse().map_err(|_| bad(format!("bad gap `{years}`")))?);
            }
            continue;
        }
        if !seen_header {
            if line.trim() != PAIR_HEADER {
                return Err(bad(format!("expected header `{PAIR_HEADER}`")));
            }
            seen_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(format!("`{s}` is not an index")));
        let same = match f[4] {
            "same" => true,
            "different" => false,
            other => return Err(bad(format!("unknown label `{other}`"))),
        };
        pairs.push(Pair {
            identity_a: num(f[0])?,
            sample_a: num(f[1])?,
            identity_b: num(f[2])?,
            sample_b: num(f[3])?,
            same,
            age_a: num(f[5])? as u32,
            age_b: num(f[6])? as u32,
        });
    }
    Ok(PairSet { pairs, gap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub accuracy: f64,
    pub threshold: f64,
    pub scores: Vec<f64>,
}

/// Best accuracy over thresholds placed at midpoints between adjacent
/// distinct scores, plus one below the minimum and one above the maximum.
/// A pair is predicted "same" when its score is strictly above the threshold.
/// Ties between thresholds go to the lowest one.
pub fn best_threshold_accuracy(scores: &[f64], same: &[bool]) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() != same.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty scores and labels, got {} and {}",
            scores.len(),
            same.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("verification scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let total = scores.len() as f64;
    let positives = same.iter().filter(|&&s| s).count();

    // Threshold below everything: all predicted same.
    let lowest = scores[order[0]] - 1.0;
    let mut best = (positives as f64 / total, lowest);
    // `correct` counts negatives at or below the threshold plus positives above it.
    let mut correct = positives as i64;
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == v {
            correct += if same[order[j]] { -1 } else { 1 };
            j += 1;
        }
        let threshold = if j < order.len() {
            0.5 * (v + scores[order[j]])
        } else {
            v + 1.0
        };
        let acc = correct as f64 / total;
        if acc > best.0 {
            best = (acc, threshold);
        }
        i = j;
    }
    Ok(best)
}

pub fn pair_scores(embeddings: &Matrix, pairs: &PairSet, exec: Execution) -> Result<Vec<f64>> {
    let cols = embeddings.cols();
    if let Some(p) = pairs.pairs.iter().find(|p| p.sample_a >= cols || p.sample_b >= cols) {
        return Err(Error::Shape(format!(
            "pair references sample {} but only {cols} embeddings exist",
            p.sample_a.max(p.sample_b)
        )));
    }
    exec.map(pairs.pairs.clone(), |p| {
        cosine(&embeddings.col(p.sample_a), &embeddings.col(p.sample_b)).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "zero embedding in pair ({}, {})",
                p.sample_a, p.sample_b
            ))
        })
    })
    .into_iter()
    .collect()
}

pub fn verification_accuracy(embeddings: &Matrix, pairs: &PairSet) -> Result<VerificationReport> {
    if pairs.pairs.is_empty() {
        return Err(Error::InvalidArgument("empty pair set".into()));
    }
    let scores = pair_scores(embeddings, pairs, Execution::default())?;
    let labels: Vec<bool> = pairs.pairs.iter().map(|p| p.same).collect();
    let (accuracy, threshold) = best_threshold_accuracy(&scores, &labels)?;
    Ok(VerificationReport {
        accuracy,
        threshold,
        scores,
    })
}

/// Probe `k` (a child sample) and gallery entry `k` (an adult sample) share an identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationSplit {
    pub identities: Vec<usize>,
    pub probes: Vec<usize>,
    pub gallery: Vec<usize>,
    pub gap: AgeGap,
}

/// One child probe and one adult gallery image per qualifying identity.
///
/// Each gallery image must satisfy the gap against its own probe and against
/// every other identity's probe; identities that cannot are dropped until the
/// remaining set is consistent.
pub fn build_identification_split(dataset: &Dataset, gap: AgeGap, seed: u64) -> Result<IdentificationSplit> {
    let samples = dataset.samples();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_id: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (k, s) in samples.iter().enumerate() {
        let e = by_id.entry(s.identity).or_default();
        if s.is_child() {
            e.0.push(k);
        } else {
            e.1.push(k);
        }
    }
    // Youngest child as probe keeps the most adults eligible.
    let mut chosen: BTreeMap<usize, (usize, Vec<usize>)> = BTreeMap::new();
    for (&id, (kids, adults)) in &by_id {
        let Some(&probe) = kids.iter().min_by_key(|&&k| (samples[k].age_years, k)) else {
            continue;
        };
        let eligible: Vec<usize> = adults
            .iter()
            .copied()
            .filter(|&a| gap.admits(samples[probe].age_years, samples[a].age_years))
            .collect();
        if !eligible.is_empty() {
            chosen.insert(id, (probe, eligible));
        }
    }
    loop {
        let oldest_probe = chosen.values().map(|(p, _)| samples[*p].age_years).max();
        let Some(oldest) = oldest_probe else { break };
        let before = chosen.len();
        chosen.retain(|_, (_, eligible)| {
            eligible.retain(|&a| gap.admits(oldest, samples[a].age_years));
            !eligible.is_empty()
        });
        if chosen.len() == before {
            break;
        }
    }
    if chosen.is_empty() {
        return Err(Error::Precondition(format!(
            "no identity has a child and an adult image with gap {gap}"
        )));
    }
    let mut split = IdentificationSplit {
        identities: Vec::new(),
        probes: Vec::new(),
        gallery: Vec::new(),
        gap,
    };
    for (id, (probe, eligible)) in chosen {
        let pick = eligible[index::sample(&mut rng, eligible.len(), 1).index(0)];
        split.identities.push(id);
        split.probes.push(probe);
        split.gallery.push(pick);
    }
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rank1Report {
    pub accuracy: f64,
    /// Chosen gallery position for each probe.
    pub matches: Vec<usize>,
}

/// Nearest gallery entry by cosine for every probe; ties go to the lowest
/// gallery position.
pub fn rank1_identification(embeddings: &Matrix, split: &IdentificationSplit) -> Result<Rank1Report> {
    if split.gallery.is_empty() {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    if split.probes.len() != split.identities.len() || split.gallery.len() != split.identities.len() {
        return Err(Error::Shape("probe, gallery and identity lists differ in length".into()));
    }
    let probe_m = embeddings.select_columns(&split.probes);
    let gallery_m = embeddings.select_columns(&split.gallery);
    let sims = cosine_matrix(&probe_m, &gallery_m)?;
    let matches: Vec<usize> = (0..split.probes.len())
        .map(|p| {
            let mut best = 0;
            for g in 1..split.gallery.len() {
                if sims[(p, g)] > sims[(p, best)] {
                    best = g;
                }
            }
            best
        })
        .collect();
    let correct = matches
        .iter()
        .enumerate()
        .filter(|&(p, &g)| split.identities[p] == split.identities[g])
        .count();
    Ok(Rank1Report {
        accuracy: correct as f64 / split.probes.len() as f64,
        matches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

/// Maps `[-1, 1]` affinely onto `0..=255`, rounding half up.
pub fn gray_level(v: f64) -> u8 {
    let x = ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0 + 0.5).floor();
    x as u8
}

pub fn export_heatmap(matrix: &Matrix, format: HeatmapFormat) -> Result<Vec<u8>> {
    if !matrix.is_finite() {
        return Err(Error::NonFinite("heatmap matrix".into()));
    }
    let mut out = String::new();
    match format {
        HeatmapFormat::Csv => {
            for i in 0..matrix.rows() {
                let row: Vec<String> = matrix.row(i).iter().map(|v| v.to_string()).collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
        HeatmapFormat::Pgm => {
            if let Some(v) = matrix.data().iter().find(|v| v.abs() > 1.0 + 1e-9) {
                return Err(Error::InvalidArgument(format!(
                    "value {v} outside [-1, 1] cannot be written as grayscale"
                )));
            }
            out.push_str(&format!("P2\n{} {}\n255\n", matrix.cols(), matrix.rows()));
            for i in 0..matrix.rows() {
                let row: Vec<String> = matrix.row(i).iter().map(|&v| gray_level(v).to_string()).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
    }
    Ok(out.into_bytes())
}

pub fn parse_heatmap_csv(text: &str) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let values = line
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("`{t}` is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match cols {
            None => cols = Some(values.len()),
            Some(c) if c != values.len() => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {c} values, found {}", values.len()),
                })
            }
            _ => {}
        }
        data.extend(values);
        rows += 1;
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub identity: usize,
    pub is_child: bool,
    pub x: f64,
    pub y: f64,
}

/// PCA layout of the unit-normalised prototype columns, tagged child/non-child.
pub fn project_prototypes_2d(head: &PrototypeHead, child_ids: &[usize]) -> Result<Vec<ProjectedPoint>> {
    let n = head.weights.cols();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need >= 3 prototypes, got {n}")));
    }
    let unit = l2_normalize_columns(&head.weights, 1e-12)?.matrix;
    let proj = pca_2d(&unit.transpose())?;
    let children: BTreeSet<usize> = child_ids.iter().copied().collect();
    Ok((0..n)
        .map(|j| ProjectedPoint {
            identity: j,
            is_child: children.contains(&j),
            x: proj.coords[(j, 0)],
            y: proj.coords[(j, 1)],
        })
        .collect())
}

pub fn write_projection_csv<W: Write>(points: &[ProjectedPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "identity,is_child,x,y")?;
    for p in points {
        writeln!(out, "{},{},{},{}", p.identity, p.is_child as u8, p.x, p.y)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, AgeGroup, SyntheticSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn sample(identity: usize, years: u32, features: Vec<f64>) -> Sample {
        Sample {
            identity,
            age_group: AgeGroup::from_years(years),
            age_years: years,
            features,
        }
    }

    #[test]
    fn intra_extremes() {
        let w = Matrix::identity(3);
        let ds = Dataset::new(
            vec![
                sample(0, 30, vec![2.0, 0.0, 0.0]),
                sample(1, 5, vec![0.0, 1.0, 0.0]),
                sample(2, 40, vec![0.0, 0.0, 3.0]),
            ],
            3,
        )
        .unwrap();
        let r = intra_class_similarity(&ds.feature_matrix(), &w, &ds, RoleFilter::All).unwrap();
        assert_eq!(r.values, vec![1.0, 1.0, 1.0]);

        let ortho = Matrix::from_columns(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let r = intra_class_similarity(&ds.feature_matrix(), &ortho, &ds, RoleFilter::All).unwrap();
        assert_eq!(r.values, vec![0.0, 0.0, 0.0]);

        let r = intra_class_similarity(&ds.feature_matrix(), &w, &ds, RoleFilter::Child).unwrap();
        assert_eq!(r.identities, vec![1]);
        assert_eq!(r.excluded, vec![0, 2]);
    }

    #[test]
    fn inter_extremes() {
        let same = Dataset::new(
            vec![sample(0, 30, vec![0.6, 0.8]), sample(1, 30, vec![0.6, 0.8])],
            2,
        )
        .unwrap();
        let m = inter_class_similarity(&same.feature_matrix(), &same, RoleFilter::All).unwrap();
        assert!((m.matrix[(0, 1)] - 1.0).abs() < 1e-15);
        let ortho = Dataset::new(
            vec![
                sample(0, 30, vec![1.0, 0.0]),
                sample(0, 31, vec![2.0, 0.0]),
                sample(1, 30, vec![0.0, 1.0]),
            ],
            2,
        )
        .unwrap();
        let m = inter_class_similarity(&ortho.feature_matrix(), &ortho, RoleFilter::All).unwrap();
        assert_eq!(m.matrix[(0, 1)], 0.0);
        assert!(inter_class_similarity(&ortho.feature_matrix(), &ortho, RoleFilter::Child).is_err());
    }

    #[test]
    fn prototype_similarity_summaries() {
        let head = PrototypeHead {
            weights: Matrix::identity(4),
            child_ids: vec![],
        };
        let r = prototype_similarity(&head, &[0, 1, 3]).unwrap();
        assert_eq!(r.matrix, Matrix::identity(3));
        assert_eq!(r.mean_abs_off_diagonal, 0.0);

        let dup = PrototypeHead {
            weights: Matrix::from_columns(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap(),
            child_ids: vec![],
        };
        let r = prototype_similarity(&dup, &[0, 1]).unwrap();
        assert!((r.mean_abs_off_diagonal - 1.0).abs() < 1e-15);
        assert!(prototype_similarity(&dup, &[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::from_vec(5, 6, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let head = PrototypeHead {
            weights: w.clone(),
            child_ids: vec![],
        };
        let sub = [1, 4, 5];
        let direct = cosine_matrix(&w.select_columns(&sub), &w.select_columns(&sub)).unwrap();
        assert_eq!(prototype_similarity(&head, &sub).unwrap().matrix, direct);
    }

    #[test]
    fn gap_boundary_excludes_nineteen_years() {
        let ds = Dataset::new(
            vec![
                sample(0, 5, vec![1.0, 0.0]),
                sample(0, 24, vec![1.0, 0.1]),
                sample(1, 3, vec![0.0, 1.0]),
                sample(1, 30, vec![0.1, 1.0]),
            ],
            2,
        )
        .unwrap();
        assert!(!AgeGap::MoreThan(20).admits(5, 24));
        assert!(!AgeGap::MoreThan(20).admits(5, 25));
        assert!(AgeGap::MoreThan(20).admits(5, 26));
        // Only identity 1 can form a positive pair at gap 20.
        let err = build_verification_pairs(&ds, AgeGap::MoreThan(20), 2, 0).unwrap_err();
        assert!(err.to_string().contains("at most 1"), "{err}");
        let set = build_verification_pairs(&ds, AgeGap::MoreThan(20), 1, 0).unwrap();
        assert!(set.pairs.iter().all(|p| p.sample_a != 0 || p.sample_b != 1));
        let loose = build_verification_pairs(&ds, AgeGap::Unconstrained, 2, 0).unwrap();
        assert_eq!(loose.pairs.len(), 4);
    }

    #[test]
    fn pairs_are_balanced_unique_and_deterministic() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let set = build_verification_pairs(&ds, AgeGap::MoreThan(20), 10, 4).unwrap();
        assert_eq!(set.pairs.iter().filter(|p| p.same).count(), 10);
        assert_eq!(set.pairs.iter().filter(|p| !p.same).count(), 10);
        let unique: BTreeSet<(usize, usize)> = set.pairs.iter().map(|p| (p.sample_a, p.sample_b)).collect();
        assert_eq!(unique.len(), 20);
        assert_eq!(set, build_verification_pairs(&ds, AgeGap::MoreThan(20), 10, 4).unwrap());
    }

    #[test]
    fn pair_file_round_trip() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let set = build_verification_pairs(&ds, AgeGap::MoreThan(30), 15, 1).unwrap();
        let mut buf = Vec::new();
        write_pairs_csv(&set, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# age gap: adult age - child age > 30 years (strict)\n"));
        assert_eq!(read_pairs_csv(&text).unwrap(), set);
    }

    #[test]
    fn verification_extremes() {
        let scores = [0.9, 0.1, 0.9, 0.1];
        let labels = [true, false, true, false];
        assert_eq!(best_threshold_accuracy(&scores, &labels).unwrap().0, 1.0);
        let flat = [0.3; 6];
        let labels = [true, false, true, false, true, false];
        assert_eq!(best_threshold_accuracy(&flat, &labels).unwrap().0, 0.5);
        assert!(best_threshold_accuracy(&[], &[]).is_err());
    }

    /// Tries every candidate threshold and counts correct decisions directly.
    fn scan_oracle(scores: &[f64], same: &[bool]) -> (f64, f64) {
        let mut sorted: Vec<f64> = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        let mut candidates = vec![sorted[0] - 1.0];
        candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        candidates.push(sorted[sorted.len() - 1] + 1.0);
        let mut best = (-1.0, 0.0);
        for t in candidates {
            let correct = scores
                .iter()
                .zip(same)
                .filter(|(s, y)| (**s > t) == **y)
                .count();
            let acc = correct as f64 / scores.len() as f64;
            if acc > best.0 {
                best = (acc, t);
            }
        }
        best
    }

    #[test]
    fn best_threshold_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = 2 * rng.random_range(1..30);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(-10..10) as f64) / 10.0).collect();
            let same: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            assert_eq!(best_threshold_accuracy(&scores, &same).unwrap(), scan_oracle(&scores, &same));
        }
    }

    #[test]
    fn rank1_examples() {
        let emb = Matrix::from_columns(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.1, 1.0],
        ])
        .unwrap();
        let split = IdentificationSplit {
            identities: vec![0, 1],
            probes: vec![0, 2],
            gallery: vec![1, 3],
            gap: AgeGap::Unconstrained,
        };
        let r = rank1_identification(&emb, &split).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let single = IdentificationSplit {
            identities: vec![0],
            probes: vec![2],
            gallery: vec![1],
            gap: AgeGap::Unconstrained,
        };
        assert_eq!(rank1_identification(&emb, &single).unwrap().accuracy, 1.0);
        let empty = IdentificationSplit {
            identities: vec![],
            probes: vec![],
            gallery: vec![],
            gap: AgeGap::Unconstrained,
        };
        assert!(rank1_identification(&emb, &empty).is_err());
    }

    #[test]
    fn rank1_ties_pick_lowest_gallery_index() {
        let emb = Matrix::from_columns(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 2.0]]).unwrap();
        let split = IdentificationSplit {
            identities: vec![5, 6],
            probes: vec![1, 0],
            gallery: vec![1, 2],
            gap: AgeGap::Unconstrained,
        };
        let r = rank1_identification(&emb, &split).unwrap();
        assert_eq!(r.matches, vec![0, 0]);
    }

    #[test]
    fn identification_split_respects_gaps() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let split = build_identification_split(&ds, AgeGap::MoreThan(20), 3).unwrap();
        let s = ds.samples();
        let oldest = split.probes.iter().map(|&p| s[p].age_years).max().unwrap();
        for ((&id, &p), &g) in split.identities.iter().zip(&split.probes).zip(&split.gallery) {
            assert!(s[p].is_child() && !s[g].is_child());
            assert_eq!((s[p].identity, s[g].identity), (id, id));
            assert!(s[g].age_years > oldest + 20);
        }
        assert!(split.identities.len() >= 2);
    }

    #[test]
    fn heatmap_encodings() {
        let one = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        assert_eq!(export_heatmap(&one, HeatmapFormat::Pgm).unwrap(), b"P2\n1 1\n255\n255\n");
        let zero = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        assert_eq!(export_heatmap(&zero, HeatmapFormat::Pgm).unwrap(), b"P2\n1 1\n255\n128\n");
        let neg = Matrix::from_vec(1, 2, vec![-1.0, 0.5]).unwrap();
        assert_eq!(export_heatmap(&neg, HeatmapFormat::Pgm).unwrap(), b"P2\n2 1\n255\n0 191\n");
        let big = Matrix::from_vec(1, 1, vec![1.5]).unwrap();
        assert!(export_heatmap(&big, HeatmapFormat::Pgm).is_err());
        assert!(export_heatmap(&big, HeatmapFormat::Csv).is_ok());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let bytes = export_heatmap(&m, HeatmapFormat::Csv).unwrap();
        let back = parse_heatmap_csv(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(back.shape(), m.shape());
        for (a, b) in m.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_cases() {
        let same = PrototypeHead {
            weights: Matrix::from_columns(&vec![vec![0.3, -0.2, 0.9]; 5]).unwrap(),
            child_ids: vec![],
        };
        let pts = project_prototypes_2d(&same, &[1, 2]).unwrap();
        assert!(pts.iter().all(|p| p.x == 0.0 && p.y == 0.0));
        assert_eq!(pts.iter().filter(|p| p.is_child).count(), 2);
        assert_eq!(pts.iter().filter(|p| !p.is_child).count(), 3);

        let planar: Vec<Vec<f64>> = (0..6)
            .map(|k| {
                let t = k as f64 * 0.4;
                vec![t.cos(), 0.0, t.sin(), 0.0]
            })
            .collect();
        let head = PrototypeHead {
            weights: Matrix::from_columns(&planar).unwrap(),
            child_ids: vec![],
        };
        let pts = project_prototypes_2d(&head, &[]).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                let d_in = crate::math::norm(
                    &planar[a].iter().zip(&planar[b]).map(|(x, y)| x - y).collect::<Vec<_>>(),
                );
                let d_out = ((pts[a].x - pts[b].x).powi(2) + (pts[a].y - pts[b].y).powi(2)).sqrt();
                assert!((d_in - d_out).abs() < 1e-9);
            }
        }
        let mut buf = Vec::new();
        write_projection_csv(&pts[..1], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("identity,is_child,x,y\n0,0,"));
    }

    proptest! {
        #[test]
        fn accuracy_is_at_least_half_and_monotone_invariant(
            raw in proptest::collection::vec(-1.0f64..1.0, 2..40),
        ) {
            let n = raw.len() / 2 * 2;
            let scores = &raw[..n];
            let same: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            let (acc, _) = best_threshold_accuracy(scores, &same).unwrap();
            prop_assert!(acc >= 0.5);
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).tanh() * 2.0 + 0.1).collect();
            let (acc2, _) = best_threshold_accuracy(&warped, &same).unwrap();
            prop_assert_eq!(acc, acc2);
        }

        #[test]
        fn rank1_ignores_positive_rescaling(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb = Matrix::from_vec(4, 10, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let split = IdentificationSplit {
                identities: vec![0, 1, 2, 3, 4],
                probes: vec![0, 1, 2, 3, 4],
                gallery: vec![5, 6, 7, 8, 9],
                gap: AgeGap::Unconstrained,
            };
            let mut scaled = emb.clone();
            for j in 0..10 {
                let a = rng.random_range(0.1..10.0);
                for i in 0..4 {
                    scaled[(i, j)] *= a;
                }
            }
            let a = rank1_identification(&emb, &split).unwrap();
            let b = rank1_identification(&scaled, &split).unwrap();
            prop_assert_eq!(a.accuracy, b.accuracy);
        }
    }
}
