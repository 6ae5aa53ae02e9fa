//! Codebooks: storage, nearest-code lookup, k-means initialization, and
//! utilization accounting.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::SourceTag;
use crate::error::{Error, Result};
use crate::ndmath::{sq_dist, Matrix, Real};

/// Which stage a codebook belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Scope {
    Shared,
    Specific(SourceTag),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Shared => f.write_str("shared"),
            Scope::Specific(s) => write!(f, "{s}"),
        }
    }
}

impl From<Scope> for String {
    fn from(s: Scope) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Scope {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        if s == "shared" {
            Ok(Scope::Shared)
        } else {
            Ok(Scope::Specific(s.parse()?))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T = f32> {
    /// `K × d_c`, one codeword per row.
    pub entries: Matrix<T>,
    /// Zero-based position in the full level path (shared levels first).
    pub level: usize,
    pub scope: Scope,
}

impl<T: Real> Codebook<T> {
    pub fn new(entries: Matrix<T>, level: usize, scope: Scope) -> Result<Self> {
        if entries.rows() < 2 {
            return Err(Error::invalid(format!(
                "codebook needs at least 2 entries, got {}",
                entries.rows()
            )));
        }
        if !entries.is_finite() {
            return Err(Error::NonFinite(format!("codebook {scope}/{level}")));
        }
        Ok(Self {
            entries,
            level,
            scope,
        })
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entry(&self, k: usize) -> &[T] {
        self.entries.row(k)
    }

    pub fn cast<U: Real>(&self) -> Codebook<U> {
        Codebook {
            entries: self.entries.cast(),
            level: self.level,
            scope: self.scope,
        }
    }
}

/// `argmin_k ‖r − v_k‖²`, ties going to the lowest index.
pub fn nearest_code<T: Real>(codebook: &Codebook<T>, r: &[T]) -> Result<(usize, T)> {
    if r.len() != codebook.dim() {
        return Err(Error::Dimension {
            op: "nearest_code",
            left: (1, r.len()),
            right: codebook.entries.shape(),
        });
    }
    Ok(nearest_row(&codebook.entries, r))
}

fn nearest_row<T: Real>(entries: &Matrix<T>, r: &[T]) -> (usize, T) {
    let mut best = 0;
    let mut best_d = T::infinity();
    for (k, e) in entries.row_iter().enumerate() {
        let d = sq_dist(e, r);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    (best, best_d)
}

#[derive(Debug, Clone)]
pub struct KMeansResult<T> {
    pub centroids: Matrix<T>,
    pub assignments: Vec<usize>,
    /// Within-cluster SSE after seeding and after each Lloyd iteration.
    pub sse_history: Vec<f64>,
}

fn sse<T: Real>(samples: &Matrix<T>, centroids: &Matrix<T>, assign: &[usize]) -> f64 {
    samples
        .row_iter()
        .zip(assign)
        .map(|(s, &a)| sq_dist(s, centroids.row(a)).as_f64())
        .sum()
}

/// k-means++ seeding followed by `iters` Lloyd iterations. Clusters that
/// end up empty are re-seeded to the samples farthest from their centroid.
pub fn kmeans<T: Real, R: Rng + ?Sized>(
    samples: &Matrix<T>,
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Result<KMeansResult<T>> {
    let m = samples.rows();
    if k == 0 || m < k {
        return Err(Error::invalid(format!(
            "k-means needs at least K = {k} samples, got {m}"
        )));
    }
    let dim = samples.cols();

    // k-means++ seeding.
    let mut centroids = Matrix::<T>::zeros(k, dim);
    let mut chosen = vec![false; m];
    let first = rng.random_range(0..m);
    centroids.row_mut(0).copy_from_slice(samples.row(first));
    chosen[first] = true;
    let mut d2: Vec<f64> = samples
        .row_iter()
        .map(|s| sq_dist(s, centroids.row(0)).as_f64())
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().zip(&chosen).filter(|(_, &ch)| !ch).map(|(d, _)| d).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if chosen[i] || d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
            pick.expect("positive total weight")
        } else {
            let rest: Vec<usize> = (0..m).filter(|&i| !chosen[i]).collect();
            rest[rng.random_range(0..rest.len())]
        };
        chosen[pick] = true;
        centroids.row_mut(c).copy_from_slice(samples.row(pick));
        for (i, s) in samples.row_iter().enumerate() {
            let d = sq_dist(s, centroids.row(c)).as_f64();
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let assign_all = |centroids: &Matrix<T>| -> Vec<usize> {
        samples.row_iter().map(|s| nearest_row(centroids, s).0).collect()
    };
    let mut assignments = assign_all(&centroids);
    let mut sse_history = vec![sse(samples, &centroids, &assignments)];

    for _ in 0..iters {
        // Update step.
        let mut sums = Matrix::<f64>::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (s, &a) in samples.row_iter().zip(&assignments) {
            counts[a] += 1;
            for (acc, &v) in sums.row_mut(a).iter_mut().zip(s) {
                *acc += v.as_f64();
            }
        }
        let mut empty = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                empty.push(c);
                continue;
            }
            let n = counts[c] as f64;
            for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = T::lit(s / n);
            }
        }
        if !empty.is_empty() {
            let mut far: Vec<(f64, usize)> = samples
                .row_iter()
                .zip(&assignments)
                .enumerate()
                .map(|(i, (s, &a))| (sq_dist(s, centroids.row(a)).as_f64(), i))
                .collect();
            far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (c, (_, i)) in empty.into_iter().zip(far) {
                centroids.row_mut(c).copy_from_slice(samples.row(i));
            }
        }
        // Assignment step.
        assignments = assign_all(&centroids);
        sse_history.push(sse(samples, &centroids, &assignments));
    }

    Ok(KMeansResult {
        centroids,
        assignments,
        sse_history,
    })
}

/// Replaces the codebook's entries with k-means centroids of `samples`.
pub fn kmeans_init<T: Real, R: Rng + ?Sized>(
    codebook: &mut Codebook<T>,
    samples: &Matrix<T>,
    iters: usize,
    rng: &mut R,
) -> Result<()> {
    if samples.cols() != codebook.dim() {
        return Err(Error::Dimension {
            op: "kmeans_init",
            left: samples.shape(),
            right: codebook.entries.shape(),
        });
    }
    let res = kmeans(samples, codebook.size(), iters, rng)?;
    codebook.entries = res.centroids;
    Ok(())
}

/// `L_c` shared codebooks plus `L_u` codebooks per source, all `K × d_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStack<T = f32> {
    pub shared: Vec<Codebook<T>>,
    pub specific: BTreeMap<SourceTag, Vec<Codebook<T>>>,
}

impl<T: Real> CodebookStack<T> {
    /// All-zero codebooks; meant to be initialized before use.
    pub fn zeros(
        sources: &[SourceTag],
        shared_levels: usize,
        specific_levels: usize,
        size: usize,
        dim: usize,
    ) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid("codebook size K must be ≥ 2"));
        }
        if shared_levels + specific_levels == 0 {
            return Err(Error::invalid("at least one quantization level is required"));
        }
        let shared = (0..shared_levels)
            .map(|l| Codebook::new(Matrix::zeros(size, dim), l, Scope::Shared))
            .collect::<Result<Vec<_>>>()?;
        let specific = sources
            .iter()
            .map(|&s| {
                let books = (0..specific_levels)
                    .map(|l| {
                        Codebook::new(Matrix::zeros(size, dim), shared_levels + l, Scope::Specific(s))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((s, books))
            })
            .collect::<Result<_>>()?;
        Ok(Self { shared, specific })
    }

    pub fn shared_levels(&self) -> usize {
        self.shared.len()
    }

    pub fn specific_levels(&self) -> usize {
        self.specific.values().next().map_or(0, Vec::len)
    }

    pub fn total_levels(&self) -> usize {
        self.shared_levels() + self.specific_levels()
    }

    pub fn sources(&self) -> Vec<SourceTag> {
        self.specific.keys().copied().collect()
    }

    pub fn codebook_size(&self) -> usize {
        self.all().next().map_or(0, Codebook::size)
    }

    pub fn code_dim(&self) -> usize {
        self.all().next().map_or(0, Codebook::dim)
    }

    pub fn has_source(&self, source: SourceTag) -> bool {
        self.specific.contains_key(&source)
    }

    /// The codebook used at `level` (zero-based) for `source`.
    pub fn level_book(&self, source: SourceTag, level: usize) -> Result<&Codebook<T>> {
        let books = self.specific.get(&source).ok_or(Error::UnknownSource(source))?;
        if level < self.shared.len() {
            Ok(&self.shared[level])
        } else {
            books
                .get(level - self.shared.len())
                .ok_or_else(|| Error::invalid(format!("level {level} out of range")))
        }
    }

    pub fn book(&self, scope: Scope, level: usize) -> Option<&Codebook<T>> {
        match scope {
            Scope::Shared => self.shared.get(level),
            Scope::Specific(s) => self
                .specific
                .get(&s)?
                .get(level.checked_sub(self.shared.len())?),
        }
    }

    /// Shared books first, then each source's books in canonical order.
    pub fn all(&self) -> impl Iterator<Item = &Codebook<T>> {
        self.shared.iter().chain(self.specific.values().flatten())
    }

    pub fn all_mut(&mut self) -> impl Iterator<Item = &mut Codebook<T>> {
        self.shared
            .iter_mut()
            .chain(self.specific.values_mut().flatten())
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d) = (self.codebook_size(), self.code_dim());
        let lu = self.specific_levels();
        for (i, b) in self.shared.iter().enumerate() {
            if b.scope != Scope::Shared || b.level != i {
                return Err(Error::invalid(format!("shared codebook {i} mislabelled")));
            }
        }
        for (s, books) in &self.specific {
            if books.len() != lu {
                return Err(Error::invalid(format!(
                    "source {s} has {} specific levels, expected {lu}",
                    books.len()
                )));
            }
            for (i, b) in books.iter().enumerate() {
                if b.scope != Scope::Specific(*s) || b.level != self.shared.len() + i {
                    return Err(Error::invalid(format!("codebook {s}/{i} mislabelled")));
                }
            }
        }
        for b in self.all() {
            if b.size() != k || b.dim() != d {
                return Err(Error::invalid(format!(
                    "codebook {}/{} is {:?}, expected ({k}, {d})",
                    b.scope,
                    b.level,
                    b.entries.shape()
                )));
            }
            if k < 2 {
                return Err(Error::invalid("codebook size K must be ≥ 2"));
            }
            if !b.entries.is_finite() {
                return Err(Error::NonFinite(format!("codebook {}/{}", b.scope, b.level)));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> CodebookStack<U> {
        CodebookStack {
            shared: self.shared.iter().map(Codebook::cast).collect(),
            specific: self
                .specific
                .iter()
                .map(|(s, b)| (*s, b.iter().map(Codebook::cast).collect()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelUtilization {
    pub scope: Scope,
    pub level: usize,
    pub used: usize,
    pub total: usize,
    pub ratio: f64,
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilizationStats {
    pub levels: Vec<LevelUtilization>,
}

impl UtilizationStats {
    pub fn get(&self, scope: Scope, level: usize) -> Option<&LevelUtilization> {
        self.levels
            .iter()
            .find(|l| l.scope == scope && l.level == level)
    }
}

/// Counts how many distinct entries each (scope, level) codebook used.
///
/// Every listed codebook must have at least one assignment.
pub fn record_utilization<T: Real>(
    stack: &CodebookStack<T>,
    assignments: &BTreeMap<(Scope, usize), Vec<usize>>,
) -> Result<UtilizationStats> {
    let mut levels = Vec::with_capacity(assignments.len());
    for (&(scope, level), codes) in assignments {
        let book = stack
            .book(scope, level)
            .ok_or_else(|| Error::invalid(format!("no codebook {scope}/{level}")))?;
        if codes.is_empty() {
            return Err(Error::invalid(format!(
                "no assignments for codebook {scope}/{level}; utilization undefined"
            )));
        }
        let k = book.size();
        let mut histogram = vec![0u64; k];
        for &c in codes {
            if c >= k {
                return Err(Error::TokenOutOfRange {
                    id: c as u64,
                    reason: format!("codebook {scope}/{level} has {k} entries"),
                });
            }
            histogram[c] += 1;
        }
        let used = histogram.iter().filter(|&&h| h > 0).count();
        levels.push(LevelUtilization {
            scope,
            level,
            used,
            total: k,
            ratio: used as f64 / k as f64,
            histogram,
        });
    }
    Ok(UtilizationStats { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[&[f64]]) -> Codebook<f64> {
        let m = Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        Codebook::new(m, 0, Scope::Shared).unwrap()
    }

    fn naive(entries: &Matrix<f64>, r: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for k in 0..entries.rows() {
            let mut d = 0.0;
            for j in 0..r.len() {
                d += (entries.get(k, j) - r[j]).powi(2);
            }
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    #[test]
    fn nearest_code_examples() {
        let b = book(&[&[0., 0.], &[1., 0.], &[0., 1.]]);
        let (i, d) = nearest_code(&b, &[0.9, 0.1]).unwrap();
        assert_eq!(i, 1);
        assert!((d - 0.02).abs() < 1e-12);
        assert_eq!(nearest_code(&b, &[0., 1.]).unwrap(), (2, 0.0));
        assert_eq!(nearest_code(&b, &[0.5, 0.5]).unwrap().0, 0);
        assert!(nearest_code(&b, &[0.5]).is_err());
    }

    #[test]
    fn codebook_needs_two_entries() {
        assert!(Codebook::new(Matrix::<f32>::zeros(1, 3), 0, Scope::Shared).is_err());
    }

    proptest! {
        #[test]
        fn nearest_matches_naive_scan(
            entries in prop::collection::vec(-3.0f64..3.0, 8 * 3),
            r in prop::collection::vec(-3.0f64..3.0, 3),
        ) {
            let m = Matrix::new(8, 3, entries).unwrap();
            let b = Codebook::new(m.clone(), 0, Scope::Shared).unwrap();
            prop_assert_eq!(nearest_code(&b, &r).unwrap().0, naive(&m, &r));
        }

        #[test]
        fn appending_farther_entries_keeps_choice(
            entries in prop::collection::vec(-3.0f64..3.0, 6 * 2),
            r in prop::collection::vec(-1.0f64..1.0, 2),
            far in prop::collection::vec(10.0f64..20.0, 4),
        ) {
            let m = Matrix::new(6, 2, entries.clone()).unwrap();
            let b = Codebook::new(m, 0, Scope::Shared).unwrap();
            let (i, d) = nearest_code(&b, &r).unwrap();
            let mut more = entries;
            more.extend(far);
            let b2 = Codebook::new(Matrix::new(8, 2, more).unwrap(), 0, Scope::Shared).unwrap();
            prop_assert_eq!(nearest_code(&b2, &r).unwrap(), (i, d));
        }

        #[test]
        fn utilization_monotone_in_assignments(codes in prop::collection::vec(0usize..16, 1..60)) {
            let stack = CodebookStack::<f32>::zeros(&[SourceTag::App], 1, 1, 16, 2).unwrap();
            let mut prev = 0.0;
            for n in 1..=codes.len() {
                let mut a = BTreeMap::new();
                a.insert((Scope::Shared, 0), codes[..n].to_vec());
                let s = record_utilization(&stack, &a).unwrap();
                let r = s.levels[0].ratio;
                prop_assert!(r >= prev && r > 0.0 && r <= 1.0);
                prop_assert_eq!(s.levels[0].histogram.iter().sum::<u64>(), n as u64);
                prev = r;
            }
        }
    }

    #[test]
    fn kmeans_exact_fit_is_permutation() {
        let pts = [[0., 0.], [5., 1.], [-3., 2.], [1., 7.]];
        let samples = Matrix::<f64>::from_rows(&pts).unwrap();
        let mut b = Codebook::new(Matrix::zeros(4, 2), 0, Scope::Shared).unwrap();
        kmeans_init(&mut b, &samples, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut got: Vec<Vec<f64>> = b.entries.row_iter().map(<[f64]>::to_vec).collect();
        let mut want: Vec<Vec<f64>> = pts.iter().map(|p| p.to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..200 * 3).map(|_| rng.random::<f64>()).collect();
        let samples = Matrix::new(200, 3, data).unwrap();
        let a = kmeans(&samples, 8, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = kmeans(&samples, 8, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn lloyd_never_increases_sse() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..300 * 4).map(|_| rng.random::<f64>() * 4.0).collect();
            let samples = Matrix::new(300, 4, data).unwrap();
            let res = kmeans(&samples, 16, 10, &mut rng).unwrap();
            // Recompute the final SSE independently.
            let mut sse = 0.0;
            for (i, &a) in res.assignments.iter().enumerate() {
                for j in 0..4 {
                    sse += (samples.get(i, j) - res.centroids.get(a, j)).powi(2);
                }
            }
            assert!((sse - res.sse_history.last().unwrap()).abs() < 1e-9);
            for w in res.sse_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", res.sse_history);
            }
        }
    }

    #[test]
    fn empty_clusters_are_reseeded() {
        // Many duplicates: seeding must still produce K centroids and
        // every centroid ends up owning at least one sample.
        let mut rows = vec![[0.0, 0.0]; 20];
        rows.extend([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]]);
        let samples = Matrix::<f64>::from_rows(&rows).unwrap();
        let res = kmeans(&samples, 4, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut used = res.assignments.clone();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), 4);
    }

    #[test]
    fn kmeans_rejects_too_few_samples() {
        let samples = Matrix::<f32>::zeros(3, 2);
        let mut b = Codebook::new(Matrix::zeros(4, 2), 0, Scope::Shared).unwrap();
        assert!(kmeans_init(&mut b, &samples, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn utilization_examples() {
        let stack = CodebookStack::<f32>::zeros(&[SourceTag::Bill], 1, 1, 4, 2).unwrap();
        let mut a = BTreeMap::new();
        a.insert((Scope::Shared, 0), vec![0, 0, 1]);
        a.insert((Scope::Specific(SourceTag::Bill), 1), vec![0, 1, 2, 3]);
        let s = record_utilization(&stack, &a).unwrap();
        let shared = s.get(Scope::Shared, 0).unwrap();
        assert_eq!((shared.used, shared.ratio), (2, 0.5));
        assert_eq!(shared.histogram, vec![2, 1, 0, 0]);
        assert_eq!(s.get(Scope::Specific(SourceTag::Bill), 1).unwrap().ratio, 1.0);

        a.insert((Scope::Shared, 0), vec![]);
        assert!(record_utilization(&stack, &a).is_err());
        a.insert((Scope::Shared, 0), vec![4]);
        assert!(record_utilization(&stack, &a).is_err());
    }

    #[test]
    fn stack_layout() {
        let stack =
            CodebookStack::<f32>::zeros(&[SourceTag::Bill, SourceTag::App], 2, 3, 8, 4).unwrap();
        stack.validate().unwrap();
        assert_eq!(stack.total_levels(), 5);
        assert_eq!(stack.level_book(SourceTag::App, 1).unwrap().scope, Scope::Shared);
        let b = stack.level_book(SourceTag::App, 4).unwrap();
        assert_eq!((b.scope, b.level), (Scope::Specific(SourceTag::App), 4));
        assert!(stack.level_book(SourceTag::Search, 0).is_err());
        assert_eq!(stack.all().count(), 2 + 2 * 3);
        assert_eq!(serde_json::to_string(&Scope::Specific(SourceTag::Spm)).unwrap(), "\"SPM\"");
    }
}
