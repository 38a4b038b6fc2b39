//! Evaluation metrics: Fréchet distances between feature Gaussians (FID on
//! single frames, FVD on whole sequences) and the Inception Score, over a
//! pluggable embedder so the math is testable without pretrained networks.

use crate::error::{Error, Result};
use crate::par;
use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Mean and covariance of an embedded sample set.
#[derive(Debug, Clone)]
pub struct FeatureGaussian {
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
    pub n: usize,
}

/// Streaming mean/covariance accumulator (Welford, with a pairwise merge
/// rule so shards computed in parallel combine associatively).
#[derive(Debug, Clone)]
pub struct RunningMoments {
    pub n: usize,
    mean: Array1<f64>,
    /// Sum of outer products of deviations (unnormalized covariance).
    m2: Array2<f64>,
}

impl RunningMoments {
    pub fn new(dim: usize) -> Self {
        RunningMoments {
            n: 0,
            mean: Array1::zeros(dim),
            m2: Array2::zeros((dim, dim)),
        }
    }

    pub fn push(&mut self, x: &Array1<f64>) {
        self.n += 1;
        let delta = x - &self.mean;
        self.mean = &self.mean + &(&delta / self.n as f64);
        let delta2 = x - &self.mean;
        // M2 += delta * delta2^T
        for i in 0..delta.len() {
            for j in 0..delta.len() {
                self.m2[[i, j]] += delta[i] * delta2[j];
            }
        }
    }

    pub fn merge(mut self, other: &RunningMoments) -> RunningMoments {
        if other.n == 0 {
            return self;
        }
        if self.n == 0 {
            return other.clone();
        }
        let n1 = self.n as f64;
        let n2 = other.n as f64;
        let total = n1 + n2;
        let delta = &other.mean - &self.mean;
        for i in 0..delta.len() {
            for j in 0..delta.len() {
                self.m2[[i, j]] += other.m2[[i, j]] + delta[i] * delta[j] * n1 * n2 / total;
            }
        }
        self.mean = &self.mean + &(&delta * (n2 / total));
        self.n += other.n;
        self
    }

    pub fn finalize(&self) -> Result<FeatureGaussian> {
        if self.n < 2 {
            return Err(Error::invalid("gaussian_stats", format!("need >= 2 samples, got {}", self.n)));
        }
        Ok(FeatureGaussian {
            mu: self.mean.clone(),
            sigma: &self.m2 / (self.n as f64 - 1.0),
            n: self.n,
        })
    }
}

/// Sample mean and unbiased covariance of an n x d feature matrix.
pub fn gaussian_stats(features: &ArrayView2<f64>) -> Result<FeatureGaussian> {
    let mut acc = RunningMoments::new(features.ncols());
    for row in features.axis_iter(Axis(0)) {
        acc.push(&row.to_owned());
    }
    acc.finalize()
}

fn to_nalgebra(m: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
/// Eigenvalues in [-tol, 0) are clipped to zero; anything more negative is
/// an error.
fn sqrtm_psd(m: &nalgebra::DMatrix<f64>, tol: f64) -> Result<nalgebra::DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -tol {
            return Err(Error::numeric(
                "frechet_distance",
                format!("covariance eigenvalue {v} below -{tol}"),
            ));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = nalgebra::DMatrix::from_diagonal(&roots);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), computed through the
/// symmetric form Sa^(1/2) Sb Sa^(1/2).
pub fn frechet_distance(a: &FeatureGaussian, b: &FeatureGaussian) -> Result<f64> {
    if a.mu.len() != b.mu.len() {
        return Err(Error::shape(
            "frechet_distance",
            format!("dim {}", a.mu.len()),
            format!("dim {}", b.mu.len()),
        ));
    }
    // Identical statistics have distance zero by definition; skip the
    // eigendecompositions and their floating-point residue.
    if a.mu == b.mu && a.sigma == b.sigma {
        return Ok(0.0);
    }
    let tol = 1e-6;
    let sa = to_nalgebra(&a.sigma);
    let sb = to_nalgebra(&b.sigma);
    let sa_half = sqrtm_psd(&sa, tol)?;
    let inner = &sa_half * &sb * &sa_half;
    let cross = sqrtm_psd(&inner, tol)?;
    let mean_term: f64 = a
        .mu
        .iter()
        .zip(b.mu.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross.trace();
    // Kill the tiny negative residue of the eigen round trips.
    Ok(d.max(0.0))
}

/// exp(mean_x KL(p(y|x) || p(y))) over one split.
pub fn inception_score(probabilities: &ArrayView2<f64>) -> Result<f64> {
    let (n, c) = probabilities.dim();
    if n == 0 || c == 0 {
        return Err(Error::invalid("inception_score", "empty probability matrix"));
    }
    for (i, row) in probabilities.axis_iter(Axis(0)).enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid(
                "inception_score",
                format!("row {i} is not a probability vector (sum {sum})"),
            ));
        }
    }
    let marginal = probabilities.mean_axis(Axis(0)).unwrap();
    let mut kl_sum = 0.0;
    for row in probabilities.axis_iter(Axis(0)) {
        for (p, q) in row.iter().zip(marginal.iter()) {
            if *p > 0.0 {
                kl_sum += p * (p / q).ln();
            }
        }
    }
    Ok((kl_sum / n as f64).exp())
}

/// Draw one timestep uniformly; the same index serves both domains.
/// Inputs are (T, H, W) per domain; outputs are (H, W).
pub fn sample_eval_frame<R: Rng>(
    bf: &ArrayD<f64>,
    gfp: &ArrayD<f64>,
    rng: &mut R,
) -> Result<(ArrayD<f64>, ArrayD<f64>, usize)> {
    let t = bf.shape()[0];
    if t == 0 {
        return Err(Error::invalid("sample_eval_frame", "no timesteps"));
    }
    let idx = rng.gen_range(0..t);
    Ok((
        bf.index_axis(Axis(0), idx).to_owned(),
        gfp.index_axis(Axis(0), idx).to_owned(),
        idx,
    ))
}

/// Maps an image or image sequence to a fixed-length feature vector.
pub trait Embedder: Sync {
    fn feature_dim(&self) -> usize;
    fn embed_image(&self, image: &ArrayD<f64>) -> Result<Array1<f64>>;
    fn embed_sequence(&self, sequence: &ArrayD<f64>) -> Result<Array1<f64>> {
        // Default: embed each frame and average, which keeps sequence
        // embedding consistent with the frame embedding.
        let t = sequence.shape()[0];
        let mut acc = Array1::<f64>::zeros(self.feature_dim());
        for k in 0..t {
            acc = acc + self.embed_image(&sequence.index_axis(Axis(0), k).to_owned())?;
        }
        Ok(acc / t as f64)
    }
}

/// Flattens the raw pixels. Exact but high-dimensional; intended for tiny
/// resolutions and tests.
pub struct IdentityEmbedder {
    pub dim: usize,
}

impl Embedder for IdentityEmbedder {
    fn feature_dim(&self) -> usize {
        self.dim
    }
    fn embed_image(&self, image: &ArrayD<f64>) -> Result<Array1<f64>> {
        if image.len() != self.dim {
            return Err(Error::shape("IdentityEmbedder", format!("{}", self.dim), format!("{}", image.len())));
        }
        Ok(Array1::from_iter(image.iter().cloned()))
    }
}

/// A fixed seeded Gaussian random projection: cheap, deterministic and
/// distance-preserving in expectation.
pub struct RandomProjectionEmbedder {
    matrix: Array2<f64>, // (dim, input_len)
}

impl RandomProjectionEmbedder {
    pub fn new(seed: u64, input_len: usize, dim: usize) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input_len as f64).sqrt();
        let matrix = Array2::from_shape_simple_fn((dim, input_len), || {
            let x: f64 = StandardNormal.sample(&mut rng);
            x * scale
        });
        RandomProjectionEmbedder { matrix }
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn feature_dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn embed_image(&self, image: &ArrayD<f64>) -> Result<Array1<f64>> {
        if image.len() != self.matrix.ncols() {
            return Err(Error::shape(
                "RandomProjectionEmbedder",
                format!("{}", self.matrix.ncols()),
                format!("{}", image.len()),
            ));
        }
        let flat = Array1::from_iter(image.iter().cloned());
        Ok(self.matrix.dot(&flat))
    }
}

fn stats_of<F>(count: usize, dim: usize, embed: F) -> Result<FeatureGaussian>
where
    F: Fn(usize) -> Result<Array1<f64>> + Sync,
{
    let features = par::map_indices(count, |i| embed(i));
    let mut acc = RunningMoments::new(dim);
    for f in features {
        acc.push(&f?);
    }
    acc.finalize()
}

/// FID between two sets of single frames under the given embedder.
pub fn compute_fid(
    real_frames: &[ArrayD<f64>],
    fake_frames: &[ArrayD<f64>],
    embedder: &dyn Embedder,
) -> Result<f64> {
    let dim = embedder.feature_dim();
    let a = stats_of(real_frames.len(), dim, |i| embedder.embed_image(&real_frames[i]))?;
    let b = stats_of(fake_frames.len(), dim, |i| embedder.embed_image(&fake_frames[i]))?;
    frechet_distance(&a, &b)
}

/// FVD between two sets of (T, H, W) sequences under the given embedder.
pub fn compute_fvd(
    real_seqs: &[ArrayD<f64>],
    fake_seqs: &[ArrayD<f64>],
    embedder: &dyn Embedder,
) -> Result<f64> {
    let dim = embedder.feature_dim();
    let a = stats_of(real_seqs.len(), dim, |i| embedder.embed_sequence(&real_seqs[i]))?;
    let b = stats_of(fake_seqs.len(), dim, |i| embedder.embed_sequence(&fake_seqs[i]))?;
    frechet_distance(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_stats_hand_cases() {
        let f = array![[0.0, 0.0], [2.0, 2.0]];
        let g = gaussian_stats(&f.view()).unwrap();
        assert_eq!(g.mu, array![1.0, 1.0]);
        assert_eq!(g.sigma, array![[2.0, 2.0], [2.0, 2.0]]);

        let same = array![[3.0, 1.0], [3.0, 1.0], [3.0, 1.0]];
        let gs = gaussian_stats(&same.view()).unwrap();
        assert!(gs.sigma.iter().all(|&v| v == 0.0));

        let one_d = array![[-1.0], [1.0]];
        let g1 = gaussian_stats(&one_d.view()).unwrap();
        assert_eq!(g1.mu[0], 0.0);
        assert_eq!(g1.sigma[[0, 0]], 2.0);

        let single = array![[1.0, 2.0]];
        assert!(gaussian_stats(&single.view()).is_err());
    }

    #[test]
    fn running_moments_merge_matches_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Array1<f64>> = (0..40)
            .map(|_| Array1::from_shape_simple_fn(3, || StandardNormal.sample(&mut rng)))
            .collect();
        let mut whole = RunningMoments::new(3);
        for r in &rows {
            whole.push(r);
        }
        let mut a = RunningMoments::new(3);
        let mut b = RunningMoments::new(3);
        for r in &rows[..17] {
            a.push(r);
        }
        for r in &rows[17..] {
            b.push(r);
        }
        let merged = a.merge(&b);
        let gw = whole.finalize().unwrap();
        let gm = merged.finalize().unwrap();
        assert!((&gw.mu - &gm.mu).iter().all(|v| v.abs() < 1e-10));
        assert!((&gw.sigma - &gm.sigma).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn frechet_identity_is_zero() {
        let f = array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [0.5, 0.25]];
        let g = gaussian_stats(&f.view()).unwrap();
        let d = frechet_distance(&g, &g.clone()).unwrap();
        assert!(d.abs() < 1e-8);
    }

    #[test]
    fn frechet_one_dimensional_closed_forms() {
        let a = FeatureGaussian { mu: array![0.0], sigma: array![[1.0]], n: 10 };
        let b = FeatureGaussian { mu: array![1.0], sigma: array![[1.0]], n: 10 };
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-10);

        let c = FeatureGaussian { mu: array![0.0], sigma: array![[4.0]], n: 10 };
        // (sigma_a - sigma_c)^2 = (1 - 2)^2 = 1
        assert!((frechet_distance(&a, &c).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn frechet_is_symmetric_and_rejects_dim_mismatch() {
        let a = FeatureGaussian { mu: array![0.0, 1.0], sigma: array![[2.0, 0.3], [0.3, 1.0]], n: 5 };
        let b = FeatureGaussian { mu: array![1.0, -1.0], sigma: array![[1.0, 0.1], [0.1, 3.0]], n: 5 };
        let d1 = frechet_distance(&a, &b).unwrap();
        let d2 = frechet_distance(&b, &a).unwrap();
        assert!((d1 - d2).abs() < 1e-8);
        assert!(d1 >= 0.0);
        let c = FeatureGaussian { mu: array![0.0], sigma: array![[1.0]], n: 5 };
        assert!(frechet_distance(&a, &c).is_err());
    }

    #[test]
    fn frechet_rejects_strongly_non_psd() {
        let a = FeatureGaussian { mu: array![0.0], sigma: array![[-0.5]], n: 5 };
        let b = FeatureGaussian { mu: array![0.0], sigma: array![[1.0]], n: 5 };
        assert!(frechet_distance(&a, &b).is_err());
    }

    #[test]
    fn inception_score_hand_cases() {
        let uniform = Array2::from_elem((6, 4), 0.25);
        assert!((inception_score(&uniform.view()).unwrap() - 1.0).abs() < 1e-12);

        let onehot = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        assert!((inception_score(&onehot.view()).unwrap() - 4.0).abs() < 1e-10);

        let single = array![[1.0, 0.0, 0.0]];
        assert!((inception_score(&single.view()).unwrap() - 1.0).abs() < 1e-12);

        let bad = array![[0.5, 0.2]];
        assert!(inception_score(&bad.view()).is_err());
    }

    #[test]
    fn inception_score_bounds_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Array2::<f64>::zeros((10, 5));
        for mut r in rows.axis_iter_mut(Axis(0)) {
            let mut v: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            for (i, x) in v.iter().enumerate() {
                r[i] = *x;
            }
        }
        let is = inception_score(&rows.view()).unwrap();
        assert!((1.0..=5.0).contains(&is));
        let mut perm = rows.clone();
        let tmp = perm.row(0).to_owned();
        let last = perm.row(9).to_owned();
        perm.row_mut(0).assign(&last);
        perm.row_mut(9).assign(&tmp);
        let is2 = inception_score(&perm.view()).unwrap();
        assert!((is - is2).abs() < 1e-12);
    }

    #[test]
    fn eval_frame_sampling_is_uniform_and_shared() {
        let bf = ArrayD::from_shape_fn(IxDyn(&[3, 2, 2]), |ix| ix[0] as f64);
        let gfp = bf.clone() + 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let (fb, fg, idx) = sample_eval_frame(&bf, &gfp, &mut rng).unwrap();
            counts[idx] += 1;
            assert_eq!(fb[[0, 0]] as usize, idx);
            assert_eq!(fg[[0, 0]] as usize, idx + 10);
        }
        // 3 sigma binomial bound around n/3
        let sd = f64::sqrt(10_000.0 * (1.0 / 3.0) * (2.0 / 3.0));
        for &c in &counts {
            assert!((c as f64 - 10_000.0 / 3.0).abs() < 3.0 * sd, "counts: {counts:?}");
        }

        let single = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 2]));
        let (_, _, idx) = sample_eval_frame(&single, &single, &mut rng).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<ArrayD<f64>> = (0..8)
            .map(|_| crate::nn::randn(&mut rng, &[4, 4], 1.0))
            .collect();
        let emb = IdentityEmbedder { dim: 16 };
        let d = compute_fid(&frames, &frames, &emb).unwrap();
        assert!(d.abs() < 1e-6, "fid {d}");
        let proj = RandomProjectionEmbedder::new(0, 16, 4);
        let d2 = compute_fid(&frames, &frames, &proj).unwrap();
        assert!(d2.abs() < 1e-6);
    }

    #[test]
    fn fid_monte_carlo_matches_closed_form() {
        // 1-D Gaussians: N(0,1) vs N(1,1) has Frechet distance 1.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400_000;
        let a: Vec<ArrayD<f64>> = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                ArrayD::from_elem(IxDyn(&[1]), v)
            })
            .collect();
        let b: Vec<ArrayD<f64>> = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                ArrayD::from_elem(IxDyn(&[1]), v + 1.0)
            })
            .collect();
        let emb = IdentityEmbedder { dim: 1 };
        let d = compute_fid(&a, &b, &emb).unwrap();
        assert!((d - 1.0).abs() < 0.01, "fid {d}");
    }

    #[test]
    fn fid_invariant_under_sample_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let real: Vec<ArrayD<f64>> = (0..10).map(|_| crate::nn::randn(&mut rng, &[3], 1.0)).collect();
        let fake: Vec<ArrayD<f64>> = (0..10).map(|_| crate::nn::randn(&mut rng, &[3], 1.0)).collect();
        let emb = IdentityEmbedder { dim: 3 };
        let d1 = compute_fid(&real, &fake, &emb).unwrap();
        let mut shuffled = real.clone();
        shuffled.reverse();
        let d2 = compute_fid(&shuffled, &fake, &emb).unwrap();
        assert!((d1 - d2).abs() < 1e-9);
    }

    #[test]
    fn fvd_of_identical_sequence_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seqs: Vec<ArrayD<f64>> = (0..6)
            .map(|_| crate::nn::randn(&mut rng, &[3, 2, 2], 1.0))
            .collect();
        let emb = RandomProjectionEmbedder::new(1, 4, 3);
        let d = compute_fvd(&seqs, &seqs, &emb).unwrap();
        assert!(d.abs() < 1e-6);
    }
}
