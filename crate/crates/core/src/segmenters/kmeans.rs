use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::argmin;
use crate::error::{Error, Result};
use crate::par;
use crate::seqcore::FrameSequence;

/// `C x D` centroid matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Array2<f64>,
}

impl Codebook {
    pub fn new(centroids: Array2<f64>) -> Result<Self> {
        if centroids.nrows() == 0 || centroids.ncols() == 0 {
            return Err(Error::EmptySequence);
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroids".into()));
        }
        Ok(Self {
            centroids: centroids.as_standard_layout().into_owned(),
        })
    }

    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    pub fn num_codes(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance for every point, in order.
fn assign(points: &Array2<f64>, centroids: &Array2<f64>) -> Vec<(usize, f64)> {
    par::map_range(points.nrows(), |i| {
        argmin(centroids.outer_iter().map(|c| sq_dist(points.row(i), c)))
    })
}

/// Lloyd's algorithm from `num_codes` distinct points drawn uniformly with
/// `seed`. Clusters that lose all points are moved to the points farthest
/// from their current centroid.
pub fn kmeans_fit(features: &[FrameSequence], num_codes: usize, seed: u64, iters: usize) -> Result<Codebook> {
    let total: usize = features.iter().map(FrameSequence::len).sum();
    if num_codes == 0 {
        return Err(Error::InvalidArgument("number of codes must be positive".into()));
    }
    if num_codes > total {
        return Err(Error::InvalidArgument(format!(
            "{num_codes} codes requested from {total} frames"
        )));
    }
    let dim = features[0].dim();
    if features.iter().any(|f| f.dim() != dim) {
        return Err(Error::ShapeMismatch("feature sequences differ in dimension".into()));
    }
    let views: Vec<_> = features.iter().map(|f| f.data().view()).collect();
    let points = ndarray::concatenate(Axis(0), &views).expect("equal widths");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = sample(&mut rng, total, num_codes).into_vec();
    init.sort_unstable();
    let mut centroids = points.select(Axis(0), &init);
    let mut prev: Option<Vec<usize>> = None;

    for _ in 0..iters.max(1) {
        let assigned = assign(&points, &centroids);
        let codes: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let mut sums = Array2::<f64>::zeros((num_codes, dim));
        let mut counts = vec![0usize; num_codes];
        for (i, &c) in codes.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &points.row(i));
            counts[c] += 1;
        }
        // farthest points first, lowest index on ties
        let mut far: Vec<usize> = (0..total).collect();
        far.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
        let mut far = far.into_iter();
        for c in 0..num_codes {
            if counts[c] == 0 {
                let p = far.next().expect("num_codes <= total");
                centroids.row_mut(c).assign(&points.row(p));
            } else {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        if prev.as_ref() == Some(&codes) {
            break;
        }
        prev = Some(codes);
    }
    Codebook::new(centroids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud(center: (f64, f64), n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| vec![center.0 + rng.random_range(-0.5..0.5), center.1 + rng.random_range(-0.5..0.5)])
            .collect()
    }

    #[test]
    fn separated_clouds_give_cloud_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = cloud((0.0, 0.0), 40, &mut rng);
        let b = cloud((20.0, 10.0), 30, &mut rng);
        let mean = |pts: &[Vec<f64>]| -> Vec<f64> {
            let n = pts.len() as f64;
            vec![pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n]
        };
        let (ma, mb) = (mean(&a), mean(&b));
        let seqs = vec![
            FrameSequence::from_rows(&a, 20.0).unwrap(),
            FrameSequence::from_rows(&b, 20.0).unwrap(),
        ];
        for seed in 0..5 {
            let cb = kmeans_fit(&seqs, 2, seed, 50).unwrap();
            let mut found: Vec<Vec<f64>> = cb.centroids().outer_iter().map(|r| r.to_vec()).collect();
            found.sort_by(|x, y| x[0].total_cmp(&y[0]));
            for (got, want) in found.iter().zip([&ma, &mb]) {
                assert!((got[0] - want[0]).abs() < 1e-9 && (got[1] - want[1]).abs() < 1e-9, "seed {seed}");
            }
        }
    }

    #[test]
    fn single_code_is_global_mean() {
        let x = FrameSequence::from_rows(&[vec![1.0], vec![2.0], vec![6.0]], 20.0).unwrap();
        let cb = kmeans_fit(&[x], 1, 0, 10).unwrap();
        assert!((cb.centroids()[[0, 0]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random(), rng.random()]).collect();
        let x = FrameSequence::from_rows(&pts, 20.0).unwrap();
        let a = kmeans_fit(std::slice::from_ref(&x), 4, 9, 20).unwrap();
        let b = kmeans_fit(std::slice::from_ref(&x), 4, 9, 20).unwrap();
        assert_eq!(a, b);
        assert!(kmeans_fit(&[x], 51, 0, 5).is_err());
    }
}
