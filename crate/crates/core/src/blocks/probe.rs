use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Sums features over channels and marks pixels strictly above the spatial
/// median of that sum (mean of the two middle values for even counts).
/// Returns a `[B, 1, H, W]` map of zeros and ones.
pub fn median_binarize<T: Real>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = features.dims4()?;
    let hw = h * w;
    let x = features.data();
    let mut out = vec![T::zero(); b * hw];
    for bi in 0..b {
        let mut summed = vec![T::zero(); hw];
        for ch in 0..c {
            let plane = &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
            summed.iter_mut().zip(plane).for_each(|(s, &v)| *s += v);
        }
        let mut sorted = summed.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let median = if hw % 2 == 1 {
            sorted[hw / 2]
        } else {
            (sorted[hw / 2 - 1] + sorted[hw / 2]) / T::lit(2.0)
        };
        for (o, &s) in out[bi * hw..(bi + 1) * hw].iter_mut().zip(&summed) {
            *o = if s > median { T::one() } else { T::zero() };
        }
    }
    Tensor::new(&[b, 1, h, w], out)
}
