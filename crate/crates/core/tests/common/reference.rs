//! Frozen metric references computed with scikit-image.

#![allow(dead_code)]

use pptformer::Tensor;

use super::oracle::Lcg;

/// `(h, w, ssim, psnr)` from scikit-image 0.25 (`structural_similarity` with
/// Gaussian weights, sigma 1.5, population covariance, data range 1;
/// `peak_signal_noise_ratio` with data range 1) on the pairs of [`pair`].
pub const REFERENCE: [(usize, usize, f64, f64); 20] = [
    (32, 32, 9.88856126064270979e-01, 2.78923778524877548e+01),
    (18, 24, 9.80178873856070942e-01, 2.45998436637629752e+01),
    (25, 37, 9.61200017926612693e-01, 2.25381429771424351e+01),
    (32, 20, 9.37754168894087248e-01, 2.09384517765157057e+01),
    (39, 33, 9.08434563220117841e-01, 1.93416092310954753e+01),
    (16, 16, 8.64290313544315736e-01, 1.74183529731456979e+01),
    (23, 29, 8.22874195345577264e-01, 1.65129805824645501e+01),
    (30, 12, 7.54034704171747228e-01, 1.58185971645753547e+01),
    (37, 25, 7.49781696622883853e-01, 1.50510756208196348e+01),
    (14, 38, 6.56747493346032551e-01, 1.42841881566670441e+01),
    (21, 21, 6.61738868438885741e-01, 1.39312018301996581e+01),
    (28, 34, 5.60702101901931815e-01, 1.29696509508454501e+01),
    (35, 17, 5.53335809855572180e-01, 1.20258441995384686e+01),
    (12, 30, 4.58589078282322204e-01, 1.17062703891444855e+01),
    (19, 13, 2.90535719715615037e-01, 1.09193494273066989e+01),
    (26, 26, 3.09399558257908047e-01, 1.03486164200131210e+01),
    (33, 39, 2.71069591362450846e-01, 9.96698300064118392e+00),
    (40, 22, 2.29438011102338524e-01, 9.69753539857448743e+00),
    (17, 35, 1.97858487058190674e-01, 9.38480164468620970e+00),
    (24, 18, 1.98599808058140148e-01, 9.17185244570862146e+00),
];

pub fn pair(i: usize) -> (Tensor<f64>, Tensor<f64>) {
    let (h, w, _, _) = REFERENCE[i];
    let mut lcg = Lcg(1000 + i as u64);
    let t = lcg.tensor(&[1, 1, h, w]);
    let n = lcg.tensor(&[1, 1, h, w]);
    let mix = 0.1 + 0.8 * (i as f64 / 19.0);
    let p = Tensor::from_fn(&[1, 1, h, w], |k| (1.0 - mix) * t.data()[k] + mix * n.data()[k]);
    (p, t)
}
