//! Separable 2-D discrete wavelet transform with periodic boundaries.
//!
//! One level: filter rows (lowpass and highpass, downsample by two), then
//! columns, giving four half-size subbands. Odd dimensions are zero-padded to
//! even before analysis; the pad row/column is invisible after cropping the
//! reconstruction. Because the banks are orthonormal, the inverse transform
//! is the exact adjoint of the forward one, which is also what backprop needs
//! to push coefficient gradients back to the image.

use crate::error::{Error, Result};
use crate::filters::{alternating_flip, FilterGradients, FilterPair, FILTER_LEN};

/// Dense row-major 2-D array of coefficients or pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn zeros(height: usize, width: usize) -> Plane {
        Plane {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Plane> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Plane {
        let mut p = Plane::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                p.data[y * width + x] = f(y, x);
            }
        }
        p
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    /// Sum of squares; orthonormal analysis preserves this exactly.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn padded_to_even(&self) -> Plane {
        let (h, w) = (self.height + self.height % 2, self.width + self.width % 2);
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        let mut out = Plane::zeros(h, w);
        for y in 0..self.height {
            let src = &self.data[y * self.width..(y + 1) * self.width];
            out.data[y * w..y * w + self.width].copy_from_slice(src);
        }
        out
    }

    fn cropped(&self, height: usize, width: usize) -> Plane {
        let mut out = Plane::zeros(height, width);
        for y in 0..height {
            let src = &self.data[y * self.width..y * self.width + width];
            out.data[y * width..(y + 1) * width].copy_from_slice(src);
        }
        out
    }
}

/// The four half-resolution outputs of one transform level.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands {
    pub approx: Plane,
    pub horiz: Plane,
    pub vert: Plane,
    pub diag: Plane,
}

impl Subbands {
    /// Bands in their canonical order: approx, horizontal, vertical, diagonal.
    pub fn bands(&self) -> [&Plane; 4] {
        [&self.approx, &self.horiz, &self.vert, &self.diag]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.approx.height, self.approx.width)
    }

    pub fn energy(&self) -> f64 {
        self.bands().iter().map(|b| b.energy()).sum()
    }

    fn check_consistent(&self) -> Result<()> {
        let (h, w) = self.dims();
        if h == 0 || w == 0 {
            return Err(Error::Dimension("subbands are empty".into()));
        }
        for band in self.bands() {
            if (band.height, band.width) != (h, w) {
                return Err(Error::Dimension(format!(
                    "subband {}x{} disagrees with approx {h}x{w}",
                    band.height, band.width
                )));
            }
        }
        Ok(())
    }
}

/// Output size after one analysis level: ceil(n / 2) in each direction.
pub fn half_up(n: usize) -> usize {
    n.div_ceil(2)
}

/// Convolve each row with `f` circularly and keep every second sample.
/// Output column k reads inputs 2k .. 2k+5 (mod width); width must be even.
fn analyze_rows(p: &Plane, f: &[f64; FILTER_LEN]) -> Plane {
    let (h, w) = (p.height, p.width);
    let half = w / 2;
    let mut out = Plane::zeros(h, half);
    for y in 0..h {
        let row = &p.data[y * w..(y + 1) * w];
        for k in 0..half {
            let mut acc = 0.0;
            for (i, fi) in f.iter().enumerate() {
                acc += fi * row[(2 * k + i) % w];
            }
            out.data[y * half + k] = acc;
        }
    }
    out
}

/// Column counterpart of `analyze_rows`; height must be even.
fn analyze_cols(p: &Plane, f: &[f64; FILTER_LEN]) -> Plane {
    let (h, w) = (p.height, p.width);
    let half = h / 2;
    let mut out = Plane::zeros(half, w);
    for k in 0..half {
        for (i, fi) in f.iter().enumerate() {
            let src = ((2 * k + i) % h) * w;
            let dst = k * w;
            for x in 0..w {
                out.data[dst + x] += fi * p.data[src + x];
            }
        }
    }
    out
}

/// Adjoint of `analyze_rows`: scatter each coefficient back over the six
/// input columns it read from.
fn synth_rows(c: &Plane, f: &[f64; FILTER_LEN], out_w: usize) -> Plane {
    let (h, half) = (c.height, c.width);
    let mut out = Plane::zeros(h, out_w);
    for y in 0..h {
        for k in 0..half {
            let v = c.data[y * half + k];
            for (i, fi) in f.iter().enumerate() {
                out.data[y * out_w + (2 * k + i) % out_w] += fi * v;
            }
        }
    }
    out
}

fn synth_cols(c: &Plane, f: &[f64; FILTER_LEN], out_h: usize) -> Plane {
    let (half, w) = (c.height, c.width);
    let mut out = Plane::zeros(out_h, w);
    for k in 0..half {
        for (i, fi) in f.iter().enumerate() {
            let dst = ((2 * k + i) % out_h) * w;
            let src = k * w;
            for x in 0..w {
                out.data[dst + x] += fi * c.data[src + x];
            }
        }
    }
    out
}

fn add_into(acc: &mut Plane, other: &Plane) {
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
}

fn band_dot(a: &Plane, b: &Plane) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Analysis of an already even-sized plane with an arbitrary pair of banks
/// for the row and column passes. The learnable-angle gradient needs the
/// mixed cases where only one pass uses the derivative filters.
fn forward_even(
    p: &Plane,
    row: &FilterPair,
    col: &FilterPair,
) -> Subbands {
    let lo = analyze_rows(p, &row.lowpass);
    let hi = analyze_rows(p, &row.highpass);
    Subbands {
        approx: analyze_cols(&lo, &col.lowpass),
        horiz: analyze_cols(&lo, &col.highpass),
        vert: analyze_cols(&hi, &col.lowpass),
        diag: analyze_cols(&hi, &col.highpass),
    }
}

/// One analysis level. Odd input dimensions are zero-padded to even first,
/// so the output is always ceil(h/2) x ceil(w/2).
pub fn dwt2_forward(plane: &Plane, filters: &FilterPair) -> Result<Subbands> {
    if plane.is_empty() {
        return Err(Error::Dimension("cannot transform an empty plane".into()));
    }
    let padded = plane.padded_to_even();
    Ok(forward_even(&padded, filters, filters))
}

/// Exact inverse of `dwt2_forward` on the padded grid. The caller crops the
/// result back to the original size if the input had odd dimensions.
pub fn dwt2_inverse(sub: &Subbands, filters: &FilterPair) -> Result<Plane> {
    sub.check_consistent()?;
    let (sh, sw) = sub.dims();
    let (h, w) = (2 * sh, 2 * sw);

    let mut lo = synth_cols(&sub.approx, &filters.lowpass, h);
    add_into(&mut lo, &synth_cols(&sub.horiz, &filters.highpass, h));
    let mut hi = synth_cols(&sub.vert, &filters.lowpass, h);
    add_into(&mut hi, &synth_cols(&sub.diag, &filters.highpass, h));

    let mut out = synth_rows(&lo, &filters.lowpass, w);
    add_into(&mut out, &synth_rows(&hi, &filters.highpass, w));
    Ok(out)
}

/// Backpropagate one level: map a gradient with respect to the four subbands
/// to (gradient wrt the input plane, gradient wrt alpha, gradient wrt beta).
///
/// The input gradient is the adjoint (= inverse) transform of the coefficient
/// gradient, cropped to the original size. The angle gradients contract the
/// coefficient gradient against the derivative of the analysis map, which by
/// the product rule is the sum of one pass with derivative filters and one
/// with the ordinary ones.
pub fn dwt2_backward(
    grad_out: &Subbands,
    input: &Plane,
    filters: &FilterPair,
    fgrads: &FilterGradients,
) -> Result<(Plane, f64, f64)> {
    grad_out.check_consistent()?;
    if input.is_empty() {
        return Err(Error::Dimension("cannot backpropagate into an empty plane".into()));
    }
    let expect = (half_up(input.height), half_up(input.width));
    if grad_out.dims() != expect {
        return Err(Error::Dimension(format!(
            "coefficient gradient is {:?}, but a {}x{} input produces {:?}",
            grad_out.dims(),
            input.height,
            input.width,
            expect
        )));
    }

    let grad_in = dwt2_inverse(grad_out, filters)?.cropped(input.height, input.width);

    let padded = input.padded_to_even();
    let mut angle_grads = [0.0; 2];
    for (slot, d_low) in [(0, &fgrads.d_alpha), (1, &fgrads.d_beta)] {
        let d_pair = FilterPair {
            lowpass: *d_low,
            highpass: alternating_flip(d_low),
        };
        // d(col o row) = d_col o row + col o d_row
        let left = forward_even(&padded, filters, &d_pair);
        let right = forward_even(&padded, &d_pair, filters);
        let mut acc = 0.0;
        for (g, (l, r)) in grad_out
            .bands()
            .iter()
            .zip(left.bands().iter().zip(right.bands().iter()))
        {
            acc += band_dot(g, l) + band_dot(g, r);
        }
        angle_grads[slot] = acc;
    }

    Ok((grad_in, angle_grads[0], angle_grads[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{make_filters, WaveletParams};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank(alpha: f64, beta: f64) -> FilterPair {
        make_filters(WaveletParams { alpha, beta }).unwrap()
    }

    fn random_plane(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Plane {
        Plane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn haar_on_two_by_two_matches_hand_computation() {
        let sub = dwt2_forward(
            &Plane::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            &bank(0.0, 0.0),
        )
        .unwrap();
        assert_eq!(sub.dims(), (1, 1));
        assert_abs_diff_eq!(sub.approx.at(0, 0), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sub.horiz.at(0, 0), -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sub.vert.at(0, 0), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sub.diag.at(0, 0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_plane_concentrates_in_approx() {
        let sub = dwt2_forward(&Plane::from_fn(8, 8, |_, _| 3.0), &bank(1.2, -0.4)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_abs_diff_eq!(sub.approx.at(y, x), 6.0, epsilon = 1e-12);
                assert_abs_diff_eq!(sub.horiz.at(y, x), 0.0, epsilon = 1e-12);
                assert_abs_diff_eq!(sub.vert.at(y, x), 0.0, epsilon = 1e-12);
                assert_abs_diff_eq!(sub.diag.at(y, x), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn odd_sizes_pad_then_crop_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(h, w) in &[(7, 9), (1, 1), (5, 4), (3, 3), (28, 28)] {
            let x = random_plane(h, w, &mut rng);
            let f = bank(rng.random_range(0.0..6.28), rng.random_range(0.0..6.28));
            let sub = dwt2_forward(&x, &f).unwrap();
            assert_eq!(sub.dims(), (half_up(h), half_up(w)));
            let back = dwt2_inverse(&sub, &f).unwrap().cropped(h, w);
            for (a, b) in back.data().iter().zip(x.data()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn empty_and_mismatched_shapes_are_rejected() {
        let f = bank(0.3, 0.9);
        assert!(matches!(
            dwt2_forward(&Plane::zeros(0, 4), &f),
            Err(Error::Dimension(_))
        ));
        let mut sub = dwt2_forward(&Plane::zeros(8, 8), &f).unwrap();
        sub.diag = Plane::zeros(2, 4);
        assert!(matches!(dwt2_inverse(&sub, &f), Err(Error::Dimension(_))));

        let good = dwt2_forward(&Plane::zeros(8, 8), &f).unwrap();
        let g = crate::filters::filter_gradients(WaveletParams { alpha: 0.3, beta: 0.9 }).unwrap();
        assert!(matches!(
            dwt2_backward(&good, &Plane::zeros(10, 8), &f, &g),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_angle_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(h, w) in &[(6, 6), (7, 5)] {
            let x = random_plane(h, w, &mut rng);
            let (a, b) = (rng.random_range(0.0..6.28), rng.random_range(0.0..6.28));
            // Random linear functional of the coefficients as the "loss".
            let weights = dwt2_forward(&x, &bank(a, b)).map(|s| Subbands {
                approx: random_plane(s.approx.height(), s.approx.width(), &mut rng),
                horiz: random_plane(s.horiz.height(), s.horiz.width(), &mut rng),
                vert: random_plane(s.vert.height(), s.vert.width(), &mut rng),
                diag: random_plane(s.diag.height(), s.diag.width(), &mut rng),
            })
            .unwrap();
            let loss = |a: f64, b: f64| -> f64 {
                let s = dwt2_forward(&x, &bank(a, b)).unwrap();
                s.bands()
                    .iter()
                    .zip(weights.bands())
                    .map(|(band, wts)| band_dot(band, wts))
                    .sum()
            };

            let params = WaveletParams { alpha: a, beta: b };
            let g = crate::filters::filter_gradients(params).unwrap();
            let (grad_in, ga, gb) =
                dwt2_backward(&weights, &x, &bank(a, b), &g).unwrap();

            let eps = 1e-6;
            let fd_a = (loss(a + eps, b) - loss(a - eps, b)) / (2.0 * eps);
            let fd_b = (loss(a, b + eps) - loss(a, b - eps)) / (2.0 * eps);
            assert_abs_diff_eq!(ga, fd_a, epsilon = 1e-6);
            assert_abs_diff_eq!(gb, fd_b, epsilon = 1e-6);

            // Spot-check a few input pixels the same way.
            for &(y, xx) in &[(0, 0), (h / 2, w / 2), (h - 1, w - 1)] {
                let mut plus = x.clone();
                plus.set(y, xx, x.at(y, xx) + eps);
                let mut minus = x.clone();
                minus.set(y, xx, x.at(y, xx) - eps);
                let lp = {
                    let s = dwt2_forward(&plus, &bank(a, b)).unwrap();
                    s.bands().iter().zip(weights.bands()).map(|(s, w)| band_dot(s, w)).sum::<f64>()
                };
                let lm = {
                    let s = dwt2_forward(&minus, &bank(a, b)).unwrap();
                    s.bands().iter().zip(weights.bands()).map(|(s, w)| band_dot(s, w)).sum::<f64>()
                };
                assert_abs_diff_eq!(grad_in.at(y, xx), (lp - lm) / (2.0 * eps), epsilon = 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Round trip is exact and energy is conserved for any angles.
        #[test]
        fn reconstruction_is_perfect(
            a in -7.0..7.0f64,
            b in -7.0..7.0f64,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_plane(16, 16, &mut rng);
            let f = bank(a, b);
            let sub = dwt2_forward(&x, &f).unwrap();
            let back = dwt2_inverse(&sub, &f).unwrap();
            let max_err = x
                .data()
                .iter()
                .zip(back.data())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0f64, f64::max);
            prop_assert!(max_err < 1e-10, "max abs error {max_err:e}");
            let ratio = sub.energy() / x.energy();
            prop_assert!((ratio - 1.0).abs() < 1e-10, "energy ratio {ratio}");
        }

        /// The inverse is the adjoint of the forward map, which is the fact
        /// the backward pass relies on.
        #[test]
        fn inverse_is_adjoint_of_forward(a in -7.0..7.0f64, b in -7.0..7.0f64, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = bank(a, b);
            let x = random_plane(10, 10, &mut rng);
            let y = Subbands {
                approx: random_plane(5, 5, &mut rng),
                horiz: random_plane(5, 5, &mut rng),
                vert: random_plane(5, 5, &mut rng),
                diag: random_plane(5, 5, &mut rng),
            };
            let fx = dwt2_forward(&x, &f).unwrap();
            let fwd_side: f64 = fx.bands().iter().zip(y.bands()).map(|(p, q)| band_dot(p, q)).sum();
            let adj_side = band_dot(&dwt2_inverse(&y, &f).unwrap(), &x);
            prop_assert!((fwd_side - adj_side).abs() < 1e-10);
        }
    }
}
