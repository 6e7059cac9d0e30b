//! Discrete Fourier analysis of feature maps.
//!
//! Forward transforms are unnormalized; inverse transforms carry the `1/N`
//! factor. Power-of-two lengths run an iterative radix-2 Cooley–Tukey
//! kernel, every other length is reduced to a power-of-two circular
//! convolution with Bluestein's chirp-z identity. Spectra are uncentered
//! (DC at index 0).

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Complex 2D spectrum of an `height × width` map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    coefficients: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(height: usize, width: usize, coefficients: Vec<Complex64>) -> Result<Self> {
        if height == 0 || width == 0 || coefficients.len() != height * width {
            return Err(Error::shape(format!(
                "spectrum {height}×{width} needs {} coefficients, got {}",
                height * width,
                coefficients.len()
            )));
        }
        Ok(Self {
            height,
            width,
            coefficients,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [Complex64] {
        &mut self.coefficients
    }

    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        self.coefficients[u * self.width + v]
    }

    /// Index of the conjugate-mirror bin `((−u) mod h, (−v) mod w)`.
    pub fn mirror(&self, u: usize, v: usize) -> (usize, usize) {
        mirror_index(self.height, self.width, u, v)
    }

    /// Largest deviation from `X(u,v) = conj(X(−u,−v))`.
    pub fn hermitian_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for u in 0..self.height {
            for v in 0..self.width {
                let (mu, mv) = self.mirror(u, v);
                worst = worst.max((self.get(u, v) - self.get(mu, mv).conj()).norm());
            }
        }
        worst
    }

    /// Projects onto the Hermitian subspace: `(X + conj(mirror X)) / 2`.
    pub fn hermitian_project(&self) -> Spectrum {
        let mut out = self.coefficients.clone();
        for u in 0..self.height {
            for v in 0..self.width {
                let (mu, mv) = self.mirror(u, v);
                out[u * self.width + v] = (self.get(u, v) + self.get(mu, mv).conj()) * 0.5;
            }
        }
        Spectrum {
            height: self.height,
            width: self.width,
            coefficients: out,
        }
    }
}

fn mirror_index(h: usize, w: usize, u: usize, v: usize) -> (usize, usize) {
    ((h - u) % h, (w - v) % w)
}

/// Textbook `O(N²)` DFT. Reference oracle for the fast paths.
pub fn dft_naive(signal: &[f64]) -> Result<Vec<Complex64>> {
    if signal.is_empty() {
        return Err(Error::Data("empty signal".into()));
    }
    let complex: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    Ok(dft_naive_complex(&complex, false))
}

/// Naive forward (or, with `inverse`, normalized inverse) DFT of a complex
/// sequence.
pub fn dft_naive_complex(signal: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = signal.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = if inverse { 1.0 / n as f64 } else { 1.0 };
    (0..n)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, &x) in signal.iter().enumerate() {
                // reduce k*j mod n first so the angle stays small
                let phase = sign * 2.0 * PI * ((k * j) % n) as f64 / n as f64;
                acc += x * Complex64::from_polar(1.0, phase);
            }
            acc * scale
        })
        .collect()
}

/// Precomputed transform of a fixed length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    len: usize,
    kind: PlanKind,
}

#[derive(Debug, Clone)]
enum PlanKind {
    Radix2(Radix2),
    Bluestein(Box<Bluestein>),
}

#[derive(Debug, Clone)]
struct Radix2 {
    len: usize,
    // forward twiddles exp(-2πik/n), k < n/2
    twiddles: Vec<Complex64>,
    bit_reverse: Vec<usize>,
}

impl Radix2 {
    fn new(len: usize) -> Self {
        debug_assert!(len.is_power_of_two());
        let bits = len.trailing_zeros();
        let bit_reverse = (0..len)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        let twiddles = (0..len / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / len as f64))
            .collect();
        Self {
            len,
            twiddles,
            bit_reverse,
        }
    }

    /// In-place unnormalized transform; `inverse` flips the twiddle sign.
    fn process(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.len;
        for i in 0..n {
            let j = self.bit_reverse[i];
            if i < j {
                data.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let mut tw = self.twiddles[k * stride];
                    if inverse {
                        tw = tw.conj();
                    }
                    let a = data[start + k];
                    let b = data[start + k + half] * tw;
                    data[start + k] = a + b;
                    data[start + k + half] = a - b;
                }
            }
            size *= 2;
        }
    }
}

#[derive(Debug, Clone)]
struct Bluestein {
    inner: Radix2,
    // w_k = exp(-iπk²/n)
    chirp: Vec<Complex64>,
    // FFT of the conjugate chirp laid out as a circular filter
    filter_spectrum: Vec<Complex64>,
}

impl Bluestein {
    fn new(len: usize) -> Self {
        let m = (2 * len - 1).next_power_of_two();
        let inner = Radix2::new(m);
        let chirp: Vec<Complex64> = (0..len)
            .map(|k| {
                // k² mod 2n keeps the angle argument exact for large k
                let k2 = (k as u128 * k as u128 % (2 * len as u128)) as f64;
                Complex64::from_polar(1.0, -PI * k2 / len as f64)
            })
            .collect();
        let mut filter = vec![Complex64::new(0.0, 0.0); m];
        filter[0] = chirp[0].conj();
        for k in 1..len {
            filter[k] = chirp[k].conj();
            filter[m - k] = chirp[k].conj();
        }
        inner.process(&mut filter, false);
        Self {
            inner,
            chirp,
            filter_spectrum: filter,
        }
    }

    fn process(&self, data: &mut [Complex64], inverse: bool) {
        let n = data.len();
        let m = self.inner.len;
        // The inverse transform is conj(F(conj(x))).
        let mut work = vec![Complex64::new(0.0, 0.0); m];
        for k in 0..n {
            let x = if inverse { data[k].conj() } else { data[k] };
            work[k] = x * self.chirp[k];
        }
        self.inner.process(&mut work, false);
        for (w, f) in work.iter_mut().zip(&self.filter_spectrum) {
            *w *= f;
        }
        self.inner.process(&mut work, true);
        let scale = 1.0 / m as f64;
        for k in 0..n {
            let y = work[k] * scale * self.chirp[k];
            data[k] = if inverse { y.conj() } else { y };
        }
    }
}

impl FftPlan {
    pub fn new(len: usize) -> Self {
        assert!(len > 0, "FFT length must be positive");
        let kind = if len.is_power_of_two() {
            PlanKind::Radix2(Radix2::new(len))
        } else {
            PlanKind::Bluestein(Box::new(Bluestein::new(len)))
        };
        Self { len, kind }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.len, "buffer length does not match plan");
        match &self.kind {
            PlanKind::Radix2(r) => r.process(data, false),
            PlanKind::Bluestein(b) => b.process(data, false),
        }
    }

    /// Inverse transform in place, including the `1/N` factor.
    pub fn inverse(&self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.len, "buffer length does not match plan");
        match &self.kind {
            PlanKind::Radix2(r) => r.process(data, true),
            PlanKind::Bluestein(b) => b.process(data, true),
        }
        let scale = 1.0 / self.len as f64;
        for x in data.iter_mut() {
            *x *= scale;
        }
    }
}

fn check_nonempty(len: usize) -> Result<()> {
    if len == 0 {
        Err(Error::Data("empty signal".into()))
    } else {
        Ok(())
    }
}

pub fn fft1d(signal: &[Complex64]) -> Result<Vec<Complex64>> {
    check_nonempty(signal.len())?;
    let mut out = signal.to_vec();
    FftPlan::new(signal.len()).forward(&mut out);
    Ok(out)
}

pub fn ifft1d(spectrum: &[Complex64]) -> Result<Vec<Complex64>> {
    check_nonempty(spectrum.len())?;
    let mut out = spectrum.to_vec();
    FftPlan::new(spectrum.len()).inverse(&mut out);
    Ok(out)
}

/// Row and column plans for repeated transforms of one map size.
#[derive(Debug, Clone)]
pub struct Fft2dPlan {
    rows: FftPlan,
    cols: FftPlan,
}

impl Fft2dPlan {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            rows: FftPlan::new(width),
            cols: FftPlan::new(height),
        }
    }

    pub fn height(&self) -> usize {
        self.cols.len()
    }

    pub fn width(&self) -> usize {
        self.rows.len()
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height(), self.width());
        for row in data.chunks_exact_mut(w) {
            if inverse {
                self.rows.inverse(row);
            } else {
                self.rows.forward(row);
            }
        }
        if h == 1 {
            return;
        }
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = data[y * w + x];
            }
            if inverse {
                self.cols.inverse(&mut column);
            } else {
                self.cols.forward(&mut column);
            }
            for y in 0..h {
                data[y * w + x] = column[y];
            }
        }
    }

    pub fn forward_real(&self, map: &[f64]) -> Spectrum {
        assert_eq!(map.len(), self.height() * self.width());
        let mut data: Vec<Complex64> = map.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.transform(&mut data, false);
        Spectrum {
            height: self.height(),
            width: self.width(),
            coefficients: data,
        }
    }

    /// Real part of the inverse transform, plus the largest absolute
    /// imaginary component that was discarded.
    pub fn inverse_real(&self, spectrum: &Spectrum) -> (Vec<f64>, f64) {
        assert_eq!(
            (spectrum.height, spectrum.width),
            (self.height(), self.width()),
            "spectrum does not match plan"
        );
        let mut data = spectrum.coefficients.clone();
        self.transform(&mut data, true);
        let residual = data.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        (data.into_iter().map(|z| z.re).collect(), residual)
    }

    pub fn inverse_complex(&self, spectrum: &Spectrum) -> Vec<Complex64> {
        let mut data = spectrum.coefficients.clone();
        self.transform(&mut data, true);
        data
    }
}

fn spatial_dims(map: &Tensor) -> Result<(usize, usize)> {
    match *map.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape(format!(
            "fft2d expects a single h×w plane, got shape {:?}",
            map.shape()
        ))),
    }
}

/// Separable 2D DFT of one spatial plane.
pub fn fft2d(map: &Tensor) -> Result<Spectrum> {
    let (h, w) = spatial_dims(map)?;
    let data: Vec<f64> = map.data().iter().map(|&v| f64::from(v)).collect();
    Ok(Fft2dPlan::new(h, w).forward_real(&data))
}

pub fn fft2d_real(height: usize, width: usize, map: &[f64]) -> Result<Spectrum> {
    if height == 0 || width == 0 || map.len() != height * width {
        return Err(Error::shape(format!(
            "map of {} values is not {height}×{width}",
            map.len()
        )));
    }
    Ok(Fft2dPlan::new(height, width).forward_real(map))
}

/// Inverse 2D DFT returning an `h×w` tensor of the real part and the maximum
/// absolute imaginary residual.
pub fn ifft2d(spectrum: &Spectrum) -> (Tensor, f64) {
    let (re, residual) = ifft2d_real(spectrum);
    let data = re.into_iter().map(|v| v as f32).collect();
    let tensor = Tensor::from_vec(&[spectrum.height, spectrum.width], data)
        .expect("spectrum dimensions are positive");
    (tensor, residual)
}

pub fn ifft2d_real(spectrum: &Spectrum) -> (Vec<f64>, f64) {
    Fft2dPlan::new(spectrum.height, spectrum.width).inverse_real(spectrum)
}

/// A set of frequency bins closed under the conjugate mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orbit {
    /// Bin equal to its own mirror (DC and the Nyquist lines of even axes).
    Single((usize, usize)),
    Pair((usize, usize), (usize, usize)),
}

impl Orbit {
    pub fn members(&self) -> impl Iterator<Item = (usize, usize)> {
        let (a, b) = match *self {
            Orbit::Single(a) => (a, None),
            Orbit::Pair(a, b) => (a, Some(b)),
        };
        std::iter::once(a).chain(b)
    }
}

/// Partitions the `h×w` frequency grid into conjugate-mirror orbits, in
/// row-major order of each orbit's first member.
pub fn hermitian_pairs(height: usize, width: usize) -> Result<Vec<Orbit>> {
    if height == 0 || width == 0 {
        return Err(Error::shape(format!(
            "frequency grid {height}×{width} must be non-empty"
        )));
    }
    let mut seen = vec![false; height * width];
    let mut orbits = Vec::with_capacity(height * width / 2 + 2);
    for u in 0..height {
        for v in 0..width {
            if seen[u * width + v] {
                continue;
            }
            let (mu, mv) = mirror_index(height, width, u, v);
            seen[u * width + v] = true;
            if (mu, mv) == (u, v) {
                orbits.push(Orbit::Single((u, v)));
            } else {
                seen[mu * width + mv] = true;
                orbits.push(Orbit::Pair((u, v), (mu, mv)));
            }
        }
    }
    Ok(orbits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_complex(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn max_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn naive_dft_of_impulse_and_constant() {
        let flat = dft_naive(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(flat.iter().all(|z| (z - c(1.0, 0.0)).norm() < 1e-12));
        let dc = dft_naive(&[2.5; 4]).unwrap();
        assert!((dc[0] - c(10.0, 0.0)).norm() < 1e-12);
        assert!(dc[1..].iter().all(|z| z.norm() < 1e-12));
        assert!(dft_naive(&[]).unwrap_err().to_string().contains("empty signal"));
    }

    #[test]
    fn naive_matches_fft_on_length_seven() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let complex: Vec<Complex64> = x.iter().map(|&v| c(v, 0.0)).collect();
        assert!(max_err(&dft_naive(&x).unwrap(), &fft1d(&complex).unwrap()) < 1e-9);
    }

    #[test]
    fn fft1d_trivial_cases() {
        assert_eq!(fft1d(&[c(3.0, -2.0)]).unwrap(), vec![c(3.0, -2.0)]);
        let flat = fft1d(&[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]).unwrap();
        assert!(flat.iter().all(|z| (z - c(1.0, 0.0)).norm() < 1e-12));
        assert!(fft1d(&[]).is_err());
    }

    #[test]
    fn fft1d_length_twelve_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_complex(&mut rng, 12);
        assert!(max_err(&fft1d(&x).unwrap(), &dft_naive_complex(&x, false)) < 1e-9);
    }

    #[test]
    fn ifft1d_examples() {
        let x: Vec<Complex64> = [3.0, 1.0, 4.0, 1.0].iter().map(|&v| c(v, 0.0)).collect();
        assert!(max_err(&ifft1d(&fft1d(&x).unwrap()).unwrap(), &x) < 1e-9);
        let back = ifft1d(&[c(8.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]).unwrap();
        assert!(back.iter().all(|z| (z - c(2.0, 0.0)).norm() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_complex(&mut rng, 9);
        assert!(max_err(&ifft1d(&s).unwrap(), &dft_naive_complex(&s, true)) < 1e-9);
    }

    #[test]
    fn fft1d_matches_oracle_for_every_length_to_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        for n in 1..=64 {
            let x = random_complex(&mut rng, n);
            let err = max_err(&fft1d(&x).unwrap(), &dft_naive_complex(&x, false));
            assert!(err < 1e-9, "length {n}: error {err}");
        }
    }

    #[test]
    fn fft2d_examples() {
        let ones = Tensor::filled(&[4, 4], 1.0);
        let s = fft2d(&ones).unwrap();
        assert!((s.get(0, 0) - c(16.0, 0.0)).norm() < 1e-9);
        assert!(s.coefficients()[1..].iter().all(|z| z.norm() < 1e-9));

        let single = Tensor::from_vec(&[1, 1], vec![-0.75]).unwrap();
        assert_eq!(fft2d(&single).unwrap().coefficients(), &[c(-0.75, 0.0)]);
    }

    #[test]
    fn fft2d_matches_nested_naive_rows_then_columns() {
        let (h, w) = (5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let map: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut grid: Vec<Vec<Complex64>> = map
            .chunks(w)
            .map(|row| dft_naive(row).unwrap())
            .collect();
        for x in 0..w {
            let col: Vec<Complex64> = (0..h).map(|y| grid[y][x]).collect();
            let t = dft_naive_complex(&col, false);
            for y in 0..h {
                grid[y][x] = t[y];
            }
        }
        let expected: Vec<Complex64> = grid.into_iter().flatten().collect();
        let got = fft2d_real(h, w, &map).unwrap();
        assert!(max_err(got.coefficients(), &expected) < 1e-9);
        assert!(got.hermitian_defect() < 1e-9);
    }

    #[test]
    fn ifft2d_residual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map: Vec<f32> = (0..7 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[7, 9], map).unwrap();
        let (back, residual) = ifft2d(&fft2d(&x).unwrap());
        assert!(back.max_abs_diff(&x) < 1e-9);
        assert!(residual < 1e-9);

        let mut masked = fft2d(&x).unwrap();
        // zero one off-axis bin but not its mirror
        masked.coefficients_mut()[9 + 2] = c(0.0, 0.0);
        assert!(masked.hermitian_defect() > 0.0);
        let (_, broken) = ifft2d(&masked);
        assert!(broken > 0.0);

        let (_, repaired) = ifft2d(&masked.hermitian_project());
        assert!(repaired < 1e-9);
    }

    #[test]
    fn hermitian_pairs_small_grids() {
        assert_eq!(hermitian_pairs(1, 1).unwrap(), vec![Orbit::Single((0, 0))]);
        let two = hermitian_pairs(2, 2).unwrap();
        assert_eq!(two.len(), 4);
        assert!(two.iter().all(|o| matches!(o, Orbit::Single(_))));
        let three = hermitian_pairs(3, 3).unwrap();
        let singles = three.iter().filter(|o| matches!(o, Orbit::Single(_))).count();
        assert_eq!(singles, 1);
        assert_eq!(three.len() - singles, 4);
        assert_eq!(three.iter().flat_map(|o| o.members()).count(), 9);
    }

    #[test]
    fn hermitian_pairs_partition_the_grid() {
        for h in 1..=16 {
            for w in 1..=16 {
                let mut hits = vec![0u8; h * w];
                for orbit in hermitian_pairs(h, w).unwrap() {
                    let members: Vec<_> = orbit.members().collect();
                    for &(u, v) in &members {
                        hits[u * w + v] += 1;
                        assert!(members.contains(&mirror_index(h, w, u, v)));
                    }
                }
                assert!(hits.iter().all(|&n| n == 1), "{h}×{w} not a partition");
            }
        }
    }

    fn map_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..=32, 1usize..=32).prop_flat_map(|(h, w)| {
            (
                Just(h),
                Just(w),
                proptest::collection::vec(-10.0f64..10.0, h * w),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_recovers_map((h, w, map) in map_strategy()) {
            let (back, residual) = ifft2d_real(&fft2d_real(h, w, &map).unwrap());
            let err = back.iter().zip(&map).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-9);
            prop_assert!(residual < 1e-9);
        }

        #[test]
        fn transform_is_linear((h, w, x) in map_strategy(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let y: Vec<f64> = x.iter().rev().map(|v| v * 0.5 + 1.0).collect();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let fx = fft2d_real(h, w, &x).unwrap();
            let fy = fft2d_real(h, w, &y).unwrap();
            let fc = fft2d_real(h, w, &combo).unwrap();
            for i in 0..h * w {
                let expect = fx.coefficients()[i] * a + fy.coefficients()[i] * b;
                prop_assert!((fc.coefficients()[i] - expect).norm() < 1e-9);
            }
        }

        #[test]
        fn parseval_holds((h, w, x) in map_strategy()) {
            let energy: f64 = x.iter().map(|v| v * v).sum();
            let s = fft2d_real(h, w, &x).unwrap();
            let spectral: f64 = s.coefficients().iter().map(|z| z.norm_sqr()).sum::<f64>()
                / (h * w) as f64;
            prop_assert!((energy - spectral).abs() <= 1e-6 * energy.max(1e-12));
        }
    }
}
